use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::{check_unit_rows, Hit, IndexError, SearchResult, TopK};
use crate::encoder::ProductEmbedding;
use crate::linalg;

/// Exhaustive inner-product index. The correctness oracle for everything
/// approximate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
}

impl FlatIndex {
    pub fn build(embeddings: Vec<ProductEmbedding>) -> Result<Self, IndexError> {
        let dim = embeddings.first().ok_or(IndexError::Empty)?.vector.len();
        let mut ids = Vec::with_capacity(embeddings.len());
        let mut vectors = Vec::with_capacity(embeddings.len() * dim);
        for e in embeddings {
            if e.vector.len() != dim {
                return Err(IndexError::DimensionMismatch { expected: dim, found: e.vector.len() });
            }
            ids.push(e.product_id);
            vectors.extend_from_slice(&e.vector);
        }
        Self::from_parts(dim, ids, vectors)
    }

    /// Builds from raw rows, checking the same invariants as [`build`](Self::build).
    pub fn from_parts(dim: usize, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::Empty);
        }
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(IndexError::DimensionMismatch { expected: ids.len() * dim, found: vectors.len() });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        check_unit_rows(&ids, &vectors, dim)?;
        Ok(FlatIndex { dim, ids, vectors })
    }

    pub(crate) fn from_parts_unchecked(dim: usize, ids: Vec<String>, vectors: Vec<f32>) -> Self {
        FlatIndex { dim, ids, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Exact top-`k` by dot product (fewer when the index is smaller).
    pub fn search(&self, query: &[f32], k: usize) -> SearchResult {
        self.search_filtered(query, k, |_| true)
    }

    /// Exact top-`k` among rows whose position satisfies `keep`.
    pub fn search_filtered(&self, query: &[f32], k: usize, keep: impl Fn(usize) -> bool) -> SearchResult {
        self.search_tagged(query, k, None, keep)
    }

    pub(crate) fn search_tagged(
        &self,
        query: &[f32],
        k: usize,
        cluster: Option<u32>,
        keep: impl Fn(usize) -> bool,
    ) -> SearchResult {
        debug_assert_eq!(query.len(), self.dim);
        let id_of = |p: usize| self.ids[p].as_str();
        let mut top = TopK::new(k, &id_of);
        for (pos, row) in self.vectors.chunks_exact(self.dim).enumerate() {
            if keep(pos) {
                top.push(linalg::dot(query, row), pos);
            }
        }
        let hits = top
            .into_sorted()
            .into_iter()
            .map(|(score, pos)| Hit { product_id: self.ids[pos].clone(), score, cluster })
            .collect();
        SearchResult { hits }
    }
}
