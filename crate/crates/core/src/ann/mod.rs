//! Exact and two-level approximate nearest-neighbour search over unit vectors.
//!
//! Scores are dot products. Every ranking in this module orders by descending
//! score and breaks ties by ascending product id (clusters by ascending id),
//! so exhaustive probing of the two-level index reproduces exact search.

mod flat;
mod hierarchical;
mod kmeans;

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use flat::FlatIndex;
pub use hierarchical::{CentroidScoring, HierarchicalIndex, HierarchicalOptions};
pub use kmeans::{kmeans, KMeansError, KMeansOptions, KMeansResult};

/// Rows must have unit norm within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub product_id: String,
    pub score: f32,
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.product_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Clusters to probe in a two-level index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_n: usize,
    pub skip_l: usize,
}

impl Default for Probe {
    fn default() -> Self {
        Probe { probe_n: 16, skip_l: 0 }
    }
}

/// Either index kind, searched through one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyIndex {
    Flat(FlatIndex),
    Hierarchical(HierarchicalIndex),
}

impl AnyIndex {
    pub fn dim(&self) -> usize {
        match self {
            AnyIndex::Flat(f) => f.dim(),
            AnyIndex::Hierarchical(h) => h.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyIndex::Flat(f) => f.len(),
            AnyIndex::Hierarchical(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_hierarchical(&self) -> Option<&HierarchicalIndex> {
        match self {
            AnyIndex::Hierarchical(h) => Some(h),
            AnyIndex::Flat(_) => None,
        }
    }

    /// Every product id held by the index.
    pub fn ids(&self) -> Vec<&str> {
        match self {
            AnyIndex::Flat(f) => f.ids().iter().map(String::as_str).collect(),
            AnyIndex::Hierarchical(h) => h.assignment().keys().map(String::as_str).collect(),
        }
    }

    /// Top-`k` among products accepted by `keep`. A flat index ignores
    /// `probe`; a two-level index clamps `probe_n` to the clusters left after
    /// skipping.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        probe: Probe,
        keep: impl Fn(&str) -> bool,
    ) -> Result<SearchResult, IndexError> {
        if query.len() != self.dim() {
            return Err(IndexError::DimensionMismatch { expected: self.dim(), found: query.len() });
        }
        match self {
            AnyIndex::Flat(f) => Ok(f.search_filtered(query, k, |pos| keep(&f.ids()[pos]))),
            AnyIndex::Hierarchical(h) => {
                let probe_n = probe.probe_n.min(h.k().saturating_sub(probe.skip_l));
                h.search_filtered(query, probe_n, probe.skip_l, k, keep)
            }
        }
    }
}

/// Descending score, then ascending id.
#[inline]
pub fn rank_order(a_score: f32, a_id: &str, b_score: f32, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexError {
    Empty,
    DimensionMismatch { expected: usize, found: usize },
    DuplicateId(String),
    NotUnitNorm { product_id: String, norm: f64 },
    KMeans(KMeansError),
    InvalidProbe { probe_n: usize, skip_l: usize, clusters: usize },
    MismatchedVectorSets,
    Corrupt(&'static str),
}

impl fmt::Display for IndexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexError::Empty => f.write_str("cannot build an index from no vectors"),
            IndexError::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            IndexError::DuplicateId(id) => write!(f, "duplicate product id {id:?}"),
            IndexError::NotUnitNorm { product_id, norm } => {
                write!(f, "vector for {product_id:?} has norm {norm}, expected 1")
            }
            IndexError::KMeans(e) => write!(f, "{e}"),
            IndexError::InvalidProbe { probe_n, skip_l, clusters } => write!(
                f,
                "invalid probe settings: probe_n={probe_n}, skip_l={skip_l} with {clusters} clusters"
            ),
            IndexError::MismatchedVectorSets => f.write_str("indexes do not hold the same vectors"),
            IndexError::Corrupt(what) => write!(f, "corrupt index: {what}"),
        }
    }
}

impl core::error::Error for IndexError {}

impl From<KMeansError> for IndexError {
    fn from(e: KMeansError) -> Self {
        IndexError::KMeans(e)
    }
}

/// Bounded best-k buffer over `(score, position)`, ordered by [`rank_order`]
/// with ids resolved through `id_of`.
pub(crate) struct TopK<'a> {
    k: usize,
    items: Vec<(f32, usize)>,
    id_of: &'a dyn Fn(usize) -> &'a str,
}

impl<'a> TopK<'a> {
    pub fn new(k: usize, id_of: &'a dyn Fn(usize) -> &'a str) -> Self {
        TopK { k, items: Vec::with_capacity(k + 1), id_of }
    }

    #[inline]
    pub fn push(&mut self, score: f32, pos: usize) {
        if self.k == 0 {
            return;
        }
        if self.items.len() == self.k {
            let (ws, wp) = self.items[self.k - 1];
            if score < ws {
                return;
            }
            if rank_order(score, (self.id_of)(pos), ws, (self.id_of)(wp)) != Ordering::Less {
                return;
            }
        }
        let id = (self.id_of)(pos);
        let at = self
            .items
            .partition_point(|&(s, p)| rank_order(s, (self.id_of)(p), score, id) == Ordering::Less);
        self.items.insert(at, (score, pos));
        self.items.truncate(self.k);
    }

    pub fn into_sorted(self) -> Vec<(f32, usize)> {
        self.items
    }
}

pub(crate) fn check_unit_rows(ids: &[String], vectors: &[f32], dim: usize) -> Result<(), IndexError> {
    for (i, row) in vectors.chunks_exact(dim).enumerate() {
        let norm = libm::sqrt(row.iter().map(|&v| v as f64 * v as f64).sum::<f64>());
        if !(libm::fabs(norm - 1.0) <= UNIT_NORM_TOLERANCE) {
            return Err(IndexError::NotUnitNorm { product_id: ids[i].clone(), norm });
        }
    }
    Ok(())
}
