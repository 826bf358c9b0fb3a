use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansOptions};
use super::{rank_order, FlatIndex, IndexError, SearchResult};
use crate::linalg;

/// What the top level compares queries against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidScoring {
    /// Cluster means as computed.
    #[default]
    Raw,
    /// Cluster means rescaled to unit norm.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchicalOptions {
    /// Number of clusters; `None` means `ceil(sqrt(N))`.
    pub k: Option<usize>,
    pub kmeans: KMeansOptions,
    pub scoring: CentroidScoring,
}

impl Default for HierarchicalOptions {
    fn default() -> Self {
        HierarchicalOptions { k: None, kmeans: KMeansOptions::default(), scoring: CentroidScoring::Raw }
    }
}

pub fn default_cluster_count(n: usize) -> usize {
    let mut k = libm::ceil(libm::sqrt(n as f64)) as usize;
    while k * k < n {
        k += 1;
    }
    k.clamp(1, n.max(1))
}

/// Top-level centroid table over `k` exact second-level indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalIndex {
    dim: usize,
    scoring: CentroidScoring,
    /// `k x dim`, the vectors queries are scored against at the top level.
    centroids: Vec<f32>,
    clusters: Vec<FlatIndex>,
    assignment: BTreeMap<String, u32>,
}

impl HierarchicalIndex {
    pub fn build(flat: &FlatIndex, options: &HierarchicalOptions) -> Result<Self, IndexError> {
        let dim = flat.dim();
        let k = options.k.unwrap_or_else(|| default_cluster_count(flat.len()));
        let km = kmeans(flat.vectors(), dim, k, &options.kmeans)?;
        let mut members: Vec<(Vec<String>, Vec<f32>)> = (0..k).map(|_| (Vec::new(), Vec::new())).collect();
        for (pos, &c) in km.assignment.iter().enumerate() {
            let (ids, vecs) = &mut members[c as usize];
            ids.push(flat.ids()[pos].clone());
            vecs.extend_from_slice(flat.vector(pos));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for c in 0..k {
            let row = km.centroid(c);
            let scale = match options.scoring {
                CentroidScoring::Raw => 1.0,
                CentroidScoring::Normalized => {
                    let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                    if n > 0.0 {
                        1.0 / n
                    } else {
                        1.0
                    }
                }
            };
            centroids.extend(row.iter().map(|&v| (v * scale) as f32));
        }
        let clusters = members
            .into_iter()
            .map(|(ids, vecs)| FlatIndex::from_parts_unchecked(dim, ids, vecs))
            .collect();
        Ok(Self::assemble(dim, options.scoring, centroids, clusters))
    }

    /// Reassembles an index from stored parts, revalidating every row.
    pub fn from_parts(
        dim: usize,
        scoring: CentroidScoring,
        centroids: Vec<f32>,
        clusters: Vec<(Vec<String>, Vec<f32>)>,
    ) -> Result<Self, IndexError> {
        if clusters.is_empty() {
            return Err(IndexError::Empty);
        }
        if centroids.len() != clusters.len() * dim {
            return Err(IndexError::DimensionMismatch { expected: clusters.len() * dim, found: centroids.len() });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::Corrupt("non-finite centroid"));
        }
        let mut built = Vec::with_capacity(clusters.len());
        let mut seen = BTreeMap::new();
        for (ids, vecs) in clusters {
            for id in &ids {
                if seen.insert(id.clone(), ()).is_some() {
                    return Err(IndexError::DuplicateId(id.clone()));
                }
            }
            built.push(FlatIndex::from_parts(dim, ids, vecs)?);
        }
        let index = Self::assemble(dim, scoring, centroids, built);
        Ok(index)
    }

    fn assemble(dim: usize, scoring: CentroidScoring, centroids: Vec<f32>, clusters: Vec<FlatIndex>) -> Self {
        let mut assignment = BTreeMap::new();
        for (c, cl) in clusters.iter().enumerate() {
            for id in cl.ids() {
                assignment.insert(id.clone(), c as u32);
            }
        }
        HierarchicalIndex { dim, scoring, centroids, clusters, assignment }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn scoring(&self) -> CentroidScoring {
        self.scoring
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn clusters(&self) -> &[FlatIndex] {
        &self.clusters
    }

    pub fn cluster_of(&self, product_id: &str) -> Option<u32> {
        self.assignment.get(product_id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, u32> {
        &self.assignment
    }

    /// Cluster ids by descending centroid score, ties by ascending id.
    pub fn rank_clusters(&self, query: &[f32]) -> Vec<u32> {
        let mut scored: Vec<(f32, u32)> = (0..self.k())
            .map(|c| (linalg::dot(query, self.centroid(c)), c as u32))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, c)| c).collect()
    }

    pub fn search(&self, query: &[f32], probe_n: usize, skip_l: usize, topk: usize) -> Result<SearchResult, IndexError> {
        self.search_filtered(query, probe_n, skip_l, topk, |_| true)
    }

    /// Probes clusters `skip_l..skip_l + probe_n` of the ranking and merges
    /// their exact results. `keep` filters candidates by product id.
    pub fn search_filtered(
        &self,
        query: &[f32],
        probe_n: usize,
        skip_l: usize,
        topk: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Result<SearchResult, IndexError> {
        if probe_n == 0 || skip_l + probe_n > self.k() {
            return Err(IndexError::InvalidProbe { probe_n, skip_l, clusters: self.k() });
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        let ranking = self.rank_clusters(query);
        let mut hits = Vec::new();
        for &c in &ranking[skip_l..skip_l + probe_n] {
            let cluster = &self.clusters[c as usize];
            let part = cluster.search_tagged(query, topk, Some(c), |pos| keep(&cluster.ids()[pos]));
            hits.extend(part.hits);
        }
        hits.sort_by(|a, b| rank_order(a.score, &a.product_id, b.score, &b.product_id));
        hits.truncate(topk);
        Ok(SearchResult { hits })
    }

    /// True when both indexes hold exactly the same (id, vector) rows.
    pub fn same_vectors_as(&self, flat: &FlatIndex) -> bool {
        if flat.dim() != self.dim || flat.len() != self.len() {
            return false;
        }
        let positions: BTreeMap<&str, usize> = flat.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        self.clusters.iter().all(|cl| {
            cl.ids().iter().enumerate().all(|(i, id)| {
                positions
                    .get(id.as_str())
                    .map_or(false, |&p| flat.vector(p).cmp_bits(cl.vector(i)) == Ordering::Equal)
            })
        })
    }
}

trait BitCmp {
    fn cmp_bits(&self, other: &Self) -> Ordering;
}

impl BitCmp for [f32] {
    fn cmp_bits(&self, other: &Self) -> Ordering {
        self.iter().map(|v| v.to_bits()).cmp(other.iter().map(|v| v.to_bits()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ProductEmbedding;
    use crate::linalg::standard_normal;
    use alloc::format;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit_vectors(n: usize, d: usize, seed: u64) -> Vec<ProductEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut v: Vec<f32> = (0..d).map(|_| standard_normal(&mut rng) as f32).collect();
                let n = linalg::norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                ProductEmbedding { product_id: format!("p{i:05}"), vector: v }
            })
            .collect()
    }

    fn build(n: usize, k: usize, seed: u64) -> (FlatIndex, HierarchicalIndex) {
        let flat = FlatIndex::build(unit_vectors(n, 8, seed)).unwrap();
        let opts = HierarchicalOptions { k: Some(k), ..Default::default() };
        let h = HierarchicalIndex::build(&flat, &opts).unwrap();
        (flat, h)
    }

    #[test]
    fn default_k_is_ceil_sqrt() {
        assert_eq!(default_cluster_count(1), 1);
        assert_eq!(default_cluster_count(10), 4);
        assert_eq!(default_cluster_count(100), 10);
        assert_eq!(default_cluster_count(10_000), 100);
    }

    #[test]
    fn single_cluster_equals_flat() {
        let (flat, h) = build(200, 1, 1);
        let q = flat.vector(3).to_vec();
        assert_eq!(h.search(&q, 1, 0, 20).unwrap().hits.iter().map(|x| &x.product_id).collect::<Vec<_>>(),
                   flat.search(&q, 20).hits.iter().map(|x| &x.product_id).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_probe_settings() {
        let (flat, h) = build(100, 4, 2);
        let q = flat.vector(0);
        assert!(matches!(h.search(q, 0, 0, 5), Err(IndexError::InvalidProbe { .. })));
        assert!(matches!(h.search(q, 3, 2, 5), Err(IndexError::InvalidProbe { .. })));
        assert!(h.search(q, 2, 2, 5).is_ok());
    }

    #[test]
    fn hits_carry_their_cluster() {
        let (flat, h) = build(300, 6, 3);
        let r = h.search(flat.vector(5), 3, 1, 30).unwrap();
        for hit in &r.hits {
            assert_eq!(hit.cluster, h.cluster_of(&hit.product_id));
        }
    }

    #[test]
    fn normalized_scoring_uses_unit_centroids() {
        let flat = FlatIndex::build(unit_vectors(100, 8, 4)).unwrap();
        let opts = HierarchicalOptions { k: Some(5), scoring: CentroidScoring::Normalized, ..Default::default() };
        let h = HierarchicalIndex::build(&flat, &opts).unwrap();
        for c in 0..5 {
            assert!((linalg::norm(h.centroid(c)) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_vectors_detects_mismatch() {
        let (flat, h) = build(50, 3, 5);
        assert!(h.same_vectors_as(&flat));
        let other = FlatIndex::build(unit_vectors(50, 8, 6)).unwrap();
        assert!(!h.same_vectors_as(&other));
    }

    #[test]
    fn from_parts_round_trip() {
        let (_, h) = build(60, 4, 7);
        let parts = h.clusters().iter().map(|c| (c.ids().to_vec(), c.vectors().to_vec())).collect();
        let back = HierarchicalIndex::from_parts(8, h.scoring(), h.centroids().to_vec(), parts).unwrap();
        assert_eq!(back, h);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exhaustive_probe_is_exact(seed in 0u64..500, k in 1usize..10) {
            let (flat, h) = build(120, k, seed);
            let q = unit_vectors(1, 8, seed + 1000).remove(0).vector;
            let a: Vec<String> = h.search(&q, k, 0, 25).unwrap().ids().map(String::from).collect();
            let b: Vec<String> = flat.search(&q, 25).ids().map(String::from).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn skipped_clusters_never_appear(seed in 0u64..500, skip in 1usize..4) {
            let (flat, h) = build(150, 8, seed);
            let q = flat.vector((seed % 150) as usize);
            let ranking = h.rank_clusters(q);
            let r = h.search(q, 2, skip, 40).unwrap();
            for hit in &r.hits {
                prop_assert!(!ranking[..skip].contains(&hit.cluster.unwrap()));
            }
        }
    }
}
