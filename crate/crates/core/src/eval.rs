//! Offline metrics: held-out retrieval recall, index recall against the exact
//! oracle, result diversity and latency summaries.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::ann::{AnyIndex, FlatIndex, HierarchicalIndex, IndexError, Probe};
use crate::catalog::{Catalog, PairSet};
use crate::encoder::{EncodeError, EncoderParams, TowerMode};
use crate::serving::Recommendation;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Empty,
    UnknownProduct(String),
    Encode(EncodeError),
    Index(IndexError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Empty => f.write_str("nothing to evaluate"),
            EvalError::UnknownProduct(id) => write!(f, "unknown product {id:?}"),
            EvalError::Encode(e) => write!(f, "{e}"),
            EvalError::Index(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<EncodeError> for EvalError {
    fn from(e: EncodeError) -> Self {
        EvalError::Encode(e)
    }
}

impl From<IndexError> for EvalError {
    fn from(e: IndexError) -> Self {
        EvalError::Index(e)
    }
}

/// Fraction of held-out `(query, target)` pairs whose target is among the
/// top-k results for the query, with the query itself excluded.
///
/// A complementary model conditions each query on the target's leaf category.
pub fn recall_at_k(
    params: &EncoderParams<f32>,
    index: &AnyIndex,
    probe: Probe,
    catalog: &Catalog,
    heldout: &PairSet,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    if heldout.pairs.is_empty() || ks.is_empty() {
        return Err(EvalError::Empty);
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let conditioned = params.mode() == TowerMode::Complementary;
    // Group targets by (query, condition) so each query is searched once.
    let mut queries: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for p in &heldout.pairs {
        let condition = if conditioned {
            catalog.leaf_of(&p.target_id).ok_or_else(|| EvalError::UnknownProduct(p.target_id.clone()))?
        } else {
            ""
        };
        queries.entry((p.query_id.as_str(), condition)).or_default().push(p.target_id.as_str());
    }
    let mut hits = alloc::vec![0usize; ks.len()];
    for ((query_id, condition), targets) in &queries {
        let product = catalog.get(query_id).ok_or_else(|| EvalError::UnknownProduct((*query_id).into()))?;
        let vector = if conditioned {
            params.encode_complementary_query(product, condition)?.vector
        } else {
            params.encode(product)?.vector
        };
        let found = index.search(&vector, max_k, probe, |id| id != *query_id)?;
        let rank: BTreeMap<&str, usize> = found.hits.iter().enumerate().map(|(r, h)| (h.product_id.as_str(), r)).collect();
        for t in targets {
            if let Some(&r) = rank.get(t) {
                for (slot, &k) in ks.iter().enumerate() {
                    if r < k {
                        hits[slot] += 1;
                    }
                }
            }
        }
    }
    let n = heldout.pairs.len() as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect())
}

/// Mean over queries of `|top-k(hier) ∩ top-k(flat)| / |top-k(flat)|`.
pub fn index_recall(
    flat: &FlatIndex,
    hier: &HierarchicalIndex,
    queries: &[Vec<f32>],
    k: usize,
    probe: Probe,
) -> Result<f64, EvalError> {
    if queries.is_empty() || k == 0 {
        return Err(EvalError::Empty);
    }
    if !hier.same_vectors_as(flat) {
        return Err(IndexError::MismatchedVectorSets.into());
    }
    let mut total = 0.0;
    for q in queries {
        let exact: BTreeSet<String> = flat.search(q, k).hits.into_iter().map(|h| h.product_id).collect();
        let approx = hier.search(q, probe.probe_n, probe.skip_l, k)?;
        let common = approx.hits.iter().filter(|h| exact.contains(&h.product_id)).count();
        total += common as f64 / exact.len().max(1) as f64;
    }
    Ok(total / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean_distinct_categories: f64,
    pub mean_distinct_clusters: f64,
    pub responses: usize,
}

/// Mean number of distinct leaf categories and distinct clusters per response.
/// Items without a known category or cluster are not counted.
pub fn diversity(
    responses: &[Recommendation],
    cluster_of: impl Fn(&str) -> Option<u32>,
    catalog: &Catalog,
) -> Result<Diversity, EvalError> {
    if responses.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut cats, mut clusters) = (0usize, 0usize);
    for r in responses {
        let c: BTreeSet<&str> = r.items.iter().filter_map(|i| catalog.leaf_of(&i.product_id)).collect();
        let k: BTreeSet<u32> = r.items.iter().filter_map(|i| cluster_of(&i.product_id)).collect();
        cats += c.len();
        clusters += k.len();
    }
    let n = responses.len() as f64;
    Ok(Diversity {
        mean_distinct_categories: cats as f64 / n,
        mean_distinct_clusters: clusters as f64 / n,
        responses: responses.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub queries_per_sec: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over per-request latencies in milliseconds.
    pub fn from_samples(mut samples: Vec<f64>, threads: usize, wall_secs: f64) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let pct = |p: f64| samples[((libm::ceil(p * n as f64) as usize).max(1) - 1).min(n - 1)];
        Some(LatencyStats {
            count: n,
            threads,
            mean_ms: samples.iter().sum::<f64>() / n as f64,
            p50_ms: pct(0.50),
            p95_ms: pct(0.95),
            p99_ms: pct(0.99),
            queries_per_sec: if wall_secs > 0.0 { n as f64 / wall_secs } else { 0.0 },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub index_recall_at_k: BTreeMap<usize, f64>,
    pub diversity: Option<Diversity>,
    pub latency: Vec<LatencyStats>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
}

impl EvalReport {
    /// The report without timing fields, which are the only
    /// non-deterministic part.
    pub fn without_latency(&self) -> EvalReport {
        EvalReport { latency: Vec::new(), ..self.clone() }
    }
}
