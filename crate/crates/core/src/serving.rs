//! Recommendation logic over an immutable snapshot of model, index and
//! catalogue: similar, complementary and inspirational carousels, history
//! aggregation and interleaving.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::ann::{AnyIndex, IndexError, Probe};
use crate::catalog::Catalog;
use crate::encoder::{EncodeError, EncoderParams, TowerMode};

/// History events older than this (relative to `now`) are ignored.
pub const HISTORY_WINDOW_SECS: u64 = 7 * 24 * 3600;
/// At most this many of the most recent in-window views are considered.
pub const HISTORY_MAX_VIEWS: usize = 100;
/// Largest accepted `topk`.
pub const MAX_TOPK: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub product_id: String,
    pub ts: u64,
}

/// Viewed products, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct UserHistory {
    events: Vec<HistoryEvent>,
}

impl UserHistory {
    /// Fails if timestamps decrease anywhere in the list.
    pub fn new(events: Vec<HistoryEvent>) -> Result<Self, ServeError> {
        if events.windows(2).any(|w| w[1].ts < w[0].ts) {
            return Err(ServeError::InvalidParameters("history timestamps must be non-decreasing".into()));
        }
        Ok(UserHistory { events })
    }

    /// Sorts by timestamp, keeping the given order among equal timestamps.
    pub fn from_unsorted(mut events: Vec<HistoryEvent>) -> Self {
        events.sort_by_key(|e| e.ts);
        UserHistory { events }
    }

    pub fn events(&self) -> &[HistoryEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representative {
    pub category: String,
    pub product_id: String,
    pub ts: u64,
}

/// One representative per leaf category, most recently viewed category first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryRepresentatives {
    pub entries: Vec<Representative>,
}

impl CategoryRepresentatives {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, category: &str) -> Option<&str> {
        self.entries.iter().find(|r| r.category == category).map(|r| r.product_id.as_str())
    }
}

/// Keeps views with `now - ts <= 7 days` (future timestamps count as in
/// window), takes the newest 100 of those, and picks the most recent view per
/// leaf category. Views of products missing from the catalogue are skipped.
pub fn aggregate_history(history: &UserHistory, now: u64, catalog: &Catalog) -> CategoryRepresentatives {
    let in_window: Vec<&HistoryEvent> =
        history.events.iter().filter(|e| now.saturating_sub(e.ts) <= HISTORY_WINDOW_SECS).collect();
    let recent = &in_window[in_window.len().saturating_sub(HISTORY_MAX_VIEWS)..];
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for e in recent.iter().rev() {
        let Some(leaf) = catalog.leaf_of(&e.product_id) else {
            log::warn!("history product {:?} is not in the catalogue", e.product_id);
            continue;
        };
        if seen.insert(leaf) {
            entries.push(Representative { category: leaf.into(), product_id: e.product_id.clone(), ts: e.ts });
        }
    }
    CategoryRepresentatives { entries }
}

/// Round-robin merge: takes one item from each non-exhausted group in turn,
/// drops items whose key was already emitted, and stops at `topk`.
pub fn interleave<T: Clone, K: Ord>(groups: &[Vec<T>], topk: usize, key: impl Fn(&T) -> K) -> Vec<T> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut cursors = alloc::vec![0usize; groups.len()];
    while out.len() < topk {
        let mut progressed = false;
        for (g, group) in groups.iter().enumerate() {
            if out.len() == topk {
                break;
            }
            while cursors[g] < group.len() {
                let item = &group[cursors[g]];
                cursors[g] += 1;
                if seen.insert(key(item)) {
                    out.push(item.clone());
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// The query's leaf category has no complementary mapping.
    NoMapping,
    /// No usable views in the history window.
    ColdUser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub product_id: String,
    pub score: f32,
    /// Target category (complementary), representative's category
    /// (inspirational) or the item's own leaf category (similar).
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub items: Vec<RecommendedItem>,
    pub status: Status,
    pub snapshot_version: u64,
    pub model_version: String,
    pub index_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServeError {
    UnknownProduct(String),
    InvalidParameters(String),
    /// The loaded snapshot cannot answer this kind of request.
    Unsupported(String),
    Encode(EncodeError),
    Index(IndexError),
}

impl fmt::Display for ServeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServeError::UnknownProduct(id) => write!(f, "unknown product {id:?}"),
            ServeError::InvalidParameters(m) => write!(f, "invalid parameters: {m}"),
            ServeError::Unsupported(m) => write!(f, "not available: {m}"),
            ServeError::Encode(e) => write!(f, "encoding failed: {e}"),
            ServeError::Index(e) => write!(f, "index search failed: {e}"),
        }
    }
}

impl core::error::Error for ServeError {}

impl From<EncodeError> for ServeError {
    fn from(e: EncodeError) -> Self {
        ServeError::Encode(e)
    }
}

impl From<IndexError> for ServeError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::InvalidProbe { .. } => ServeError::InvalidParameters(alloc::format!("{e}")),
            other => ServeError::Index(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnapshotError {
    DimensionMismatch { model: usize, index: usize },
    UnknownIndexedProduct(String),
    InvalidParams(String),
}

impl fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotError::DimensionMismatch { model, index } => {
                write!(f, "model output dimension {model} does not match index dimension {index}")
            }
            SnapshotError::UnknownIndexedProduct(id) => write!(f, "indexed product {id:?} is not in the catalogue"),
            SnapshotError::InvalidParams(m) => write!(f, "invalid model parameters: {m}"),
        }
    }
}

impl core::error::Error for SnapshotError {}

/// Everything a request is answered from. Never mutated once built.
#[derive(Debug, Clone)]
pub struct Snapshot {
    version: u64,
    model_version: String,
    index_version: String,
    params: EncoderParams<f32>,
    index: AnyIndex,
    catalog: Arc<Catalog>,
    probe: Probe,
}

impl Snapshot {
    /// Checks that the model, index and catalogue agree with each other.
    pub fn new(
        version: u64,
        model_version: String,
        index_version: String,
        params: EncoderParams<f32>,
        index: AnyIndex,
        catalog: Arc<Catalog>,
        probe: Probe,
    ) -> Result<Self, SnapshotError> {
        params.validate_shapes().map_err(|e| SnapshotError::InvalidParams(alloc::format!("{e}")))?;
        if params.output_dim() != index.dim() {
            return Err(SnapshotError::DimensionMismatch { model: params.output_dim(), index: index.dim() });
        }
        if let Some(missing) = index.ids().into_iter().find(|id| catalog.get(id).is_none()) {
            return Err(SnapshotError::UnknownIndexedProduct(missing.into()));
        }
        Ok(Snapshot { version, model_version, index_version, params, index, catalog, probe })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn index_version(&self) -> &str {
        &self.index_version
    }

    pub fn params(&self) -> &EncoderParams<f32> {
        &self.params
    }

    pub fn index(&self) -> &AnyIndex {
        &self.index
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn probe(&self) -> Probe {
        self.probe
    }

    pub fn mode(&self) -> TowerMode {
        self.params.mode()
    }

    fn respond(&self, items: Vec<RecommendedItem>, status: Status) -> Recommendation {
        Recommendation {
            items,
            status,
            snapshot_version: self.version,
            model_version: self.model_version.clone(),
            index_version: self.index_version.clone(),
        }
    }

    fn product(&self, product_id: &str) -> Result<&crate::catalog::Product, ServeError> {
        self.catalog.get(product_id).ok_or_else(|| ServeError::UnknownProduct(product_id.into()))
    }

    fn leaf_of(&self, product_id: &str) -> String {
        self.catalog.leaf_of(product_id).unwrap_or_default().into()
    }

    /// Nearest products to `product_id` under the product tower, excluding itself.
    pub fn recommend_similar(&self, product_id: &str, topk: usize) -> Result<Recommendation, ServeError> {
        check_topk(topk)?;
        let product = self.product(product_id)?;
        if self.mode() != TowerMode::Similarity {
            return Err(ServeError::Unsupported("similar items need a similarity model".into()));
        }
        let query = self.params.encode(product)?.vector;
        let found = self.index.search(&query, topk, self.probe, |id| id != product_id)?;
        let items = found
            .hits
            .into_iter()
            .map(|h| RecommendedItem { group: self.leaf_of(&h.product_id), product_id: h.product_id, score: h.score })
            .collect();
        Ok(self.respond(items, Status::Ok))
    }

    /// One conditioned query per mapped target category, each limited to
    /// `ceil(topk / groups)` items, then interleaved. With `filter` off the
    /// candidates are not restricted to the target category.
    pub fn recommend_complementary(
        &self,
        product_id: &str,
        topk: usize,
        filter: bool,
    ) -> Result<Recommendation, ServeError> {
        check_topk(topk)?;
        let product = self.product(product_id)?;
        if self.mode() != TowerMode::Complementary {
            return Err(ServeError::Unsupported("complementary items need a complementary model".into()));
        }
        let Some(targets) = self.catalog.complementary().targets(product.leaf_category()) else {
            return Ok(self.respond(Vec::new(), Status::NoMapping));
        };
        let quota = topk.div_ceil(targets.len());
        let mut groups = Vec::with_capacity(targets.len());
        for target in targets {
            let query = self.params.encode_complementary_query(product, target)?.vector;
            let keep = |id: &str| id != product_id && (!filter || self.catalog.leaf_of(id) == Some(target.as_str()));
            let found = self.index.search(&query, quota, self.probe, keep)?;
            groups.push(
                found
                    .hits
                    .into_iter()
                    .map(|h| RecommendedItem { product_id: h.product_id, score: h.score, group: target.clone() })
                    .collect::<Vec<_>>(),
            );
        }
        let items = interleave(&groups, topk, |i| i.product_id.clone());
        Ok(self.respond(items, Status::Ok))
    }

    /// Seeds one two-level search per category representative and
    /// interleaves the per-category lists in recency order.
    pub fn recommend_inspirational(
        &self,
        history: &UserHistory,
        now: u64,
        probe: Probe,
        topk: usize,
    ) -> Result<Recommendation, ServeError> {
        check_topk(topk)?;
        if self.mode() != TowerMode::Similarity {
            return Err(ServeError::Unsupported("inspiration needs a similarity model".into()));
        }
        let Some(hier) = self.index.as_hierarchical() else {
            return Err(ServeError::Unsupported("inspiration needs a hierarchical index".into()));
        };
        if probe.probe_n == 0 || probe.skip_l + probe.probe_n > hier.k() {
            return Err(IndexError::InvalidProbe { probe_n: probe.probe_n, skip_l: probe.skip_l, clusters: hier.k() }.into());
        }
        let reps = aggregate_history(history, now, &self.catalog);
        if reps.is_empty() {
            return Ok(self.respond(Vec::new(), Status::ColdUser));
        }
        let excluded: BTreeSet<&str> = history.events().iter().map(|e| e.product_id.as_str()).collect();
        let mut groups = Vec::with_capacity(reps.len());
        for rep in &reps.entries {
            let query = self.params.encode(self.product(&rep.product_id)?)?.vector;
            let found = hier.search_filtered(&query, probe.probe_n, probe.skip_l, topk, |id| !excluded.contains(id))?;
            groups.push(
                found
                    .hits
                    .into_iter()
                    .map(|h| RecommendedItem { product_id: h.product_id, score: h.score, group: rep.category.clone() })
                    .collect::<Vec<_>>(),
            );
        }
        let items = interleave(&groups, topk, |i| i.product_id.clone());
        Ok(self.respond(items, Status::Ok))
    }
}

fn check_topk(topk: usize) -> Result<(), ServeError> {
    if topk == 0 || topk > MAX_TOPK {
        return Err(ServeError::InvalidParameters(alloc::format!("k must be between 1 and {MAX_TOPK}")));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::catalog::Catalog;
    use crate::encoder::{EncoderConfig, EncoderDims, EncoderParams, TowerMode};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn params(cat: &Catalog, mode: TowerMode) -> EncoderParams<f32> {
        let dims = EncoderDims {
            title_hash_buckets: 64,
            title_embedding_dim: 4,
            price_buckets: 3,
            price_embedding_dim: 2,
            category_embedding_dim: 3,
            seller_hash_buckets: 8,
            seller_embedding_dim: 2,
            hidden_dims: vec![8],
            output_dim: 4,
            max_category_levels: None,
        };
        EncoderParams::init(EncoderConfig::fit(cat, &dims), mode, &mut ChaCha8Rng::seed_from_u64(1))
    }

    pub fn similarity_params(cat: &Catalog) -> EncoderParams<f32> {
        params(cat, TowerMode::Similarity)
    }
}
