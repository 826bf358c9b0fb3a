//! The offline steps behind the CLI: generate, mine, train, build-index and
//! eval. Each step reads and writes files so runs can be resumed or repeated.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use twotower_core::ann::{AnyIndex, FlatIndex, HierarchicalIndex, HierarchicalOptions, Probe};
use twotower_core::catalog::{
    generate_synthetic, mine_copurchase_pairs, mine_coview_pairs, split_heldout, Catalog, PairKind, PairSet,
    SyntheticSpec, HOLDOUT_FRACTION,
};
use twotower_core::encoder::{encode_catalog, EncoderConfig, EncoderDims, EncoderParams, TowerMode};
use twotower_core::eval::{diversity, index_recall, recall_at_k, EvalReport};
use twotower_core::serving::{Recommendation, Snapshot};
use twotower_core::training::{train_complementary, train_similarity, TrainConfig, TrainError};

use crate::index_file::IndexHeader;
use crate::{bench, checkpoint, index_file, io};

pub const LOG_FILE: &str = "log.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Writes a synthetic catalogue directory plus `log.jsonl` and `truth.jsonl`.
pub fn generate(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<()> {
    let data = generate_synthetic(spec, seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    io::save_catalog(out, &data.catalog).with_context(|| format!("writing catalogue to {}", out.display()))?;
    io::save_log(&out.join(LOG_FILE), &data.log)?;
    io::save_ground_truth(&out.join(TRUTH_FILE), &data.ground_truth)?;
    log::info!("generated {} products and {} events in {}", data.catalog.len(), data.log.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MineSummary {
    pub mined: usize,
    pub train: usize,
    pub heldout: usize,
}

/// Mines pairs into `out`. With `heldout`, a hashed 10% split goes there and
/// only the rest goes to `out`.
pub fn mine(
    kind: PairKind,
    min_cooccurrence: u32,
    log_path: &Path,
    catalog_dir: &Path,
    out: &Path,
    heldout: Option<&Path>,
) -> Result<MineSummary> {
    let catalog = io::load_catalog(catalog_dir)?;
    let log = io::load_log(log_path)?;
    let pairs = match kind {
        PairKind::Coview => mine_coview_pairs(&log, min_cooccurrence),
        PairKind::Copurchase => mine_copurchase_pairs(&log, &catalog, catalog.complementary(), min_cooccurrence),
    };
    let mined = pairs.len();
    let (train, held) = match heldout {
        Some(_) => split_heldout(&pairs, HOLDOUT_FRACTION),
        None => (pairs, PairSet { kind, min_cooccurrence, pairs: Vec::new() }),
    };
    io::save_pairs(out, &train)?;
    if let Some(path) = heldout {
        io::save_pairs(path, &held)?;
    }
    log::info!("mined {mined} pairs: {} for training, {} held out", train.len(), held.len());
    Ok(MineSummary { mined, train: train.len(), heldout: held.len() })
}

/// Training config file: [`TrainConfig`] keys at the top level and an
/// optional `[encoder]` table of [`EncoderDims`].
pub fn load_train_config(path: Option<&Path>) -> Result<(TrainConfig, EncoderDims)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), EncoderDims::default()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let dims = match table.remove("encoder") {
        Some(v) => v.try_into().with_context(|| format!("{}: [encoder]", path.display()))?,
        None => EncoderDims::default(),
    };
    let config: TrainConfig = toml::Value::Table(table).try_into().with_context(|| format!("{}", path.display()))?;
    config.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok((config, dims))
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochLine {
    epoch: usize,
    main_loss: f64,
    reconstruction_loss: f64,
    grad_norm: f64,
    wall_time: f64,
}

pub struct TrainArgs<'a> {
    pub mode: TowerMode,
    pub pairs: &'a Path,
    pub catalog: &'a Path,
    /// Overrides the catalogue's complementary map.
    pub map: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    /// Defaults to `<out>.log.jsonl`.
    pub log: Option<&'a Path>,
}

/// Trains and writes the checkpoint after every epoch. On divergence the
/// last good parameters are written and an error is returned.
pub fn train(args: &TrainArgs<'_>) -> Result<String> {
    let catalog = io::load_catalog(args.catalog)?;
    let pairs = io::load_pairs(args.pairs)?;
    let (config, dims) = load_train_config(args.config)?;
    let encoder = EncoderConfig::fit(&catalog, &dims);
    let log_path = args.log.map(PathBuf::from).unwrap_or_else(|| with_suffix(args.out, ".log.jsonl"));
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let started = Instant::now();
    let mut failure: Option<anyhow::Error> = None;
    let mut on_epoch = |r: &twotower_core::LossReport, p: &EncoderParams<f32>| {
        if failure.is_some() {
            return;
        }
        let line = EpochLine {
            epoch: r.epoch,
            main_loss: r.main_loss,
            reconstruction_loss: r.reconstruction_loss,
            grad_norm: r.gradient_norm,
            wall_time: started.elapsed().as_secs_f64(),
        };
        let res = checkpoint::save(args.out, p, Some(r.epoch))
            .and_then(|_| writeln!(log_file, "{}", serde_json::to_string(&line).expect("serialisable")));
        if let Err(e) = res {
            failure = Some(e.into());
        }
    };
    let outcome = match args.mode {
        TowerMode::Similarity => train_similarity(&pairs, &catalog, encoder, &config, &mut on_epoch),
        TowerMode::Complementary => {
            let map = match args.map {
                Some(path) => io::load_complementary(path, catalog.taxonomy())?,
                None => catalog.complementary().clone(),
            };
            train_complementary(&pairs, &catalog, &map, encoder, &config, &mut on_epoch)
        }
    };
    if let Some(e) = failure {
        return Err(e.context("writing checkpoint or training log"));
    }
    match outcome {
        Ok(o) => {
            let fp = checkpoint::save(args.out, &o.params, Some(config.epochs))?;
            log::info!("wrote {} ({fp})", args.out.display());
            Ok(fp)
        }
        Err(TrainError::Diverged { epoch, step, last_good }) => {
            checkpoint::save(args.out, &last_good, Some(epoch.saturating_sub(1)))?;
            bail!("training diverged at epoch {epoch} step {step}; last good parameters kept in {}", args.out.display())
        }
        Err(e) => bail!("training failed: {e}"),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Encodes the catalogue with a checkpoint and writes a flat or hierarchical index.
pub fn build_index(
    checkpoint_path: &Path,
    catalog_dir: &Path,
    out: &Path,
    hierarchical: Option<HierarchicalOptions>,
) -> Result<IndexHeader> {
    let ckpt = checkpoint::load(checkpoint_path).with_context(|| format!("{}", checkpoint_path.display()))?;
    let catalog = io::load_catalog(catalog_dir)?;
    let embeddings = encode_catalog(&ckpt.params, &catalog).map_err(|e| anyhow::anyhow!("{e}"))?;
    let flat = FlatIndex::build(embeddings)?;
    let index = match hierarchical {
        Some(opts) => AnyIndex::Hierarchical(HierarchicalIndex::build(&flat, &opts)?),
        None => AnyIndex::Flat(flat),
    };
    index_file::save(out, &index, &ckpt.fingerprint)?;
    Ok(index_file::inspect(out)?)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub probe: Probe,
    pub seed: u64,
    /// Queries used for the index-recall and diversity measurements.
    pub sample_queries: usize,
    /// Latency samples per thread setting; 0 skips the benchmark.
    pub latency_queries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ks: vec![1, 10, 100], probe: Probe::default(), seed: 7, sample_queries: 500, latency_queries: 0 }
    }
}

/// Loads a checkpoint and index that belong together and measures them
/// against held-out pairs.
pub fn evaluate(
    checkpoint_path: &Path,
    index_path: &Path,
    pairs_path: &Path,
    catalog_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let ckpt = checkpoint::load(checkpoint_path).with_context(|| format!("{}", checkpoint_path.display()))?;
    let loaded = index_file::load(index_path).with_context(|| format!("{}", index_path.display()))?;
    ensure!(
        loaded.header.model_fingerprint == ckpt.fingerprint,
        "index {} was not built from checkpoint {}",
        index_path.display(),
        checkpoint_path.display()
    );
    let catalog = Arc::new(io::load_catalog(catalog_dir)?);
    let heldout = io::load_pairs(pairs_path)?;
    ensure!(!heldout.is_empty(), "{} holds no pairs", pairs_path.display());
    let params = ckpt.params;
    let index = loaded.index;

    let recall = recall_at_k(&params, &index, opts.probe, &catalog, &heldout, &opts.ks)?;

    let query_ids: Vec<&str> = heldout
        .pairs
        .iter()
        .map(|p| p.query_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .take(opts.sample_queries)
        .collect();

    let mut index_recall_at_k = BTreeMap::new();
    if let AnyIndex::Hierarchical(hier) = &index {
        let mut ids = Vec::with_capacity(hier.len());
        let mut vectors = Vec::with_capacity(hier.len() * hier.dim());
        for c in hier.clusters() {
            ids.extend_from_slice(c.ids());
            vectors.extend_from_slice(c.vectors());
        }
        let flat = FlatIndex::from_parts(hier.dim(), ids, vectors)?;
        let queries = query_ids
            .iter()
            .map(|id| Ok(params.encode(catalog.get(id).context("unknown query product")?)?.vector))
            .collect::<Result<Vec<_>>>()?;
        let probe_n = opts.probe.probe_n.min(hier.k());
        for &k in &opts.ks {
            let probe = Probe { probe_n, skip_l: 0 };
            index_recall_at_k.insert(k, index_recall(&flat, hier, &queries, k, probe)?);
        }
    }

    let snapshot = Snapshot::new(
        1,
        ckpt.fingerprint.clone(),
        loaded.header.fingerprint.clone(),
        params.clone(),
        index,
        catalog.clone(),
        opts.probe,
    )?;
    let recommend = |id: &str| -> Result<Recommendation> {
        Ok(match snapshot.mode() {
            TowerMode::Similarity => snapshot.recommend_similar(id, 10)?,
            TowerMode::Complementary => snapshot.recommend_complementary(id, 10, true)?,
        })
    };
    let responses = query_ids.iter().map(|id| recommend(id)).collect::<Result<Vec<_>>>()?;
    let cluster_of = |id: &str| snapshot.index().as_hierarchical().and_then(|h| h.cluster_of(id));
    let div = diversity(&responses, cluster_of, &catalog).ok();

    let mut latency = Vec::new();
    if opts.latency_queries > 0 && !query_ids.is_empty() {
        for threads in [1, 4] {
            let stats = bench::measure(threads, opts.latency_queries, |i| {
                let _ = recommend(query_ids[i % query_ids.len()]);
            });
            latency.extend(stats);
        }
    }

    let mut config = BTreeMap::new();
    config.insert("mode".into(), params.mode().to_string());
    config.insert("model_fingerprint".into(), ckpt.fingerprint);
    config.insert("index_fingerprint".into(), loaded.header.fingerprint);
    config.insert("index_kind".into(), loaded.header.kind.into());
    config.insert("clusters".into(), loaded.header.clusters.to_string());
    config.insert("probe_n".into(), opts.probe.probe_n.to_string());
    config.insert("skip_l".into(), opts.probe.skip_l.to_string());
    config.insert("heldout_pairs".into(), heldout.len().to_string());
    config.insert("sample_queries".into(), query_ids.len().to_string());
    Ok(EvalReport {
        recall_at_k: recall,
        index_recall_at_k,
        diversity: div,
        latency,
        config,
        seed: opts.seed,
    })
}

/// Writes a report as pretty JSON.
pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    io::write_atomic(path, |w| w.write_all(&json))?;
    Ok(())
}

/// Loads the catalogue a serving process answers from.
pub fn load_serving_catalog(dir: &Path) -> Result<Arc<Catalog>> {
    Ok(Arc::new(io::load_catalog(dir).with_context(|| format!("loading catalogue {}", dir.display()))?))
}
