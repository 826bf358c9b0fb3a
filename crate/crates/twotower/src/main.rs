use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use twotower::pipeline::{self, EvalOptions, TrainArgs};
use twotower::{index_file, DeploymentMode, ServingState};
use twotower_core::ann::{CentroidScoring, HierarchicalOptions, KMeansOptions, Probe};
use twotower_core::catalog::{PairKind, SyntheticSpec};
use twotower_core::encoder::TowerMode;

#[derive(Parser)]
#[command(name = "twotower", version, about = "Content-based two-tower retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Coview,
    Copurchase,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Similarity,
    Complementary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scoring {
    Raw,
    Normalized,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic catalogue, interaction log and ground truth.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// TOML file with generator settings; defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Mine co-view or co-purchase pairs from an interaction log.
    Mine {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 1)]
        min_cooccurrence: u32,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 10% hashed held-out split here, excluded from --out.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train an encoder and write a checkpoint after every epoch.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics as JSON lines; defaults to <out>.log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode the catalogue and write a flat or hierarchical index.
    BuildIndex {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hierarchical: bool,
        /// Cluster count; defaults to ceil(sqrt(N)).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "raw")]
        scoring: Scoring,
    },
    /// Print an index file's header.
    InspectIndex { index: PathBuf },
    /// Measure a checkpoint and index against held-out pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        probe_n: usize,
        #[arg(long, default_value_t = 0)]
        skip_l: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Latency samples per thread setting; 0 skips the benchmark.
        #[arg(long, default_value_t = 0)]
        latency_queries: usize,
    },
    /// Serve recommendations over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, value_enum, default_value = "similarity")]
        mode: DeploymentMode,
        #[arg(long, default_value_t = 16)]
        probe_n: usize,
    },
    /// Time recommendations in-process over a checkpoint and index.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        queries: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        probe_n: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { out, seed, spec } => {
            let spec: SyntheticSpec = match spec {
                Some(path) => toml::from_str(&std::fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => SyntheticSpec::default(),
            };
            pipeline::generate(&spec, seed, &out)
        }
        Command::Mine { kind, min_cooccurrence, log, catalog, out, heldout } => {
            let kind = match kind {
                Kind::Coview => PairKind::Coview,
                Kind::Copurchase => PairKind::Copurchase,
            };
            let s = pipeline::mine(kind, min_cooccurrence, &log, &catalog, &out, heldout.as_deref())?;
            println!("{}", serde_json::json!({"mined": s.mined, "train": s.train, "heldout": s.heldout}));
            Ok(())
        }
        Command::Train { mode, pairs, catalog, map, config, out, log } => {
            let mode = match mode {
                Mode::Similarity => TowerMode::Similarity,
                Mode::Complementary => TowerMode::Complementary,
            };
            let fp = pipeline::train(&TrainArgs {
                mode,
                pairs: &pairs,
                catalog: &catalog,
                map: map.as_deref(),
                config: config.as_deref(),
                out: &out,
                log: log.as_deref(),
            })?;
            println!("{fp}");
            Ok(())
        }
        Command::BuildIndex { ckpt, catalog, out, hierarchical, k, seed, scoring } => {
            let opts = hierarchical.then(|| HierarchicalOptions {
                k,
                kmeans: KMeansOptions { seed, ..Default::default() },
                scoring: match scoring {
                    Scoring::Raw => CentroidScoring::Raw,
                    Scoring::Normalized => CentroidScoring::Normalized,
                },
            });
            let header = pipeline::build_index(&ckpt, &catalog, &out, opts)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
            Ok(())
        }
        Command::InspectIndex { index } => {
            let header = index_file::inspect(&index).with_context(|| format!("{}", index.display()))?;
            println!("{}", serde_json::to_string_pretty(&header)?);
            Ok(())
        }
        Command::Eval { ckpt, index, pairs, catalog, report, ks, probe_n, skip_l, seed, latency_queries } => {
            let opts = EvalOptions { ks, probe: Probe { probe_n, skip_l }, seed, latency_queries, ..Default::default() };
            let r = pipeline::evaluate(&ckpt, &index, &pairs, &catalog, &opts)?;
            pipeline::save_report(&report, &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Serve { port, host, ckpt, index, catalog, mode, probe_n } => {
            let catalog = pipeline::load_serving_catalog(&catalog)?;
            let state = Arc::new(ServingState::empty(catalog, mode, Probe { probe_n, skip_l: 0 }));
            state.reload(&ckpt, &index)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(twotower::http::serve(SocketAddr::new(host, port), state))?;
            Ok(())
        }
        Command::Bench { ckpt, index, catalog, queries, threads, k, probe_n } => {
            let catalog = pipeline::load_serving_catalog(&catalog)?;
            let state = ServingState::empty(catalog.clone(), DeploymentMode::Similarity, Probe { probe_n, skip_l: 0 });
            let snap = state.reload(&ckpt, &index)?;
            let products = catalog.products();
            for t in threads {
                let stats = twotower::bench::measure(t, queries, |i| {
                    let _ = snap.recommend_similar(&products[i % products.len()].product_id, k);
                })
                .context("no queries")?;
                println!("{}", serde_json::to_string(&stats)?);
            }
            Ok(())
        }
    }
}
