//! The live serving state: one immutable snapshot behind an atomic pointer.
//!
//! Requests load the current `Arc<Snapshot>` and answer from it; a reload
//! builds and validates a complete new snapshot off to the side and swaps it
//! in. A failed reload leaves the old snapshot serving.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use twotower_core::ann::Probe;
use twotower_core::catalog::Catalog;
use twotower_core::encoder::TowerMode;
use twotower_core::serving::{Snapshot, SnapshotError};

use crate::checkpoint::{self, CheckpointError};
use crate::index_file::{self, IndexFileError};

/// What a serving process is deployed to answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DeploymentMode {
    /// Similar items from a similarity model and any index.
    Similarity,
    /// Complementary items from a complementary model.
    Complementary,
    /// Similar and inspirational items: a similarity model and a hierarchical index.
    InspireCapable,
}

#[derive(Debug, Error)]
pub enum ReloadError {
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("index {path}: {source}")]
    Index { path: PathBuf, source: IndexFileError },
    #[error("index was built from model {index} but the checkpoint is {model}")]
    ModelMismatch { model: String, index: String },
    #[error("deployment mode {mode:?} needs {needs}")]
    WrongMode { mode: DeploymentMode, needs: &'static str },
    #[error("{0}")]
    Snapshot(#[from] SnapshotError),
}

pub struct ServingState {
    current: ArcSwapOption<Snapshot>,
    catalog: Arc<Catalog>,
    mode: DeploymentMode,
    probe: Probe,
    /// Serialises reloads so versions are assigned in swap order.
    reload_lock: Mutex<()>,
}

impl ServingState {
    /// A state with nothing loaded yet; requests get "not loaded" until the
    /// first successful [`reload`](Self::reload).
    pub fn empty(catalog: Arc<Catalog>, mode: DeploymentMode, probe: Probe) -> Self {
        ServingState { current: ArcSwapOption::empty(), catalog, mode, probe, reload_lock: Mutex::new(()) }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn mode(&self) -> DeploymentMode {
        self.mode
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.current.load_full()
    }

    pub fn version(&self) -> u64 {
        self.current.load().as_ref().map_or(0, |s| s.version())
    }

    /// Loads, cross-checks and swaps in a new snapshot. Returns its version.
    pub fn reload(&self, checkpoint_path: &Path, index_path: &Path) -> Result<Arc<Snapshot>, ReloadError> {
        let _guard = self.reload_lock.lock().unwrap_or_else(|e| e.into_inner());
        let version = self.version() + 1;
        let snapshot = Arc::new(self.load(version, checkpoint_path, index_path)?);
        self.current.store(Some(snapshot.clone()));
        log::info!(
            "serving snapshot {version}: model {} index {}",
            snapshot.model_version(),
            snapshot.index_version()
        );
        Ok(snapshot)
    }

    fn load(&self, version: u64, checkpoint_path: &Path, index_path: &Path) -> Result<Snapshot, ReloadError> {
        let ckpt = checkpoint::load(checkpoint_path)
            .map_err(|source| ReloadError::Checkpoint { path: checkpoint_path.into(), source })?;
        let loaded =
            index_file::load(index_path).map_err(|source| ReloadError::Index { path: index_path.into(), source })?;
        if loaded.header.model_fingerprint != ckpt.fingerprint {
            return Err(ReloadError::ModelMismatch { model: ckpt.fingerprint, index: loaded.header.model_fingerprint });
        }
        let wrong = |needs| Err(ReloadError::WrongMode { mode: self.mode, needs });
        match self.mode {
            DeploymentMode::Similarity if ckpt.params.mode() != TowerMode::Similarity => return wrong("a similarity model"),
            DeploymentMode::Complementary if ckpt.params.mode() != TowerMode::Complementary => {
                return wrong("a complementary model")
            }
            DeploymentMode::InspireCapable if ckpt.params.mode() != TowerMode::Similarity => {
                return wrong("a similarity model")
            }
            DeploymentMode::InspireCapable if loaded.index.as_hierarchical().is_none() => {
                return wrong("a hierarchical index")
            }
            _ => {}
        }
        Ok(Snapshot::new(
            version,
            ckpt.fingerprint,
            loaded.header.fingerprint,
            ckpt.params,
            loaded.index,
            self.catalog.clone(),
            self.probe,
        )?)
    }
}
