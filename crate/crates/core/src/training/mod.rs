//! Encoder training: sampled softmax with mixed negatives, the complementary
//! objective with its reconstruction term, and a finite-difference checker.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeError, EncoderParams};

pub use gradcheck::{gradcheck, GradcheckReport};
pub use loss::{reconstruction_loss, sampled_softmax_loss, CandidateIds, LossError, SoftmaxInputs, SoftmaxOutput};
pub use optim::Optimizer;
pub use trainer::{batch_loss, train_complementary, train_similarity, Batch, LossSettings, StepLoss, TrainOutcome, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Catalogue items sampled uniformly per step, on top of in-batch negatives.
    pub uniform_negatives_per_batch: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Weight of the reconstruction term; ignored in similarity mode.
    pub reconstruction_weight: f64,
    pub seed: u64,
    pub logq_correction: bool,
    pub mask_accidental_hits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            uniform_negatives_per_batch: 512,
            temperature: 0.05,
            learning_rate: 0.05,
            epochs: 10,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            reconstruction_weight: 0.5,
            seed: 7,
            logq_correction: true,
            mask_accidental_hits: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &'static str| Err(TrainError::InvalidConfig(msg));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(self.reconstruction_weight >= 0.0) {
            return bad("reconstruction_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }
}

/// Per-epoch averages over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub main_loss: f64,
    pub reconstruction_loss: f64,
    /// `main_loss + reconstruction_weight * reconstruction_loss`.
    pub total_loss: f64,
    pub gradient_norm: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub enum TrainError {
    InvalidConfig(&'static str),
    EmptyPairs,
    UnknownProduct(String),
    /// A complementary pair whose target leaf is not mapped from the query leaf.
    NotComplementary { query_id: String, target_id: String },
    WrongPairKind,
    Encode(EncodeError),
    Loss(LossError),
    /// Loss or parameters became non-finite; carries the last good parameters.
    Diverged { epoch: usize, step: usize, last_good: Box<EncoderParams<f32>> },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::EmptyPairs => f.write_str("no training pairs"),
            TrainError::UnknownProduct(id) => write!(f, "pair refers to unknown product {id:?}"),
            TrainError::NotComplementary { query_id, target_id } => {
                write!(f, "pair ({query_id}, {target_id}) violates the complementary map")
            }
            TrainError::WrongPairKind => f.write_str("pair kind does not match the training mode"),
            TrainError::Encode(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Diverged { epoch, step, .. } => {
                write!(f, "training diverged at epoch {epoch}, step {step}")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<EncodeError> for TrainError {
    fn from(e: EncodeError) -> Self {
        TrainError::Encode(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}
