//! Analytic-vs-numeric gradient comparison over the full encoder objective.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trainer::{batch_loss, Batch, LossSettings, TrainingData};
use super::TrainError;
use crate::encoder::EncoderParams;

/// Central-difference step.
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst parameter.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients with central differences (`h = 1e-5`) on up
/// to `samples` randomly chosen parameters that the batch actually touches
/// (all MLP and projection weights, and the table rows the batch reads).
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn gradcheck(
    params: &EncoderParams<f64>,
    data: &TrainingData<f64>,
    batch: &Batch,
    settings: &LossSettings<f64>,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport, TrainError> {
    let mut grads = params.zeros_like();
    batch_loss(params, data, batch, settings, Some(&mut grads))?;

    // Rows read by this batch, per table.
    let mut title = BTreeSet::new();
    let mut price = BTreeSet::new();
    let mut category = BTreeSet::new();
    let mut seller = BTreeSet::new();
    for &p in batch.queries.iter().chain(&batch.targets).chain(&batch.negatives) {
        let f = &data.feats[p as usize];
        title.extend(f.title.iter().copied());
        price.insert(f.price);
        category.extend(f.categories.iter().copied());
        category.insert(f.leaf);
        seller.insert(f.seller);
    }
    let tensors = params.tensors();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (ti, (_, [_, cols], data)) in tensors.iter().enumerate() {
        let rows: Option<&BTreeSet<u32>> = match ti {
            0 => Some(&title),
            1 => Some(&price),
            2 => Some(&category),
            3 => Some(&seller),
            _ => None,
        };
        match rows {
            Some(rows) => {
                for &r in rows {
                    candidates.extend((0..*cols).map(|c| (ti, r as usize * cols + c)));
                }
            }
            None => candidates.extend((0..data.len()).map(|e| (ti, e))),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(samples);

    let analytic = grads.tensors();
    let mut probe = params.clone();
    let mut report = GradcheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for &(ti, e) in &candidates {
        let original = tensors[ti].2[e];
        probe.tensors_mut()[ti][e] = original + STEP;
        let plus = batch_loss(&probe, data, batch, settings, None)?.total;
        probe.tensors_mut()[ti][e] = original - STEP;
        let minus = batch_loss(&probe, data, batch, settings, None)?.total;
        probe.tensors_mut()[ti][e] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[ti].2[e];
        let rel = libm::fabs(a - numeric) / (libm::fabs(a) + libm::fabs(numeric)).max(1e-8);
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((tensors[ti].0.clone(), e));
        }
        report.checked += 1;
    }
    Ok(report)
}
