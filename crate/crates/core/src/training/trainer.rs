use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{reconstruction_loss, sampled_softmax_loss, CandidateIds, SoftmaxInputs};
use super::{LossReport, Optimizer, TrainConfig, TrainError};
use crate::catalog::{is_complementary, Catalog, ComplementaryMap, PairKind, PairSet};
use crate::encoder::{EncoderConfig, EncoderParams, FeatureConfig, FeatureIndices, Tower, TowerMode};
use crate::linalg;
use crate::real::Real;

/// Catalogue-level inputs shared by every step: features of every product,
/// pairs as catalogue positions, and log sampling probabilities.
#[derive(Debug, Clone)]
pub struct TrainingData<F> {
    pub feats: Vec<FeatureIndices>,
    /// `(query, target, weight)` as catalogue positions.
    pub pairs: Vec<(u32, u32, u32)>,
    /// Log of each product's weighted frequency as a pair target
    /// (negative infinity when it is never a target).
    pub item_logq: Vec<F>,
    /// `ln(1 / |catalogue|)`.
    pub uniform_logq: F,
}

impl<F: Real> TrainingData<F> {
    pub fn build(pairs: &PairSet, catalog: &Catalog, features: &FeatureConfig) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyPairs);
        }
        let feats: Vec<FeatureIndices> =
            catalog.products().iter().map(|p| crate::encoder::featurize(p, features)).collect();
        let lookup = |id: &str| {
            catalog.position(id).map(|p| p as u32).ok_or_else(|| TrainError::UnknownProduct(id.into()))
        };
        let mut out = Vec::with_capacity(pairs.len());
        let mut target_weight = vec![0.0f64; catalog.len()];
        let mut total = 0.0f64;
        for p in &pairs.pairs {
            let q = lookup(&p.query_id)?;
            let t = lookup(&p.target_id)?;
            let w = p.weight.max(1);
            target_weight[t as usize] += w as f64;
            total += w as f64;
            out.push((q, t, w));
        }
        let item_logq = target_weight
            .iter()
            .map(|&w| if w > 0.0 { F::from_f64(libm::log(w / total)) } else { F::NEG_INFINITY })
            .collect();
        Ok(TrainingData {
            feats,
            pairs: out,
            item_logq,
            uniform_logq: F::from_f64(-libm::log(catalog.len() as f64)),
        })
    }
}

/// One step's rows, as catalogue positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub queries: Vec<u32>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings<F> {
    pub temperature: F,
    pub logq_correction: bool,
    pub mask_accidental_hits: bool,
    pub reconstruction_weight: F,
}

impl<F: Real> LossSettings<F> {
    pub fn from_config(config: &TrainConfig, mode: TowerMode) -> Self {
        LossSettings {
            temperature: F::from_f64(config.temperature),
            logq_correction: config.logq_correction,
            mask_accidental_hits: config.mask_accidental_hits,
            reconstruction_weight: match mode {
                TowerMode::Similarity => F::ZERO,
                TowerMode::Complementary => F::from_f64(config.reconstruction_weight),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub main: f64,
    pub reconstruction: f64,
    pub total: f64,
}

fn gather<F: Real>(rows: &[F], d: usize, positions: impl Iterator<Item = usize>) -> Vec<F> {
    let mut out = Vec::new();
    for p in positions {
        out.extend_from_slice(&rows[p * d..(p + 1) * d]);
    }
    out
}

fn scatter_add<F: Real>(src: &[F], d: usize, positions: impl Iterator<Item = usize>, dst: &mut [F]) {
    for (i, p) in positions.enumerate() {
        linalg::axpy(F::ONE, &src[i * d..(i + 1) * d], &mut dst[p * d..(p + 1) * d]);
    }
}

/// Loss of one batch; accumulates parameter gradients into `grads` when given.
///
/// Similarity mode encodes every distinct product once with the shared
/// tower, so a product's query and target encodings are the same values.
/// Complementary mode encodes queries with the query tower conditioned on
/// the target's leaf category and adds the reconstruction term.
pub fn batch_loss<F: Real>(
    params: &EncoderParams<F>,
    data: &TrainingData<F>,
    batch: &Batch,
    settings: &LossSettings<F>,
    mut grads: Option<&mut EncoderParams<F>>,
) -> Result<StepLoss, TrainError> {
    let d = params.output_dim();
    let b = batch.queries.len();
    let mode = params.mode();

    let logq: Option<Vec<F>> = settings.logq_correction.then(|| {
        batch
            .targets
            .iter()
            .map(|&t| data.item_logq[t as usize])
            .chain(batch.negatives.iter().map(|_| data.uniform_logq))
            .collect()
    });
    let ids = CandidateIds { queries: &batch.queries, targets: &batch.targets, negatives: &batch.negatives };

    // Product-tower rows: all distinct products on the candidate side (and the
    // query side in similarity mode).
    let mut unique: Vec<u32> = batch.targets.iter().chain(&batch.negatives).copied().collect();
    if mode == TowerMode::Similarity {
        unique.extend_from_slice(&batch.queries);
    }
    unique.sort_unstable();
    unique.dedup();
    let pos = |id: &u32| unique.binary_search(id).expect("collected above");
    let unique_feats: Vec<&FeatureIndices> = unique.iter().map(|&u| &data.feats[u as usize]).collect();
    let x = params.assemble(&unique_feats, None)?;
    let product_pass = params.forward(Tower::Product, x, unique.len())?;

    let target_rows: Vec<u32> = batch.targets.iter().map(|&t| data.feats[t as usize].leaf).collect();
    let query_feats: Vec<&FeatureIndices> = batch.queries.iter().map(|&q| &data.feats[q as usize]).collect();
    let query_pass = match mode {
        TowerMode::Similarity => None,
        TowerMode::Complementary => {
            let x = params.assemble(&query_feats, Some(&target_rows))?;
            Some(params.forward(Tower::ComplementaryQuery, x, b)?)
        }
    };
    let queries = match &query_pass {
        Some(p) => p.out.clone(),
        None => gather(&product_pass.out, d, batch.queries.iter().map(pos)),
    };
    let targets = gather(&product_pass.out, d, batch.targets.iter().map(pos));
    let negatives = gather(&product_pass.out, d, batch.negatives.iter().map(pos));
    let softmax = sampled_softmax_loss(&SoftmaxInputs {
        dim: d,
        queries: &queries,
        targets: &targets,
        negatives: &negatives,
        temperature: settings.temperature,
        logq: logq.as_deref(),
        mask: settings.mask_accidental_hits.then_some(ids),
    })?;

    let mut reconstruction = F::ZERO;
    let mut recon_grads = Vec::new();
    if params.complementary.is_some() {
        let inv_b = F::ONE / F::from_f64(b as f64);
        for (i, qf) in query_feats.iter().enumerate() {
            let proj = params.project_complementary(qf)?;
            let (l, dp, dr) = reconstruction_loss(&proj, params.category.row(target_rows[i] as usize))?;
            reconstruction += l * inv_b;
            if grads.is_some() {
                recon_grads.push((qf.leaf, target_rows[i], dp, dr));
            }
        }
    }

    if let Some(g) = grads.as_deref_mut() {
        let mut d_unique = vec![F::ZERO; unique.len() * d];
        scatter_add(&softmax.d_targets, d, batch.targets.iter().map(pos), &mut d_unique);
        scatter_add(&softmax.d_negatives, d, batch.negatives.iter().map(pos), &mut d_unique);
        if let Some(qp) = &query_pass {
            let dx = params.backward(Tower::ComplementaryQuery, qp, &softmax.d_queries, g);
            params.scatter(&query_feats, Some(&target_rows), &dx, g);
        } else {
            scatter_add(&softmax.d_queries, d, batch.queries.iter().map(pos), &mut d_unique);
        }
        let dx = params.backward(Tower::Product, &product_pass, &d_unique, g);
        params.scatter(&unique_feats, None, &dx, g);

        if let (Some(head), Some(gh)) = (&params.complementary, g.complementary.as_mut()) {
            let scale = settings.reconstruction_weight / F::from_f64(b as f64);
            let proj = &head.projection;
            let cd = proj.input_dim();
            let mut d_input = vec![F::ZERO; cd];
            for (leaf, target, dp, dr) in &recon_grads {
                let dp: Vec<F> = dp.iter().map(|&v| v * scale).collect();
                linalg::axpy(F::ONE, &dp, &mut gh.projection.bias);
                linalg::accumulate_outer(params.category.row(*leaf as usize), 1, &dp, &mut gh.projection.weight);
                linalg::matmul_transposed(&dp, 1, &proj.weight, &mut d_input);
                linalg::axpy(F::ONE, &d_input, g.category.row_mut(*leaf as usize));
                linalg::axpy(scale, dr, g.category.row_mut(*target as usize));
            }
        }
    }

    let main = softmax.loss.to_f64();
    let reconstruction = reconstruction.to_f64();
    let total = main + settings.reconstruction_weight.to_f64() * reconstruction;
    Ok(StepLoss { main, reconstruction, total })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    pub reports: Vec<LossReport>,
}

fn sample_weighted<R: Rng>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().unwrap();
    let x = rng.gen::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

fn fill_zero<F: Real>(params: &mut EncoderParams<F>) {
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = F::ZERO);
    }
}

fn run(
    mode: TowerMode,
    data: TrainingData<f32>,
    catalog_len: usize,
    encoder: EncoderConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport, &EncoderParams<f32>),
) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::<f32>::init(encoder, mode, &mut rng);
    let settings = LossSettings::<f32>::from_config(config, mode);
    let mut optimizer = Optimizer::<f32>::new(config.optimizer, config.learning_rate, config.momentum);
    let mut grads = params.zeros_like();

    let mut cumulative = Vec::with_capacity(data.pairs.len());
    let mut acc = 0.0;
    for &(_, _, w) in &data.pairs {
        acc += w as f64;
        cumulative.push(acc);
    }
    let steps = data.pairs.len().div_ceil(config.batch_size);
    let mut last_good = params.clone();
    let mut reports = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let (mut main, mut recon, mut gnorm) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let mut batch = Batch {
                queries: Vec::with_capacity(config.batch_size),
                targets: Vec::with_capacity(config.batch_size),
                negatives: Vec::with_capacity(config.uniform_negatives_per_batch),
            };
            for _ in 0..config.batch_size {
                let (q, t, _) = data.pairs[sample_weighted(&cumulative, &mut rng)];
                batch.queries.push(q);
                batch.targets.push(t);
            }
            for _ in 0..config.uniform_negatives_per_batch {
                batch.negatives.push(rng.gen_range(0..catalog_len) as u32);
            }
            fill_zero(&mut grads);
            let diverged = |last_good: &EncoderParams<f32>| TrainError::Diverged {
                epoch,
                step,
                last_good: Box::new(last_good.clone()),
            };
            let loss = match batch_loss(&params, &data, &batch, &settings, Some(&mut grads)) {
                Ok(l) => l,
                Err(TrainError::Loss(_)) | Err(TrainError::Encode(_)) => return Err(diverged(&last_good)),
                Err(e) => return Err(e),
            };
            let norm: f64 = grads
                .tensors()
                .iter()
                .flat_map(|(_, _, t)| t.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>();
            optimizer.step(&mut params, &grads);
            if !loss.total.is_finite() || !params.all_finite() {
                return Err(diverged(&last_good));
            }
            main += loss.main;
            recon += loss.reconstruction;
            gnorm += libm::sqrt(norm);
        }
        let n = steps as f64;
        let report = LossReport {
            epoch,
            main_loss: main / n,
            reconstruction_loss: recon / n,
            total_loss: main / n + settings.reconstruction_weight as f64 * (recon / n),
            gradient_norm: gnorm / n,
            steps,
        };
        log::info!(
            "epoch {epoch}: main {:.4} reconstruction {:.4} grad {:.4}",
            report.main_loss,
            report.reconstruction_loss,
            report.gradient_norm
        );
        on_epoch(&report, &params);
        reports.push(report);
        last_good = params.clone();
    }
    Ok(TrainOutcome { params, reports })
}

/// Trains the weight-tied similarity encoder on co-view pairs.
pub fn train_similarity(
    pairs: &PairSet,
    catalog: &Catalog,
    encoder: EncoderConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport, &EncoderParams<f32>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    encoder.validate().map_err(|_| TrainError::InvalidConfig("invalid encoder config"))?;
    if pairs.kind != PairKind::Coview {
        return Err(TrainError::WrongPairKind);
    }
    let data = TrainingData::build(pairs, catalog, &encoder.features)?;
    run(TowerMode::Similarity, data, catalog.len(), encoder, config, on_epoch)
}

/// Trains the complementary model: conditioned query tower, shared tables,
/// unchanged product tower on the target side, plus reconstruction.
pub fn train_complementary(
    pairs: &PairSet,
    catalog: &Catalog,
    map: &ComplementaryMap,
    encoder: EncoderConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport, &EncoderParams<f32>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    encoder.validate().map_err(|_| TrainError::InvalidConfig("invalid encoder config"))?;
    if pairs.kind != PairKind::Copurchase {
        return Err(TrainError::WrongPairKind);
    }
    for p in &pairs.pairs {
        let ql = catalog.leaf_of(&p.query_id).ok_or_else(|| TrainError::UnknownProduct(p.query_id.clone()))?;
        let tl = catalog.leaf_of(&p.target_id).ok_or_else(|| TrainError::UnknownProduct(p.target_id.clone()))?;
        if !is_complementary(ql, tl, map) {
            return Err(TrainError::NotComplementary { query_id: p.query_id.clone(), target_id: p.target_id.clone() });
        }
    }
    let data = TrainingData::build(pairs, catalog, &encoder.features)?;
    run(TowerMode::Complementary, data, catalog.len(), encoder, config, on_epoch)
}
