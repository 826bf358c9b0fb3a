use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twotower_core::catalog::{
    generate_synthetic, mine_copurchase_pairs, mine_coview_pairs, PairKind, PairSet, SyntheticData, SyntheticSpec,
};
use twotower_core::encoder::{encode_catalog, EncoderConfig, EncoderDims, EncoderParams, TowerMode};
use twotower_core::linalg;
use twotower_core::training::{
    batch_loss, gradcheck, train_complementary, train_similarity, Batch, LossSettings, Optimizer, OptimizerKind,
    TrainConfig, TrainError, TrainingData,
};

fn small_data() -> SyntheticData {
    let spec = SyntheticSpec {
        products: 1_000,
        leaf_categories: 20,
        sellers: 40,
        coview_sessions: 1_500,
        purchase_sessions: 3_000,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 11).unwrap()
}

fn tiny_dims() -> EncoderDims {
    EncoderDims {
        title_hash_buckets: 512,
        title_embedding_dim: 6,
        price_buckets: 4,
        price_embedding_dim: 3,
        category_embedding_dim: 4,
        max_category_levels: None,
        seller_hash_buckets: 32,
        seller_embedding_dim: 3,
        hidden_dims: vec![10],
        output_dim: 8,
    }
}

fn small_dims() -> EncoderDims {
    EncoderDims { title_hash_buckets: 2048, hidden_dims: vec![64], output_dim: 32, ..EncoderDims::default() }
}

/// B=4 queries, M=8 uniform negatives, with a duplicated target and a
/// negative equal to one of the targets so masking has work to do.
fn gradcheck_batch(data: &TrainingData<f64>, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..4 {
        let (q, t, _) = data.pairs[rng.gen_range(0..data.pairs.len())];
        queries.push(q);
        targets.push(t);
    }
    targets[3] = targets[0];
    let mut negatives: Vec<u32> = (0..8).map(|_| rng.gen_range(0..data.feats.len() as u32)).collect();
    negatives[2] = targets[1];
    negatives[5] = queries[2];
    Batch { queries, targets, negatives }
}

/// Temperature 1 keeps every candidate's softmax weight well above the
/// finite-difference noise floor; the gradient formulas do not depend on it.
fn settings(logq: bool, mask: bool, lambda: f64) -> LossSettings<f64> {
    LossSettings { temperature: 1.0, logq_correction: logq, mask_accidental_hits: mask, reconstruction_weight: lambda }
}

#[test]
fn gradcheck_similarity_all_loss_variants() {
    let data = small_data();
    let pairs = mine_coview_pairs(&data.log, 1);
    let config = EncoderConfig::fit(&data.catalog, &tiny_dims());
    let params = EncoderParams::<f64>::init(config.clone(), TowerMode::Similarity, &mut ChaCha8Rng::seed_from_u64(3));
    let td = TrainingData::<f64>::build(&pairs, &data.catalog, &config.features).unwrap();
    let batch = gradcheck_batch(&td, 5);
    for (logq, mask) in [(false, false), (true, false), (false, true), (true, true)] {
        let r = gradcheck(&params, &td, &batch, &settings(logq, mask, 0.0), 200, 9).unwrap();
        assert_eq!(r.checked, 200);
        assert!(r.max_relative_error <= 1e-4, "logq={logq} mask={mask}: {r:?}");
    }
}

#[test]
fn gradcheck_complementary_total_loss() {
    let data = small_data();
    let cat = &data.catalog;
    let pairs = mine_copurchase_pairs(&data.log, cat, cat.complementary(), 1);
    let config = EncoderConfig::fit(cat, &tiny_dims());
    let params = EncoderParams::<f64>::init(config.clone(), TowerMode::Complementary, &mut ChaCha8Rng::seed_from_u64(4));
    let td = TrainingData::<f64>::build(&pairs, cat, &config.features).unwrap();
    let batch = gradcheck_batch(&td, 6);
    for (logq, mask) in [(true, true), (false, false)] {
        let r = gradcheck(&params, &td, &batch, &settings(logq, mask, 0.5), 200, 10).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }
}

#[test]
fn projection_receives_gradient() {
    let data = small_data();
    let cat = &data.catalog;
    let pairs = mine_copurchase_pairs(&data.log, cat, cat.complementary(), 1);
    let config = EncoderConfig::fit(cat, &tiny_dims());
    let params = EncoderParams::<f64>::init(config.clone(), TowerMode::Complementary, &mut ChaCha8Rng::seed_from_u64(4));
    let td = TrainingData::<f64>::build(&pairs, cat, &config.features).unwrap();
    let mut grads = params.zeros_like();
    batch_loss(&params, &td, &gradcheck_batch(&td, 1), &settings(true, true, 0.5), Some(&mut grads)).unwrap();
    let head = grads.complementary.as_ref().unwrap();
    assert!(head.projection.weight.data.iter().any(|&g| g != 0.0));
    assert!(head.query_tower.layers[0].weight.data.iter().any(|&g| g != 0.0));
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = small_data();
    let pairs = mine_coview_pairs(&data.log, 1);
    let config = EncoderConfig::fit(&data.catalog, &tiny_dims());
    let mut params = EncoderParams::<f32>::init(config.clone(), TowerMode::Similarity, &mut ChaCha8Rng::seed_from_u64(1));
    let before = params.clone();
    let td = TrainingData::<f32>::build(&pairs, &data.catalog, &config.features).unwrap();
    let batch = Batch { queries: vec![td.pairs[0].0, td.pairs[1].0], targets: vec![td.pairs[0].1, td.pairs[1].1], negatives: vec![3, 4] };
    let s = LossSettings { temperature: 0.05f32, logq_correction: true, mask_accidental_hits: true, reconstruction_weight: 0.0 };
    for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum] {
        let mut opt = Optimizer::<f32>::new(kind, 0.0, 0.9);
        for _ in 0..3 {
            let mut grads = params.zeros_like();
            batch_loss(&params, &td, &batch, &s, Some(&mut grads)).unwrap();
            opt.step(&mut params, &grads);
        }
        let a: Vec<u32> = params.tensors().iter().flat_map(|t| t.2.iter().map(|v| v.to_bits())).collect();
        let b: Vec<u32> = before.tensors().iter().flat_map(|t| t.2.iter().map(|v| v.to_bits())).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn loss_decomposition_is_exact() {
    let data = small_data();
    let cat = &data.catalog;
    let pairs = mine_copurchase_pairs(&data.log, cat, cat.complementary(), 1);
    let config = EncoderConfig::fit(cat, &tiny_dims());
    let params = EncoderParams::<f64>::init(config.clone(), TowerMode::Complementary, &mut ChaCha8Rng::seed_from_u64(2));
    let td = TrainingData::<f64>::build(&pairs, cat, &config.features).unwrap();
    let batch = gradcheck_batch(&td, 2);
    let l = batch_loss(&params, &td, &batch, &settings(true, true, 0.5), None).unwrap();
    assert_eq!(l.total, l.main + 0.5 * l.reconstruction);
    let zero = batch_loss(&params, &td, &batch, &settings(true, true, 0.0), None).unwrap();
    assert_eq!(zero.total, zero.main);
    assert_eq!(zero.main, l.main);
}

#[test]
fn wrong_pair_kind_and_bad_pairs_are_rejected() {
    let data = small_data();
    let cat = &data.catalog;
    let coview = mine_coview_pairs(&data.log, 1);
    let config = EncoderConfig::fit(cat, &tiny_dims());
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(matches!(
        train_complementary(&coview, cat, cat.complementary(), config.clone(), &cfg, &mut |_, _| {}),
        Err(TrainError::WrongPairKind)
    ));
    let mut bad = coview.clone();
    bad.kind = PairKind::Copurchase;
    assert!(matches!(
        train_complementary(&bad, cat, cat.complementary(), config.clone(), &cfg, &mut |_, _| {}),
        Err(TrainError::NotComplementary { .. })
    ));
    let empty = PairSet { kind: PairKind::Coview, min_cooccurrence: 1, pairs: vec![] };
    assert!(matches!(train_similarity(&empty, cat, config, &cfg, &mut |_, _| {}), Err(TrainError::EmptyPairs)));
}

#[test]
fn divergence_returns_last_good_params() {
    let data = small_data();
    let pairs = mine_coview_pairs(&data.log, 1);
    let config = EncoderConfig::fit(&data.catalog, &tiny_dims());
    let cfg = TrainConfig { learning_rate: 1e30, epochs: 3, batch_size: 64, uniform_negatives_per_batch: 64, ..TrainConfig::default() };
    match train_similarity(&pairs, &data.catalog, config, &cfg, &mut |_, _| {}) {
        Err(TrainError::Diverged { last_good, .. }) => assert!(last_good.all_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.reports)),
    }
}

fn mean_cosines(params: &EncoderParams<f32>, data: &SyntheticData) -> (f64, f64) {
    let embs = encode_catalog(params, &data.catalog).unwrap();
    let group: Vec<u32> = data.ground_truth.iter().map(|g| g.group).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
    for _ in 0..20_000 {
        let a = rng.gen_range(0..embs.len());
        let b = rng.gen_range(0..embs.len());
        if a == b {
            continue;
        }
        let c = linalg::dot(&embs[a].vector, &embs[b].vector) as f64;
        if group[a] == group[b] {
            within += c;
            nw += 1;
        } else {
            across += c;
            na += 1;
        }
    }
    (within / nw as f64, across / na as f64)
}

#[test]
fn similarity_training_recovers_groups_and_is_deterministic() {
    let data = small_data();
    let pairs = mine_coview_pairs(&data.log, 1);
    let config = EncoderConfig::fit(&data.catalog, &small_dims());
    let cfg = TrainConfig { epochs: 15, batch_size: 128, uniform_negatives_per_batch: 256, ..TrainConfig::default() };
    let run = || train_similarity(&pairs, &data.catalog, config.clone(), &cfg, &mut |_, _| {}).unwrap();
    let a = run();
    let losses: Vec<f64> = a.reports.iter().map(|r| r.main_loss).collect();
    // Four-epoch moving average decreases after the first epoch.
    let avg: Vec<f64> = losses[1..].windows(4).map(|w| w.iter().sum::<f64>() / 4.0).collect();
    assert!(avg.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(a.reports.iter().all(|r| r.reconstruction_loss == 0.0));
    let (within, across) = mean_cosines(&a.params, &data);
    eprintln!("within {within:.3} across {across:.3}");
    assert!(within - across >= 0.2, "within {within} across {across}");
    let b = run();
    assert_eq!(a.params, b.params);
    assert_eq!(a.reports, b.reports);
}

#[test]
fn complementary_projection_points_at_mapped_categories() {
    let data = small_data();
    let cat = &data.catalog;
    let pairs = mine_copurchase_pairs(&data.log, cat, cat.complementary(), 1);
    let config = EncoderConfig::fit(cat, &small_dims());
    let cfg = TrainConfig { epochs: 8, batch_size: 128, uniform_negatives_per_batch: 256, ..TrainConfig::default() };
    let out = train_complementary(&pairs, cat, cat.complementary(), config, &cfg, &mut |_, _| {}).unwrap();
    let p = &out.params;
    let vocab = &p.config.features.category_vocab;
    let mut hits = 0;
    let mut total = 0;
    let mut per_leaf: BTreeMap<&str, bool> = BTreeMap::new();
    for product in cat.products() {
        let Some(targets) = cat.complementary().targets(product.leaf_category()) else { continue };
        let proj = p.project_complementary(&p.featurize(product)).unwrap();
        let nearest = (1..p.category.rows)
            .min_by(|&a, &b| {
                let da: f32 = p.category.row(a).iter().zip(&proj).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f32 = p.category.row(b).iter().zip(&proj).map(|(x, y)| (x - y) * (x - y)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        let ok = targets.iter().any(|t| vocab[nearest - 1] == *t);
        per_leaf.insert(product.leaf_category(), ok);
        hits += ok as usize;
        total += 1;
    }
    assert!(hits as f64 >= 0.7 * total as f64, "{hits}/{total} ({per_leaf:?})");
}

