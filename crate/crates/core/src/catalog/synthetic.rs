//! Seeded synthetic catalogue with planted structure.
//!
//! Every product belongs to a latent group and, inside it, to a small family
//! of near-substitutes. Titles carry group, family and leaf tokens plus noise;
//! co-view sessions concentrate on one family; co-purchase sessions follow
//! the complementary map. The planted labels are returned as ground truth.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Catalog, CategoryTaxonomy, ComplementaryMap, EventKind, Interaction, InteractionLog, Product,
};
use crate::linalg::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub products: usize,
    pub leaf_categories: usize,
    pub taxonomy_depth: usize,
    pub sellers: usize,
    pub groups: usize,
    /// Products per family (the finest planted cluster).
    pub family_size: usize,
    pub coview_sessions: usize,
    pub views_per_session: usize,
    /// Probability that a co-view session stays inside one latent group;
    /// other sessions view uniformly random products.
    pub within_group_prob: f64,
    /// Given a within-group view, probability it comes from the session's family.
    pub within_family_prob: f64,
    pub purchase_sessions: usize,
    /// Fraction of leaf categories that get a complementary map entry.
    pub complementary_coverage: f64,
    /// Targets per mapped source leaf.
    pub complementary_targets: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            products: 10_000,
            leaf_categories: 50,
            taxonomy_depth: 3,
            sellers: 200,
            groups: 10,
            family_size: 10,
            coview_sessions: 6_100,
            views_per_session: 4,
            within_group_prob: 0.9,
            within_family_prob: 0.9,
            purchase_sessions: 20_000,
            complementary_coverage: 1.0,
            complementary_targets: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvalidSpec(pub &'static str);

impl fmt::Display for InvalidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid synthetic spec: {}", self.0)
    }
}

impl core::error::Error for InvalidSpec {}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        let counts = [
            (self.products, "products must be positive"),
            (self.leaf_categories, "leaf_categories must be positive"),
            (self.taxonomy_depth, "taxonomy_depth must be positive"),
            (self.sellers, "sellers must be positive"),
            (self.groups, "groups must be positive"),
            (self.family_size, "family_size must be positive"),
            (self.coview_sessions, "coview_sessions must be positive"),
            (self.views_per_session, "views_per_session must be positive"),
        ];
        for (v, msg) in counts {
            if v == 0 {
                return Err(InvalidSpec(msg));
            }
        }
        if self.leaf_categories < self.groups {
            return Err(InvalidSpec("need at least one leaf category per group"));
        }
        if self.products < self.groups * self.family_size {
            return Err(InvalidSpec("need at least one family per group"));
        }
        if self.complementary_targets >= self.leaf_categories {
            return Err(InvalidSpec("complementary_targets must be below leaf_categories"));
        }
        for p in [self.within_group_prob, self.within_family_prob, self.complementary_coverage] {
            if !(0.0..=1.0).contains(&p) {
                return Err(InvalidSpec("probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub product_id: String,
    pub group: u32,
    pub family: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub catalog: Catalog,
    pub log: InteractionLog,
    pub ground_truth: Vec<GroundTruth>,
}

const BASE_TS: u64 = 1_700_000_000;

fn level_sizes(depth: usize, leaves: usize) -> Vec<usize> {
    (0..depth)
        .map(|i| {
            if i + 1 == depth {
                leaves
            } else {
                let s = libm::pow(leaves as f64, (i + 1) as f64 / depth as f64);
                (libm::round(s) as usize).clamp(1, leaves)
            }
        })
        .collect()
}

fn build_taxonomy(depth: usize, leaves: usize) -> (CategoryTaxonomy, Vec<Vec<String>>) {
    let sizes = level_sizes(depth, leaves);
    let mut records = Vec::new();
    let mut paths: Vec<Vec<Vec<String>>> = Vec::new();
    for (level, &size) in sizes.iter().enumerate() {
        let mut level_paths = Vec::with_capacity(size);
        for j in 0..size {
            let id = format!("c{level}_{j}");
            let mut path = if level == 0 {
                records.push((id.clone(), None));
                Vec::new()
            } else {
                let parent = j * sizes[level - 1] / size;
                let parent_path: &Vec<String> = &paths[level - 1][parent];
                records.push((id.clone(), parent_path.last().cloned()));
                parent_path.clone()
            };
            path.push(id);
            level_paths.push(path);
        }
        paths.push(level_paths);
    }
    let taxonomy = CategoryTaxonomy::new(records).expect("generated taxonomy is valid");
    (taxonomy, paths.pop().unwrap_or_default())
}

/// Generates a catalogue, interaction log and planted ground truth.
/// Deterministic for a given `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData, InvalidSpec> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (taxonomy, leaf_paths) = build_taxonomy(spec.taxonomy_depth, spec.leaf_categories);
    let n_leaves = leaf_paths.len();

    let group_of_leaf = |l: usize| l * spec.groups / n_leaves;
    let mut leaves_of_group: Vec<Vec<usize>> = vec![Vec::new(); spec.groups];
    for l in 0..n_leaves {
        leaves_of_group[group_of_leaf(l)].push(l);
    }

    // Sellers are partitioned across groups (with overlap when there are
    // fewer sellers than groups).
    let group_seller = |group: usize, rng: &mut ChaCha8Rng| {
        let per = (spec.sellers / spec.groups).max(1);
        (group * per + rng.gen_range(0..per)) % spec.sellers
    };
    let n_families = spec.products / spec.family_size;
    let noise_vocab = 300usize;
    struct Family {
        group: usize,
        leaf: usize,
        base_price: f64,
        seller: usize,
    }
    let families: Vec<Family> = (0..n_families)
        .map(|f| {
            let group = f % spec.groups;
            let leaf = *leaves_of_group[group].choose(&mut rng).unwrap();
            let band = 2.0 + 3.0 * group as f64 / spec.groups as f64;
            let base_price = libm::exp(band + 0.3 * standard_normal(&mut rng));
            let seller = group_seller(group, &mut rng);
            Family { group, leaf, base_price, seller }
        })
        .collect();

    let mut products = Vec::with_capacity(spec.products);
    let mut ground_truth = Vec::with_capacity(spec.products);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_families];
    let mut group_members: Vec<Vec<usize>> = vec![Vec::new(); spec.groups];
    let mut leaf_members: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
    for i in 0..spec.products {
        let f = i % n_families;
        let fam = &families[f];
        let leaf = if rng.gen_bool(0.9) {
            fam.leaf
        } else {
            *leaves_of_group[fam.group].choose(&mut rng).unwrap()
        };
        let mut tokens = vec![
            format!("grp{}", fam.group),
            format!("grp{}x{}", fam.group, rng.gen_range(0..4)),
            format!("fam{f}a"),
            format!("cat{leaf}"),
            format!("w{}", rng.gen_range(0..noise_vocab)),
            format!("w{}", rng.gen_range(0..noise_vocab)),
        ];
        if rng.gen_bool(0.8) {
            tokens.push(format!("fam{f}b"));
        }
        tokens.shuffle(&mut rng);
        let price = libm::round(fam.base_price * libm::exp(0.1 * standard_normal(&mut rng)) * 100.0) / 100.0;
        let seller = if rng.gen_bool(0.7) { fam.seller } else { group_seller(fam.group, &mut rng) };
        let product_id = format!("p{i:05}");
        products.push(Product {
            product_id: product_id.clone(),
            title: tokens.join(" "),
            price,
            category_path: leaf_paths[leaf].clone(),
            seller_id: format!("s{seller}"),
        });
        ground_truth.push(GroundTruth { product_id, group: fam.group as u32, family: f as u32 });
        members[f].push(i);
        group_members[fam.group].push(i);
        leaf_members[leaf].push(i);
    }

    let mut map_records = Vec::new();
    for l in 0..n_leaves {
        if !rng.gen_bool(spec.complementary_coverage) {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n_leaves).filter(|&c| c != l).collect();
        candidates.shuffle(&mut rng);
        let targets: Vec<String> = candidates
            .into_iter()
            .filter(|&c| !leaf_members[c].is_empty())
            .take(spec.complementary_targets)
            .map(|c| leaf_paths[c].last().unwrap().clone())
            .collect();
        if !targets.is_empty() {
            map_records.push((leaf_paths[l].last().unwrap().clone(), targets));
        }
    }
    let complementary = ComplementaryMap::new(map_records, &taxonomy).expect("generated map is valid");

    let mut events = Vec::new();
    for s in 0..spec.coview_sessions {
        let f = rng.gen_range(0..n_families);
        let group = families[f].group;
        let user = format!("u{}", s / 3);
        let session = format!("v{s}");
        let coherent = rng.gen_bool(spec.within_group_prob);
        let mut viewed: Vec<usize> = Vec::with_capacity(spec.views_per_session);
        for j in 0..spec.views_per_session {
            // Distinct products per session, with a bounded number of redraws.
            let mut p = 0;
            for _ in 0..16 {
                p = if coherent {
                    if rng.gen_bool(spec.within_family_prob) {
                        *members[f].choose(&mut rng).unwrap()
                    } else {
                        *group_members[group].choose(&mut rng).unwrap()
                    }
                } else {
                    rng.gen_range(0..spec.products)
                };
                if !viewed.contains(&p) {
                    break;
                }
            }
            viewed.push(p);
            events.push(Interaction {
                user_id: user.clone(),
                product_id: products[p].product_id.clone(),
                ts: BASE_TS + s as u64 * 600 + j as u64 * 30,
                kind: EventKind::View,
                session_id: session.clone(),
            });
        }
    }

    let sources: Vec<(usize, Vec<usize>)> = (0..n_leaves)
        .filter(|&l| !leaf_members[l].is_empty())
        .filter_map(|l| {
            let targets = complementary.targets(leaf_paths[l].last().unwrap())?;
            let idx = targets
                .iter()
                .filter_map(|t| leaf_paths.iter().position(|p| p.last() == Some(t)))
                .collect();
            Some((l, idx))
        })
        .collect();
    let purchase_base = BASE_TS + spec.coview_sessions as u64 * 600;
    if !sources.is_empty() {
        for s in 0..spec.purchase_sessions {
            let (src, targets) = sources.choose(&mut rng).unwrap();
            let tgt = *targets.choose(&mut rng).unwrap();
            let mut basket = vec![
                *leaf_members[*src].choose(&mut rng).unwrap(),
                *leaf_members[tgt].choose(&mut rng).unwrap(),
            ];
            if rng.gen_bool(0.3) {
                basket.push(rng.gen_range(0..spec.products));
            }
            let user = format!("b{}", s / 2);
            let session = format!("o{s}");
            for (j, p) in basket.into_iter().enumerate() {
                events.push(Interaction {
                    user_id: user.clone(),
                    product_id: products[p].product_id.clone(),
                    ts: purchase_base + s as u64 * 600 + j as u64 * 30,
                    kind: EventKind::Purchase,
                    session_id: session.clone(),
                });
            }
        }
    }

    let catalog = Catalog::new(products, taxonomy, complementary).expect("generated catalog is valid");
    let log = InteractionLog::new(events).expect("generated log is valid");
    Ok(SyntheticData { catalog, log, ground_truth })
}
