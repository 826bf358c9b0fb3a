//! Training-pair mining from session co-occurrence.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Catalog, ComplementaryMap, EventKind, InteractionLog, Pair, PairKind, PairSet};
use crate::hash::Fnv1a;

/// Fraction of pairs held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Co-viewed pairs: `(p, q)` is kept when both were viewed in at least
/// `min_cooccurrence` distinct sessions. Each unordered pair is emitted in
/// both directions with the same weight.
pub fn mine_coview_pairs(log: &InteractionLog, min_cooccurrence: u32) -> PairSet {
    let mut counts: BTreeMap<(&str, &str), u32> = BTreeMap::new();
    for products in log.sessions(EventKind::View).values() {
        let items: Vec<&str> = products.iter().copied().collect();
        for (i, &a) in items.iter().enumerate() {
            for &b in &items[i + 1..] {
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    let mut pairs = Vec::new();
    for ((a, b), w) in counts {
        if w >= min_cooccurrence.max(1) {
            pairs.push(Pair { query_id: a.into(), target_id: b.into(), weight: w });
            pairs.push(Pair { query_id: b.into(), target_id: a.into(), weight: w });
        }
    }
    pairs.sort();
    PairSet { kind: PairKind::Coview, min_cooccurrence, pairs }
}

/// The complementarity heuristic: the target's leaf is mapped from the
/// query's leaf, and the two leaves differ.
pub fn is_complementary(query_leaf: &str, target_leaf: &str, map: &ComplementaryMap) -> bool {
    query_leaf != target_leaf
        && map.targets(query_leaf).is_some_and(|ts| ts.iter().any(|t| t == target_leaf))
}

/// Directed co-purchase pairs `(p -> q)` purchased together in at least
/// `min_cooccurrence` sessions and satisfying [`is_complementary`].
/// Products missing from the catalogue are ignored.
pub fn mine_copurchase_pairs(
    log: &InteractionLog,
    catalog: &Catalog,
    map: &ComplementaryMap,
    min_cooccurrence: u32,
) -> PairSet {
    let mut counts: BTreeMap<(&str, &str), u32> = BTreeMap::new();
    for products in log.sessions(EventKind::Purchase).values() {
        let items: Vec<(&str, &str)> = products
            .iter()
            .filter_map(|&p| catalog.leaf_of(p).map(|leaf| (p, leaf)))
            .collect();
        for &(p, pl) in &items {
            for &(q, ql) in &items {
                if p != q && is_complementary(pl, ql, map) {
                    *counts.entry((p, q)).or_insert(0) += 1;
                }
            }
        }
    }
    let pairs = counts
        .into_iter()
        .filter(|&(_, w)| w >= min_cooccurrence.max(1))
        .map(|((p, q), w)| Pair { query_id: p.into(), target_id: q.into(), weight: w })
        .collect();
    PairSet { kind: PairKind::Copurchase, min_cooccurrence, pairs }
}

fn holdout_key(kind: PairKind, pair: &Pair) -> u64 {
    // Co-view pairs are symmetric: both directions must land on the same side.
    let (a, b): (&String, &String) = match kind {
        PairKind::Coview if pair.target_id < pair.query_id => (&pair.target_id, &pair.query_id),
        _ => (&pair.query_id, &pair.target_id),
    };
    Fnv1a::new().write(a.as_bytes()).write(&[0xff]).write(b.as_bytes()).finish()
}

/// Deterministic train / held-out split by hashing the pair.
pub fn split_heldout(set: &PairSet, fraction: f64) -> (PairSet, PairSet) {
    let cut = (fraction.clamp(0.0, 1.0) * 10_000.0) as u64;
    let (held, train): (Vec<Pair>, Vec<Pair>) =
        set.pairs.iter().cloned().partition(|p| holdout_key(set.kind, p) % 10_000 < cut);
    let make = |pairs| PairSet { kind: set.kind, min_cooccurrence: set.min_cooccurrence, pairs };
    (make(train), make(held))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::{ComplementaryMap, EventKind::*, InteractionLog};
    use super::*;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    fn views(sessions: &[&[&str]]) -> InteractionLog {
        let mut events = Vec::new();
        for (i, s) in sessions.iter().enumerate() {
            for (j, p) in s.iter().enumerate() {
                events.push(event(&format!("u{i}"), p, (i * 10 + j) as u64, View, &format!("s{i}")));
            }
        }
        InteractionLog::new(events).unwrap()
    }

    #[test]
    fn coview_counts_distinct_sessions() {
        let log = views(&[&["A", "B"], &["B", "A"], &["A", "B", "A"]]);
        let set = mine_coview_pairs(&log, 2);
        assert_eq!(
            set.pairs,
            vec![
                Pair { query_id: s("A"), target_id: s("B"), weight: 3 },
                Pair { query_id: s("B"), target_id: s("A"), weight: 3 },
            ]
        );
    }

    #[test]
    fn coview_below_threshold_or_singletons_yield_nothing() {
        assert!(mine_coview_pairs(&views(&[&["A", "B"]]), 2).is_empty());
        assert!(mine_coview_pairs(&views(&[&["A"], &["A"]]), 1).is_empty());
    }

    fn purchases(sessions: &[&[&str]]) -> InteractionLog {
        let mut events = Vec::new();
        for (i, s) in sessions.iter().enumerate() {
            for p in s.iter() {
                events.push(event("u", p, i as u64, Purchase, &format!("s{i}")));
            }
        }
        InteractionLog::new(events).unwrap()
    }

    #[test]
    fn copurchase_respects_heuristic_and_direction() {
        let cat = catalog();
        let log = purchases(&[&["r1", "b1"], &["b1", "r1"], &["r1", "r2"], &["r1", "r2"], &["p1", "b1"]]);
        let set = mine_copurchase_pairs(&log, &cat, cat.complementary(), 2);
        // rackets -> balls only; never balls -> rackets, never same-leaf rackets.
        assert_eq!(set.pairs, vec![Pair { query_id: s("r1"), target_id: s("b1"), weight: 2 }]);
        assert_eq!(set.kind, PairKind::Copurchase);
    }

    #[test]
    fn copurchase_target_outside_map_is_excluded() {
        let cat = catalog();
        let map = ComplementaryMap::new(vec![(s("rackets"), vec![s("pans")])], cat.taxonomy()).unwrap();
        let log = purchases(&[&["r1", "b1"], &["r1", "b1"]]);
        assert!(mine_copurchase_pairs(&log, &cat, &map, 1).is_empty());
    }

    #[test]
    fn split_keeps_coview_directions_together() {
        let ids: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let sessions: Vec<Vec<&str>> =
            ids.chunks(4).map(|c| c.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = sessions.iter().map(Vec::as_slice).collect();
        let set = mine_coview_pairs(&views(&refs), 1);
        let (train, held) = split_heldout(&set, 0.3);
        assert_eq!(train.len() + held.len(), set.len());
        assert!(!held.is_empty());
        for p in &held.pairs {
            assert!(held.pairs.iter().any(|q| q.query_id == p.target_id && q.target_id == p.query_id));
            assert!(!train.pairs.iter().any(|q| q.query_id == p.target_id && q.target_id == p.query_id));
        }
    }

    fn arb_sessions() -> impl Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..8, 1..6), 1..12)
    }

    fn log_from(sessions: &[Vec<u8>], kind: EventKind) -> InteractionLog {
        let products = ["r1", "r2", "b1", "b2", "p1", "r1", "b1", "p1"];
        let mut events = Vec::new();
        for (i, s) in sessions.iter().enumerate() {
            for (j, &p) in s.iter().enumerate() {
                events.push(event("u", products[p as usize], j as u64, kind, &format!("s{i}")));
            }
        }
        InteractionLog::new(events).unwrap()
    }

    proptest! {
        #[test]
        fn mining_ignores_event_order_within_sessions(sessions in arb_sessions(), seed in 0u64..1000) {
            let mut shuffled = sessions.clone();
            for (i, s) in shuffled.iter_mut().enumerate() {
                let r = (seed as usize + i) % s.len().max(1);
                s.rotate_left(r);
                s.reverse();
            }
            let cat = catalog();
            for kind in [View, Purchase] {
                let a = log_from(&sessions, kind);
                let b = log_from(&shuffled, kind);
                prop_assert_eq!(mine_coview_pairs(&a, 1), mine_coview_pairs(&b, 1));
                prop_assert_eq!(
                    mine_copurchase_pairs(&a, &cat, cat.complementary(), 1),
                    mine_copurchase_pairs(&b, &cat, cat.complementary(), 1)
                );
            }
        }

        #[test]
        fn higher_threshold_yields_subset(sessions in arb_sessions(), t1 in 1u32..4, dt in 1u32..3) {
            let log = log_from(&sessions, View);
            let low = mine_coview_pairs(&log, t1);
            let high = mine_coview_pairs(&log, t1 + dt);
            for p in &high.pairs {
                prop_assert!(low.pairs.contains(p));
                prop_assert!(p.weight >= t1 + dt);
                prop_assert!(p.query_id != p.target_id);
            }
        }

        #[test]
        fn copurchase_pairs_satisfy_heuristic(sessions in arb_sessions(), t in 1u32..3) {
            let cat = catalog();
            let log = log_from(&sessions, Purchase);
            for p in &mine_copurchase_pairs(&log, &cat, cat.complementary(), t).pairs {
                let ql = cat.leaf_of(&p.query_id).unwrap();
                let tl = cat.leaf_of(&p.target_id).unwrap();
                prop_assert!(ql != tl);
                prop_assert!(cat.complementary().targets(ql).unwrap().iter().any(|c| c == tl));
            }
        }
    }
}
