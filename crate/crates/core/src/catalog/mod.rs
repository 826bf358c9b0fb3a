//! Catalogue and interaction-log data model.
//!
//! Everything here is immutable once validated. Construction functions report
//! the position of the offending record so file loaders can translate it into
//! a line number.

mod mining;
mod synthetic;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use mining::{
    is_complementary, mine_copurchase_pairs, mine_coview_pairs, split_heldout, HOLDOUT_FRACTION,
};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    pub price: f64,
    pub category_path: Vec<String>,
    pub seller_id: String,
}

impl Product {
    /// Leaf (most specific) category. Validated products always have one.
    pub fn leaf_category(&self) -> &str {
        self.category_path.last().map(String::as_str).unwrap_or("")
    }
}

/// Which input a validation error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Products,
    Taxonomy,
    ComplementaryMap,
    Interactions,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Products => "products",
            Section::Taxonomy => "taxonomy",
            Section::ComplementaryMap => "complementary map",
            Section::Interactions => "interaction log",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateProductId(String),
    InvalidPrice { product_id: String, price: f64 },
    EmptyCategoryPath(String),
    UnknownCategory(String),
    NotARoot(String),
    NotALeaf(String),
    NotAnEdge { parent: String, child: String },
    DuplicateCategory(String),
    DanglingParent { category: String, parent: String },
    Cycle(String),
    DuplicateSource(String),
    EmptyTargets(String),
    SelfMapping(String),
    SessionUserMismatch { session_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateProductId(id) => write!(f, "duplicate product_id {id:?}"),
            Violation::InvalidPrice { product_id, price } => {
                write!(f, "product {product_id:?} has invalid price {price}")
            }
            Violation::EmptyCategoryPath(id) => write!(f, "product {id:?} has an empty category_path"),
            Violation::UnknownCategory(c) => write!(f, "unknown category {c:?}"),
            Violation::NotARoot(c) => write!(f, "category path must start at a root, {c:?} has a parent"),
            Violation::NotALeaf(c) => write!(f, "category path must end at a leaf, {c:?} has children"),
            Violation::NotAnEdge { parent, child } => {
                write!(f, "{child:?} is not a child of {parent:?} in the taxonomy")
            }
            Violation::DuplicateCategory(c) => write!(f, "duplicate category_id {c:?}"),
            Violation::DanglingParent { category, parent } => {
                write!(f, "category {category:?} refers to unknown parent {parent:?}")
            }
            Violation::Cycle(c) => write!(f, "taxonomy cycle through {c:?}"),
            Violation::DuplicateSource(c) => write!(f, "source category {c:?} mapped twice"),
            Violation::EmptyTargets(c) => write!(f, "source category {c:?} has no targets"),
            Violation::SelfMapping(c) => write!(f, "category {c:?} maps to itself"),
            Violation::SessionUserMismatch { session_id } => {
                write!(f, "session {session_id:?} contains events of more than one user")
            }
        }
    }
}

/// A violated invariant together with the position of the record (0-based,
/// counting records, not lines).
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub section: Section,
    pub index: usize,
    pub violation: Violation,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} record {}: {}", self.section, self.index, self.violation)
    }
}

impl core::error::Error for ValidationError {}

fn invalid(section: Section, index: usize, violation: Violation) -> ValidationError {
    ValidationError { section, index, violation }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryTaxonomy {
    parent: BTreeMap<String, Option<String>>,
    children: BTreeMap<String, Vec<String>>,
}

impl CategoryTaxonomy {
    /// Builds a taxonomy from `(category_id, parent_id)` records.
    pub fn new(records: Vec<(String, Option<String>)>) -> Result<Self, ValidationError> {
        let mut parent = BTreeMap::new();
        let mut positions = BTreeMap::new();
        for (i, (id, p)) in records.iter().enumerate() {
            if parent.insert(id.clone(), p.clone()).is_some() {
                return Err(invalid(Section::Taxonomy, i, Violation::DuplicateCategory(id.clone())));
            }
            positions.insert(id.clone(), i);
        }
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, (id, p)) in records.iter().enumerate() {
            if let Some(p) = p {
                if !parent.contains_key(p) {
                    return Err(invalid(
                        Section::Taxonomy,
                        i,
                        Violation::DanglingParent { category: id.clone(), parent: p.clone() },
                    ));
                }
                children.entry(p.clone()).or_default().push(id.clone());
            }
        }
        let limit = parent.len();
        for (id, _) in &records {
            let mut cur = id;
            let mut steps = 0;
            while let Some(Some(p)) = parent.get(cur) {
                cur = p;
                steps += 1;
                if steps > limit {
                    return Err(invalid(Section::Taxonomy, positions[id], Violation::Cycle(id.clone())));
                }
            }
        }
        for kids in children.values_mut() {
            kids.sort();
        }
        Ok(CategoryTaxonomy { parent, children })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.parent.contains_key(id)
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.parent.get(id).and_then(|p| p.as_deref())
    }

    pub fn is_root(&self, id: &str) -> bool {
        matches!(self.parent.get(id), Some(None))
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.contains(id) && !self.children.contains_key(id)
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All category ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.parent.keys().map(String::as_str)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &str> {
        self.ids().filter(move |id| self.is_leaf(id))
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// `(category_id, parent_id)` records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.parent.iter().map(|(k, v)| (k.as_str(), v.as_deref()))
    }

    /// Checks that `path` starts at a root, follows parent-child edges and
    /// ends at a leaf.
    pub fn check_path(&self, path: &[String]) -> Result<(), Violation> {
        let first = path.first().ok_or_else(|| Violation::EmptyCategoryPath(String::new()))?;
        for c in path {
            if !self.contains(c) {
                return Err(Violation::UnknownCategory(c.clone()));
            }
        }
        if !self.is_root(first) {
            return Err(Violation::NotARoot(first.clone()));
        }
        for w in path.windows(2) {
            if self.parent(&w[1]) != Some(w[0].as_str()) {
                return Err(Violation::NotAnEdge { parent: w[0].clone(), child: w[1].clone() });
            }
        }
        let leaf = path.last().unwrap();
        if !self.is_leaf(leaf) {
            return Err(Violation::NotALeaf(leaf.clone()));
        }
        Ok(())
    }

    /// Root-to-node path for `id`.
    pub fn path_to(&self, id: &str) -> Option<Vec<String>> {
        if !self.contains(id) {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            path.push(String::from(c));
            cur = self.parent(c);
        }
        path.reverse();
        Some(path)
    }

    /// Number of levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.leaves().map(|l| self.path_to(l).map_or(0, |p| p.len())).max().unwrap_or(0)
    }
}

/// Source leaf category to an ordered, non-empty list of complementary
/// target leaf categories. Order is display priority.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplementaryMap {
    entries: BTreeMap<String, Vec<String>>,
}

impl ComplementaryMap {
    pub fn new(
        records: Vec<(String, Vec<String>)>,
        taxonomy: &CategoryTaxonomy,
    ) -> Result<Self, ValidationError> {
        let mut entries = BTreeMap::new();
        for (i, (source, targets)) in records.into_iter().enumerate() {
            let err = |v| invalid(Section::ComplementaryMap, i, v);
            if !taxonomy.contains(&source) {
                return Err(err(Violation::UnknownCategory(source)));
            }
            if !taxonomy.is_leaf(&source) {
                return Err(err(Violation::NotALeaf(source)));
            }
            if targets.is_empty() {
                return Err(err(Violation::EmptyTargets(source)));
            }
            for t in &targets {
                if !taxonomy.contains(t) {
                    return Err(err(Violation::UnknownCategory(t.clone())));
                }
                if !taxonomy.is_leaf(t) {
                    return Err(err(Violation::NotALeaf(t.clone())));
                }
                if *t == source {
                    return Err(err(Violation::SelfMapping(source.clone())));
                }
            }
            if entries.contains_key(&source) {
                return Err(err(Violation::DuplicateSource(source)));
            }
            entries.insert(source, targets);
        }
        Ok(ComplementaryMap { entries })
    }

    pub fn targets(&self, source: &str) -> Option<&[String]> {
        self.entries.get(source).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Validated products plus the taxonomy and complementary map they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: BTreeMap<String, usize>,
    taxonomy: CategoryTaxonomy,
    complementary: ComplementaryMap,
}

impl Catalog {
    pub fn new(
        products: Vec<Product>,
        taxonomy: CategoryTaxonomy,
        complementary: ComplementaryMap,
    ) -> Result<Self, ValidationError> {
        let mut by_id = BTreeMap::new();
        for (i, p) in products.iter().enumerate() {
            let err = |v| invalid(Section::Products, i, v);
            if by_id.insert(p.product_id.clone(), i).is_some() {
                return Err(err(Violation::DuplicateProductId(p.product_id.clone())));
            }
            if !(p.price >= 0.0) || !p.price.is_finite() {
                return Err(err(Violation::InvalidPrice {
                    product_id: p.product_id.clone(),
                    price: p.price,
                }));
            }
            if p.category_path.is_empty() {
                return Err(err(Violation::EmptyCategoryPath(p.product_id.clone())));
            }
            taxonomy.check_path(&p.category_path).map_err(err)?;
        }
        Ok(Catalog { products, by_id, taxonomy, complementary })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, product_id: &str) -> Option<&Product> {
        self.by_id.get(product_id).map(|&i| &self.products[i])
    }

    pub fn position(&self, product_id: &str) -> Option<usize> {
        self.by_id.get(product_id).copied()
    }

    pub fn taxonomy(&self) -> &CategoryTaxonomy {
        &self.taxonomy
    }

    pub fn complementary(&self) -> &ComplementaryMap {
        &self.complementary
    }

    pub fn leaf_of(&self, product_id: &str) -> Option<&str> {
        self.get(product_id).map(Product::leaf_category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    View,
    Purchase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub product_id: String,
    pub ts: u64,
    pub kind: EventKind,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    events: Vec<Interaction>,
}

impl InteractionLog {
    /// Validates that each session belongs to a single user. Timestamps are
    /// unsigned so non-negativity holds by construction.
    pub fn new(events: Vec<Interaction>) -> Result<Self, ValidationError> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            let user = owner.entry(e.session_id.as_str()).or_insert(e.user_id.as_str());
            if *user != e.user_id {
                return Err(invalid(
                    Section::Interactions,
                    i,
                    Violation::SessionUserMismatch { session_id: e.session_id.clone() },
                ));
            }
        }
        Ok(InteractionLog { events })
    }

    pub fn events(&self) -> &[Interaction] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Distinct products of one kind per session, sessions in id order.
    pub(crate) fn sessions(&self, kind: EventKind) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.kind == kind) {
            out.entry(e.session_id.as_str()).or_default().insert(e.product_id.as_str());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Coview,
    Copurchase,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub query_id: String,
    pub target_id: String,
    pub weight: u32,
}

/// Mined training pairs, sorted by `(query_id, target_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub kind: PairKind,
    pub min_cooccurrence: u32,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub fn s(v: &str) -> String {
        v.to_string()
    }

    /// Two roots: sport (tennis: rackets, balls) and home (kitchen: pans).
    pub fn taxonomy() -> CategoryTaxonomy {
        CategoryTaxonomy::new(vec![
            (s("sport"), None),
            (s("tennis"), Some(s("sport"))),
            (s("rackets"), Some(s("tennis"))),
            (s("balls"), Some(s("tennis"))),
            (s("home"), None),
            (s("kitchen"), Some(s("home"))),
            (s("pans"), Some(s("kitchen"))),
        ])
        .unwrap()
    }

    pub fn product(id: &str, title: &str, price: f64, path: &[&str], seller: &str) -> Product {
        Product {
            product_id: s(id),
            title: s(title),
            price,
            category_path: path.iter().map(|c| s(c)).collect(),
            seller_id: s(seller),
        }
    }

    pub fn catalog() -> Catalog {
        let tax = taxonomy();
        let map = ComplementaryMap::new(vec![(s("rackets"), vec![s("balls")])], &tax).unwrap();
        Catalog::new(
            vec![
                product("r1", "Pro racket 100", 120.0, &["sport", "tennis", "rackets"], "s1"),
                product("r2", "Junior racket", 40.0, &["sport", "tennis", "rackets"], "s2"),
                product("b1", "Tennis balls x3", 9.5, &["sport", "tennis", "balls"], "s1"),
                product("b2", "Practice balls", 5.0, &["sport", "tennis", "balls"], "s3"),
                product("p1", "Frying pan 28cm", 30.0, &["home", "kitchen", "pans"], "s4"),
            ],
            tax,
            map,
        )
        .unwrap()
    }

    pub fn event(user: &str, product: &str, ts: u64, kind: EventKind, session: &str) -> Interaction {
        Interaction {
            user_id: s(user),
            product_id: s(product),
            ts,
            kind,
            session_id: s(session),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use alloc::vec;

    #[test]
    fn well_formed_catalog_ingests_all_products() {
        let tax = taxonomy();
        let cat = Catalog::new(
            vec![
                product("a", "x", 1.0, &["sport", "tennis", "rackets"], "s"),
                product("b", "y", 2.0, &["sport", "tennis", "balls"], "s"),
                product("c", "z", 0.0, &["home", "kitchen", "pans"], "s"),
            ],
            tax,
            ComplementaryMap::default(),
        )
        .unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.leaf_of("b"), Some("balls"));
    }

    #[test]
    fn duplicate_product_id_is_named() {
        let err = Catalog::new(
            vec![
                product("a", "x", 1.0, &["sport", "tennis", "rackets"], "s"),
                product("a", "y", 2.0, &["sport", "tennis", "balls"], "s"),
            ],
            taxonomy(),
            ComplementaryMap::default(),
        )
        .unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!(err.violation, Violation::DuplicateProductId(s("a")));
    }

    #[test]
    fn path_skipping_a_level_is_rejected() {
        let tax = CategoryTaxonomy::new(vec![
            (s("a"), None),
            (s("b"), Some(s("a"))),
            (s("c"), Some(s("b"))),
        ])
        .unwrap();
        let err = Catalog::new(
            vec![product("p", "t", 1.0, &["a", "c"], "s")],
            tax,
            ComplementaryMap::default(),
        )
        .unwrap_err();
        assert_eq!(err.violation, Violation::NotAnEdge { parent: s("a"), child: s("c") });
    }

    #[test]
    fn negative_price_and_non_leaf_paths_are_rejected() {
        let err = Catalog::new(
            vec![product("p", "t", -1.0, &["sport", "tennis", "balls"], "s")],
            taxonomy(),
            ComplementaryMap::default(),
        )
        .unwrap_err();
        assert!(matches!(err.violation, Violation::InvalidPrice { .. }));
        let err = Catalog::new(
            vec![product("p", "t", 1.0, &["sport", "tennis"], "s")],
            taxonomy(),
            ComplementaryMap::default(),
        )
        .unwrap_err();
        assert_eq!(err.violation, Violation::NotALeaf(s("tennis")));
    }

    #[test]
    fn taxonomy_rejects_cycles_and_dangling_parents() {
        let err = CategoryTaxonomy::new(vec![(s("a"), Some(s("b"))), (s("b"), Some(s("a")))]).unwrap_err();
        assert!(matches!(err.violation, Violation::Cycle(_)));
        let err = CategoryTaxonomy::new(vec![(s("a"), Some(s("zz")))]).unwrap_err();
        assert!(matches!(err.violation, Violation::DanglingParent { .. }));
        let err = CategoryTaxonomy::new(vec![(s("a"), None), (s("a"), None)]).unwrap_err();
        assert_eq!(err.violation, Violation::DuplicateCategory(s("a")));
    }

    #[test]
    fn taxonomy_queries() {
        let tax = taxonomy();
        assert_eq!(tax.depth(), 3);
        assert_eq!(tax.path_to("balls").unwrap(), vec![s("sport"), s("tennis"), s("balls")]);
        let leaves: Vec<&str> = tax.leaves().collect();
        assert_eq!(leaves, vec!["balls", "pans", "rackets"]);
    }

    #[test]
    fn complementary_map_validation() {
        let tax = taxonomy();
        let err = ComplementaryMap::new(vec![(s("rackets"), vec![s("rackets")])], &tax).unwrap_err();
        assert_eq!(err.violation, Violation::SelfMapping(s("rackets")));
        let err = ComplementaryMap::new(vec![(s("rackets"), vec![])], &tax).unwrap_err();
        assert_eq!(err.violation, Violation::EmptyTargets(s("rackets")));
        let err = ComplementaryMap::new(vec![(s("rackets"), vec![s("nope")])], &tax).unwrap_err();
        assert_eq!(err.violation, Violation::UnknownCategory(s("nope")));
        let map = ComplementaryMap::new(vec![(s("rackets"), vec![s("balls"), s("pans")])], &tax).unwrap();
        assert_eq!(map.targets("rackets").unwrap(), &[s("balls"), s("pans")]);
    }

    #[test]
    fn sessions_belong_to_one_user() {
        let err = InteractionLog::new(vec![
            event("u1", "a", 0, EventKind::View, "s1"),
            event("u2", "b", 1, EventKind::View, "s1"),
        ])
        .unwrap_err();
        assert_eq!(err.index, 1);
    }
}
