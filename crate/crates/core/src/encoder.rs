//! The product encoder.
//!
//! Each content feature is looked up in its own embedding table (title tokens
//! are feature-hashed and mean-pooled, price is bucketed, every category level
//! shares one table, the seller id is hashed). The rows are concatenated,
//! passed through an MLP and L2-normalised. Query and target share one encoder
//! in similarity mode. In complementary mode the query side appends the
//! embedding of the requested target category and runs through its own MLP;
//! a linear projection head maps the query's leaf category embedding into the
//! category space for the reconstruction term.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Product};
use crate::hash::fnv1a;
use crate::linalg::{self, Matrix};
use crate::real::Real;

/// Pre-normalisation norms below this are reported instead of normalised.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub title_hash_buckets: usize,
    pub title_embedding_dim: usize,
    /// Strictly increasing bucket boundaries; `len + 1` price rows.
    pub price_bucket_edges: Vec<f64>,
    pub price_embedding_dim: usize,
    /// One table for every taxonomy level and the target-category input.
    pub category_embedding_dim: usize,
    pub max_category_levels: usize,
    /// Known category ids in ascending order; id at position `i` uses row `i + 1`.
    pub category_vocab: Vec<String>,
    pub seller_hash_buckets: usize,
    pub seller_embedding_dim: usize,
}

/// Sizes used when fitting a [`FeatureConfig`] to a catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub title_hash_buckets: usize,
    pub title_embedding_dim: usize,
    pub price_buckets: usize,
    pub price_embedding_dim: usize,
    pub category_embedding_dim: usize,
    /// Defaults to the taxonomy depth when absent.
    pub max_category_levels: Option<usize>,
    pub seller_hash_buckets: usize,
    pub seller_embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            title_hash_buckets: 8192,
            title_embedding_dim: 32,
            price_buckets: 16,
            price_embedding_dim: 16,
            category_embedding_dim: 16,
            max_category_levels: None,
            seller_hash_buckets: 1024,
            seller_embedding_dim: 16,
            hidden_dims: vec![128],
            output_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    ZeroDimension(&'static str),
    UnsortedPriceEdges,
    UnsortedVocabulary,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ZeroDimension(name) => write!(f, "{name} must be at least 1"),
            ConfigError::UnsortedPriceEdges => f.write_str("price_bucket_edges must be strictly increasing"),
            ConfigError::UnsortedVocabulary => f.write_str("category_vocab must be sorted and unique"),
        }
    }
}

impl core::error::Error for ConfigError {}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.title_hash_buckets, "title_hash_buckets"),
            (self.title_embedding_dim, "title_embedding_dim"),
            (self.price_embedding_dim, "price_embedding_dim"),
            (self.category_embedding_dim, "category_embedding_dim"),
            (self.max_category_levels, "max_category_levels"),
            (self.seller_hash_buckets, "seller_hash_buckets"),
            (self.seller_embedding_dim, "seller_embedding_dim"),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroDimension(name));
            }
        }
        if self.price_bucket_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ConfigError::UnsortedPriceEdges);
        }
        if self.category_vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::UnsortedVocabulary);
        }
        Ok(())
    }

    /// Width of the concatenated feature vector fed to the product tower.
    pub fn input_width(&self) -> usize {
        self.title_embedding_dim
            + self.price_embedding_dim
            + self.max_category_levels * self.category_embedding_dim
            + self.seller_embedding_dim
    }

    /// Row of `id` in the category table; 0 when unknown.
    pub fn category_row(&self, id: &str) -> u32 {
        match self.category_vocab.binary_search_by(|v| v.as_str().cmp(id)) {
            Ok(i) => i as u32 + 1,
            Err(_) => 0,
        }
    }

    pub fn category_rows(&self) -> usize {
        self.category_vocab.len() + 1
    }

    pub fn price_bucket(&self, price: f64) -> u32 {
        self.price_bucket_edges.partition_point(|&e| e <= price) as u32
    }

    /// Fits price edges (quantiles of the catalogue prices), the category
    /// vocabulary and the number of category levels.
    pub fn fit(catalog: &Catalog, dims: &EncoderDims) -> Self {
        let mut prices: Vec<f64> = catalog.products().iter().map(|p| p.price).collect();
        prices.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = Vec::new();
        if !prices.is_empty() {
            for i in 1..dims.price_buckets.max(1) {
                let e = prices[i * prices.len() / dims.price_buckets];
                if edges.last().map_or(true, |&last| e > last) {
                    edges.push(e);
                }
            }
        }
        let levels = dims.max_category_levels.unwrap_or_else(|| catalog.taxonomy().depth().max(1));
        FeatureConfig {
            title_hash_buckets: dims.title_hash_buckets,
            title_embedding_dim: dims.title_embedding_dim,
            price_bucket_edges: edges,
            price_embedding_dim: dims.price_embedding_dim,
            category_embedding_dim: dims.category_embedding_dim,
            max_category_levels: levels,
            category_vocab: catalog.taxonomy().ids().map(String::from).collect(),
            seller_hash_buckets: dims.seller_hash_buckets,
            seller_embedding_dim: dims.seller_embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub features: FeatureConfig,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn fit(catalog: &Catalog, dims: &EncoderDims) -> Self {
        EncoderConfig {
            features: FeatureConfig::fit(catalog, dims),
            hidden_dims: dims.hidden_dims.clone(),
            output_dim: dims.output_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.features.validate()?;
        if self.output_dim == 0 {
            return Err(ConfigError::ZeroDimension("output_dim"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ConfigError::ZeroDimension("hidden_dims"));
        }
        Ok(())
    }
}

/// Table indices for one product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureIndices {
    /// Hashed title tokens, a multiset in token order.
    pub title: Vec<u32>,
    pub price: u32,
    /// Exactly `max_category_levels` rows, root first, 0-padded.
    pub categories: Vec<u32>,
    pub seller: u32,
    /// Row of the product's own leaf category.
    pub leaf: u32,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

pub fn featurize(product: &Product, config: &FeatureConfig) -> FeatureIndices {
    let title = tokenize(&product.title)
        .iter()
        .map(|t| (fnv1a(t.as_bytes()) % config.title_hash_buckets as u64) as u32)
        .collect();
    let mut categories: Vec<u32> = product
        .category_path
        .iter()
        .take(config.max_category_levels)
        .map(|c| config.category_row(c))
        .collect();
    categories.resize(config.max_category_levels, 0);
    let seller = if product.seller_id.is_empty() {
        0
    } else {
        1 + (fnv1a(product.seller_id.as_bytes()) % config.seller_hash_buckets as u64) as u32
    };
    FeatureIndices {
        title,
        price: config.price_bucket(product.price),
        categories,
        seller,
        leaf: config.category_row(product.leaf_category()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `in x out`
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

impl<F: Real> Dense<F> {
    fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        Dense {
            weight: Matrix::random_normal(input, output, libm::sqrt(gain / input as f64), rng),
            bias: vec![F::ZERO; output],
            activation,
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Matrix::zeros(self.weight.rows, self.weight.cols),
            bias: vec![F::ZERO; self.bias.len()],
            activation: self.activation,
        }
    }

    fn cast<G: Real>(&self) -> Dense<G> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }

    /// Single-row forward pass.
    pub fn apply(&self, x: &[F]) -> Vec<F> {
        let mut out = vec![F::ZERO; self.output_dim()];
        linalg::matmul(x, 1, &self.weight, &mut out);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o += b;
            if self.activation == Activation::Relu && *o < F::ZERO {
                *o = F::ZERO;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Mlp<F> {
    fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(Dense::init(width, h, Activation::Relu, rng));
            width = h;
        }
        layers.push(Dense::init(width, output, Activation::Identity, rng));
        Mlp { layers }
    }

    fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp { layers: self.layers.iter().map(Dense::cast).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }
}

pub type NamedTensor<'a, F> = (String, [usize; 2], &'a [F]);

fn push_mlp_tensors<'a, F>(prefix: &str, mlp: &'a Mlp<F>, out: &mut Vec<NamedTensor<'a, F>>) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), [l.weight.rows, l.weight.cols], &l.weight.data));
        out.push((format!("{prefix}.{i}.bias"), [1, l.bias.len()], &l.bias));
    }
}

/// Which model a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerMode {
    Similarity,
    Complementary,
}

impl fmt::Display for TowerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TowerMode::Similarity => "similarity",
            TowerMode::Complementary => "complementary",
        })
    }
}

/// Parameters only the complementary query side owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplementaryHead<F> {
    /// Input: product features plus one category row.
    pub query_tower: Mlp<F>,
    /// Leaf category embedding to category embedding space.
    pub projection: Dense<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub config: EncoderConfig,
    pub title: Matrix<F>,
    pub price: Matrix<F>,
    pub category: Matrix<F>,
    pub seller: Matrix<F>,
    /// The shared product tower (query and target in similarity mode, target
    /// in complementary mode).
    pub tower: Mlp<F>,
    pub complementary: Option<ComplementaryHead<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodeError {
    DegenerateNorm { row: usize, norm: f64 },
    ShapeMismatch(String),
    NotComplementary,
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodeError::DegenerateNorm { row, norm } => {
                write!(f, "encoder output {row} has degenerate norm {norm:e}")
            }
            EncodeError::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            EncodeError::NotComplementary => f.write_str("parameters have no complementary query tower"),
        }
    }
}

impl core::error::Error for EncodeError {}

/// Unit-norm product embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductEmbedding {
    pub product_id: String,
    pub vector: Vec<f32>,
}

/// Selects the MLP a forward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Tower {
    Product,
    ComplementaryQuery,
}

/// Intermediate values of a batched forward pass, kept for backprop.
pub(crate) struct Pass<F> {
    pub n: usize,
    layer_inputs: Vec<Vec<F>>,
    norms: Vec<F>,
    /// `n x output_dim`, unit rows.
    pub out: Vec<F>,
}

impl<F: Real> EncoderParams<F> {
    /// Random initialisation. Tables ~ N(0, 0.5^2), MLP layers He/Xavier.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, mode: TowerMode, rng: &mut R) -> Self {
        let fc = &config.features;
        let std = 0.5;
        let title = Matrix::random_normal(fc.title_hash_buckets, fc.title_embedding_dim, std, rng);
        let price = Matrix::random_normal(fc.price_bucket_edges.len() + 1, fc.price_embedding_dim, std, rng);
        let category = Matrix::random_normal(fc.category_rows(), fc.category_embedding_dim, std, rng);
        let seller = Matrix::random_normal(fc.seller_hash_buckets + 1, fc.seller_embedding_dim, std, rng);
        let tower = Mlp::init(fc.input_width(), &config.hidden_dims, config.output_dim, rng);
        let complementary = match mode {
            TowerMode::Similarity => None,
            TowerMode::Complementary => {
                let cd = fc.category_embedding_dim;
                Some(ComplementaryHead {
                    query_tower: Mlp::init(fc.input_width() + cd, &config.hidden_dims, config.output_dim, rng),
                    projection: Dense::init(cd, cd, Activation::Identity, rng),
                })
            }
        };
        EncoderParams { config, title, price, category, seller, tower, complementary }
    }

    pub fn mode(&self) -> TowerMode {
        if self.complementary.is_some() {
            TowerMode::Complementary
        } else {
            TowerMode::Similarity
        }
    }

    pub fn output_dim(&self) -> usize {
        self.tower.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            config: self.config.clone(),
            title: Matrix::zeros(self.title.rows, self.title.cols),
            price: Matrix::zeros(self.price.rows, self.price.cols),
            category: Matrix::zeros(self.category.rows, self.category.cols),
            seller: Matrix::zeros(self.seller.rows, self.seller.cols),
            tower: self.tower.zeros_like(),
            complementary: self.complementary.as_ref().map(|h| ComplementaryHead {
                query_tower: h.query_tower.zeros_like(),
                projection: h.projection.zeros_like(),
            }),
        }
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        EncoderParams {
            config: self.config.clone(),
            title: self.title.cast(),
            price: self.price.cast(),
            category: self.category.cast(),
            seller: self.seller.cast(),
            tower: self.tower.cast(),
            complementary: self.complementary.as_ref().map(|h| ComplementaryHead {
                query_tower: h.query_tower.cast(),
                projection: h.projection.cast(),
            }),
        }
    }

    /// Named tensors in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<NamedTensor<'_, F>> {
        let mut out: Vec<NamedTensor<'_, F>> = vec![
            ("title".into(), [self.title.rows, self.title.cols], &self.title.data),
            ("price".into(), [self.price.rows, self.price.cols], &self.price.data),
            ("category".into(), [self.category.rows, self.category.cols], &self.category.data),
            ("seller".into(), [self.seller.rows, self.seller.cols], &self.seller.data),
        ];
        push_mlp_tensors("tower", &self.tower, &mut out);
        if let Some(h) = &self.complementary {
            push_mlp_tensors("query_tower", &h.query_tower, &mut out);
            let p = &h.projection;
            out.push(("projection.weight".into(), [p.weight.rows, p.weight.cols], &p.weight.data));
            out.push(("projection.bias".into(), [1, p.bias.len()], &p.bias));
        }
        out
    }

    /// Mutable views of every tensor, same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            &mut self.title.data,
            &mut self.price.data,
            &mut self.category.data,
            &mut self.seller.data,
        ];
        for l in &mut self.tower.layers {
            out.push(&mut l.weight.data);
            out.push(&mut l.bias);
        }
        if let Some(h) = &mut self.complementary {
            for l in &mut h.query_tower.layers {
                out.push(&mut l.weight.data);
                out.push(&mut l.bias);
            }
            out.push(&mut h.projection.weight.data);
            out.push(&mut h.projection.bias);
        }
        out
    }

    /// Expected `(name, shape)` list for a config and mode.
    pub fn expected_shapes(config: &EncoderConfig, mode: TowerMode) -> Vec<(String, [usize; 2])> {
        let fc = &config.features;
        let mut out = vec![
            ("title".into(), [fc.title_hash_buckets, fc.title_embedding_dim]),
            ("price".into(), [fc.price_bucket_edges.len() + 1, fc.price_embedding_dim]),
            ("category".into(), [fc.category_rows(), fc.category_embedding_dim]),
            ("seller".into(), [fc.seller_hash_buckets + 1, fc.seller_embedding_dim]),
        ];
        let mlp = |prefix: &str, input: usize, out: &mut Vec<(String, [usize; 2])>| {
            let mut width = input;
            for (i, &h) in config.hidden_dims.iter().chain(core::iter::once(&config.output_dim)).enumerate() {
                out.push((format!("{prefix}.{i}.weight"), [width, h]));
                out.push((format!("{prefix}.{i}.bias"), [1, h]));
                width = h;
            }
        };
        mlp("tower", fc.input_width(), &mut out);
        if mode == TowerMode::Complementary {
            let cd = fc.category_embedding_dim;
            mlp("query_tower", fc.input_width() + cd, &mut out);
            out.push(("projection.weight".into(), [cd, cd]));
            out.push(("projection.bias".into(), [1, cd]));
        }
        out
    }

    /// Rebuilds parameters from flat tensors in checkpoint order, checking
    /// every shape against the config.
    pub fn from_tensors(config: EncoderConfig, mode: TowerMode, mut tensors: Vec<Vec<F>>) -> Result<Self, EncodeError> {
        config.validate().map_err(|e| EncodeError::ShapeMismatch(format!("{e}")))?;
        let shapes = Self::expected_shapes(&config, mode);
        if shapes.len() != tensors.len() {
            return Err(EncodeError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, [r, c]), t) in shapes.iter().zip(&tensors) {
            if t.len() != r * c {
                return Err(EncodeError::ShapeMismatch(format!("{name}: expected {r}x{c}, found {} values", t.len())));
            }
        }
        let mut it = shapes.into_iter().zip(tensors.drain(..));
        let mut matrix = || {
            let ((_, [rows, cols]), data) = it.next().unwrap();
            Matrix { rows, cols, data }
        };
        let title = matrix();
        let price = matrix();
        let category = matrix();
        let seller = matrix();
        let layers = config.hidden_dims.len() + 1;
        let mut mlp = |n: usize| {
            let mut out = Vec::new();
            for i in 0..n {
                let weight = matrix();
                let bias = matrix().data;
                let activation = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                out.push(Dense { weight, bias, activation });
            }
            Mlp { layers: out }
        };
        let tower = mlp(layers);
        let complementary = if mode == TowerMode::Complementary {
            let query_tower = mlp(layers);
            let weight = matrix();
            let bias = matrix().data;
            Some(ComplementaryHead { query_tower, projection: Dense { weight, bias, activation: Activation::Identity } })
        } else {
            None
        };
        Ok(EncoderParams { config, title, price, category, seller, tower, complementary })
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn validate_shapes(&self) -> Result<(), EncodeError> {
        let expected = Self::expected_shapes(&self.config, self.mode());
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(EncodeError::ShapeMismatch("tensor count".into()));
        }
        for ((name, shape), (_, got, data)) in expected.iter().zip(&actual) {
            if shape != got || data.len() != shape[0] * shape[1] {
                return Err(EncodeError::ShapeMismatch(format!("{name}: expected {shape:?}, found {got:?}")));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn tower(&self, which: Tower) -> Result<&Mlp<F>, EncodeError> {
        match which {
            Tower::Product => Ok(&self.tower),
            Tower::ComplementaryQuery => {
                self.complementary.as_ref().map(|h| &h.query_tower).ok_or(EncodeError::NotComplementary)
            }
        }
    }

    fn check_rows(&self, f: &FeatureIndices) -> Result<(), EncodeError> {
        let fc = &self.config.features;
        let ok = f.title.iter().all(|&t| (t as usize) < self.title.rows)
            && (f.price as usize) < self.price.rows
            && f.categories.len() == fc.max_category_levels
            && f.categories.iter().all(|&c| (c as usize) < self.category.rows)
            && (f.seller as usize) < self.seller.rows
            && (f.leaf as usize) < self.category.rows;
        if ok {
            Ok(())
        } else {
            Err(EncodeError::ShapeMismatch("feature indices out of table range".into()))
        }
    }

    /// Concatenated feature rows, optionally followed by a target-category row.
    pub(crate) fn assemble(&self, feats: &[&FeatureIndices], targets: Option<&[u32]>) -> Result<Vec<F>, EncodeError> {
        let fc = &self.config.features;
        let extra = if targets.is_some() { fc.category_embedding_dim } else { 0 };
        let width = fc.input_width() + extra;
        let mut x = vec![F::ZERO; feats.len() * width];
        for (i, f) in feats.iter().enumerate() {
            self.check_rows(f)?;
            let row = &mut x[i * width..(i + 1) * width];
            let (title, rest) = row.split_at_mut(fc.title_embedding_dim);
            if !f.title.is_empty() {
                let scale = F::ONE / F::from_f64(f.title.len() as f64);
                for &t in &f.title {
                    linalg::axpy(scale, self.title.row(t as usize), title);
                }
            }
            let (price, mut rest) = rest.split_at_mut(fc.price_embedding_dim);
            price.copy_from_slice(self.price.row(f.price as usize));
            for &c in &f.categories {
                let (slot, tail) = rest.split_at_mut(fc.category_embedding_dim);
                slot.copy_from_slice(self.category.row(c as usize));
                rest = tail;
            }
            let (seller, rest) = rest.split_at_mut(fc.seller_embedding_dim);
            seller.copy_from_slice(self.seller.row(f.seller as usize));
            if let Some(t) = targets {
                let c = t[i] as usize;
                if c >= self.category.rows {
                    return Err(EncodeError::ShapeMismatch("target category out of range".into()));
                }
                rest.copy_from_slice(self.category.row(c));
            }
        }
        Ok(x)
    }

    /// Adds the gradient of the assembled inputs into the embedding tables.
    pub(crate) fn scatter(&self, feats: &[&FeatureIndices], targets: Option<&[u32]>, dx: &[F], grads: &mut Self) {
        let fc = &self.config.features;
        let extra = if targets.is_some() { fc.category_embedding_dim } else { 0 };
        let width = fc.input_width() + extra;
        for (i, f) in feats.iter().enumerate() {
            let row = &dx[i * width..(i + 1) * width];
            let (title, rest) = row.split_at(fc.title_embedding_dim);
            if !f.title.is_empty() {
                let scale = F::ONE / F::from_f64(f.title.len() as f64);
                for &t in &f.title {
                    linalg::axpy(scale, title, grads.title.row_mut(t as usize));
                }
            }
            let (price, mut rest) = rest.split_at(fc.price_embedding_dim);
            linalg::axpy(F::ONE, price, grads.price.row_mut(f.price as usize));
            for &c in &f.categories {
                let (slot, tail) = rest.split_at(fc.category_embedding_dim);
                linalg::axpy(F::ONE, slot, grads.category.row_mut(c as usize));
                rest = tail;
            }
            let (seller, rest) = rest.split_at(fc.seller_embedding_dim);
            linalg::axpy(F::ONE, seller, grads.seller.row_mut(f.seller as usize));
            if let Some(t) = targets {
                linalg::axpy(F::ONE, rest, grads.category.row_mut(t[i] as usize));
            }
        }
    }

    /// MLP plus L2 normalisation over `n` assembled rows.
    pub(crate) fn forward(&self, which: Tower, x: Vec<F>, n: usize) -> Result<Pass<F>, EncodeError> {
        let mlp = self.tower(which)?;
        if x.len() != n * mlp.input_dim() {
            return Err(EncodeError::ShapeMismatch(format!(
                "MLP expects width {}, got {}",
                mlp.input_dim(),
                if n == 0 { 0 } else { x.len() / n }
            )));
        }
        let mut layer_inputs = vec![x];
        for layer in &mlp.layers {
            let input = layer_inputs.last().unwrap();
            let m = layer.output_dim();
            let mut out = vec![F::ZERO; n * m];
            linalg::matmul(input, n, &layer.weight, &mut out);
            for row in out.chunks_exact_mut(m) {
                for (o, &b) in row.iter_mut().zip(&layer.bias) {
                    *o += b;
                    if layer.activation == Activation::Relu && *o < F::ZERO {
                        *o = F::ZERO;
                    }
                }
            }
            layer_inputs.push(out);
        }
        let mut out = layer_inputs.pop().unwrap();
        let d = mlp.output_dim();
        let mut norms = Vec::with_capacity(n);
        for (row, chunk) in out.chunks_exact_mut(d).enumerate() {
            let norm = linalg::norm(chunk);
            if !(norm.to_f64() >= MIN_NORM) {
                return Err(EncodeError::DegenerateNorm { row, norm: norm.to_f64() });
            }
            let inv = F::ONE / norm;
            chunk.iter_mut().for_each(|v| *v *= inv);
            norms.push(norm);
        }
        Ok(Pass { n, layer_inputs, norms, out })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the unit outputs) through the
    /// normalisation and MLP, accumulating weight gradients into `grads`.
    /// Returns the gradient w.r.t. the assembled inputs.
    pub(crate) fn backward(&self, which: Tower, pass: &Pass<F>, d_out: &[F], grads: &mut Self) -> Vec<F> {
        let mlp = self.tower(which).expect("forward succeeded with this tower");
        let grad_mlp = match which {
            Tower::Product => &mut grads.tower,
            Tower::ComplementaryQuery => &mut grads.complementary.as_mut().expect("same mode").query_tower,
        };
        let n = pass.n;
        let d = mlp.output_dim();
        let mut delta = vec![F::ZERO; n * d];
        for i in 0..n {
            let u = &pass.out[i * d..(i + 1) * d];
            let g = &d_out[i * d..(i + 1) * d];
            let ug = linalg::dot(u, g);
            let inv = F::ONE / pass.norms[i];
            for j in 0..d {
                delta[i * d + j] = (g[j] - u[j] * ug) * inv;
            }
        }
        for (l, layer) in mlp.layers.iter().enumerate().rev() {
            let m = layer.output_dim();
            if layer.activation == Activation::Relu {
                let out = &pass.layer_inputs[l + 1];
                for (dv, &o) in delta.iter_mut().zip(out) {
                    if o <= F::ZERO {
                        *dv = F::ZERO;
                    }
                }
            }
            let input = &pass.layer_inputs[l];
            let g = &mut grad_mlp.layers[l];
            for row in delta.chunks_exact(m) {
                linalg::axpy(F::ONE, row, &mut g.bias);
            }
            linalg::accumulate_outer(input, n, &delta, &mut g.weight);
            let mut d_in = vec![F::ZERO; n * layer.input_dim()];
            linalg::matmul_transposed(&delta, n, &layer.weight, &mut d_in);
            delta = d_in;
        }
        delta
    }

    /// Encodes a batch with the product tower; returns `n x d` unit rows.
    pub fn encode_batch(&self, feats: &[&FeatureIndices]) -> Result<Vec<F>, EncodeError> {
        let x = self.assemble(feats, None)?;
        Ok(self.forward(Tower::Product, x, feats.len())?.out)
    }

    /// Encodes `(product, target category row)` pairs with the complementary
    /// query tower.
    pub fn encode_complementary_batch(&self, feats: &[&FeatureIndices], targets: &[u32]) -> Result<Vec<F>, EncodeError> {
        if self.complementary.is_none() {
            return Err(EncodeError::NotComplementary);
        }
        if targets.len() != feats.len() {
            return Err(EncodeError::ShapeMismatch("one target category per query".into()));
        }
        let x = self.assemble(feats, Some(targets))?;
        Ok(self.forward(Tower::ComplementaryQuery, x, feats.len())?.out)
    }

    pub fn embed(&self, feats: &FeatureIndices) -> Result<Vec<F>, EncodeError> {
        self.encode_batch(&[feats])
    }

    /// Projection of the query's leaf-category embedding into category space.
    pub fn project_complementary(&self, feats: &FeatureIndices) -> Result<Vec<F>, EncodeError> {
        let head = self.complementary.as_ref().ok_or(EncodeError::NotComplementary)?;
        if (feats.leaf as usize) >= self.category.rows {
            return Err(EncodeError::ShapeMismatch("leaf category out of range".into()));
        }
        if head.projection.input_dim() != self.category.cols {
            return Err(EncodeError::ShapeMismatch("projection input width".into()));
        }
        Ok(head.projection.apply(self.category.row(feats.leaf as usize)))
    }

    /// Category row for a target category id, falling back to the reserved
    /// unknown row with a warning.
    pub fn target_category_row(&self, category: &str) -> u32 {
        let row = self.config.features.category_row(category);
        if row == 0 {
            log::warn!("unknown target category {category:?}, using the reserved row");
        }
        row
    }
}

impl EncoderParams<f32> {
    pub fn featurize(&self, product: &Product) -> FeatureIndices {
        featurize(product, &self.config.features)
    }

    pub fn encode(&self, product: &Product) -> Result<ProductEmbedding, EncodeError> {
        let vector = self.embed(&self.featurize(product))?;
        Ok(ProductEmbedding { product_id: product.product_id.clone(), vector })
    }

    pub fn encode_complementary_query(&self, product: &Product, target_category: &str) -> Result<ProductEmbedding, EncodeError> {
        let row = self.target_category_row(target_category);
        let vector = self.encode_complementary_batch(&[&self.featurize(product)], &[row])?;
        Ok(ProductEmbedding { product_id: product.product_id.clone(), vector })
    }
}

/// Encodes every catalogue product with the product tower, in catalogue order.
pub fn encode_catalog(params: &EncoderParams<f32>, catalog: &Catalog) -> Result<Vec<ProductEmbedding>, EncodeError> {
    let feats: Vec<FeatureIndices> = catalog.products().iter().map(|p| params.featurize(p)).collect();
    let mut out = Vec::with_capacity(feats.len());
    let d = params.output_dim();
    for (chunk_products, chunk_feats) in catalog.products().chunks(512).zip(feats.chunks(512)) {
        let refs: Vec<&FeatureIndices> = chunk_feats.iter().collect();
        let vecs = params.encode_batch(&refs)?;
        for (p, v) in chunk_products.iter().zip(vecs.chunks_exact(d)) {
            out.push(ProductEmbedding { product_id: p.product_id.clone(), vector: v.to_vec() });
        }
    }
    Ok(out)
}
