//! Content-based two-tower retrieval.
//!
//! Products are represented only by their content features (title tokens,
//! price, category path, seller). A shared product encoder maps them to unit
//! vectors; relevance is the dot product. On top of that encoder the crate
//! provides training with sampled softmax over mixed negatives, a
//! complementary-category conditioned query tower, exact and two-level
//! (k-means partitioned) nearest-neighbour indexes, and the recommendation
//! logic for similar, complementary and inspirational carousels.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the HTTP
//! service and the CLI live in the `twotower` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ann;
pub mod catalog;
pub mod encoder;
pub mod eval;
pub mod hash;
pub mod linalg;
pub mod real;
pub mod serving;
pub mod training;

pub use ann::{FlatIndex, HierarchicalIndex, Hit, SearchResult};
pub use catalog::{Catalog, CategoryTaxonomy, ComplementaryMap, InteractionLog, PairSet, Product};
pub use encoder::{EncoderConfig, EncoderParams, FeatureConfig, ProductEmbedding, TowerMode};
pub use real::Real;
pub use training::{LossReport, TrainConfig};
