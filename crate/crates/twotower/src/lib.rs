//! File formats, serving state, HTTP endpoints and offline pipeline steps
//! around `twotower-core`.

pub mod bench;
mod codec;
pub mod checkpoint;
pub mod http;
pub mod index_file;
pub mod io;
pub mod pipeline;
pub mod state;

pub use state::{DeploymentMode, ServingState};
