//! Heterogeneous temporal graph neural network engine for cross-platform
//! ad recommendation.

pub mod error;
pub mod fixtures;
pub mod graph;
pub mod hpo;
pub mod inference;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod scorer;
pub mod training;

pub use error::{Error, Result};
