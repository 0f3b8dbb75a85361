//! Multi-token candidate matching with discrete query codes and an
//! inverted index of precomputed sparse scores.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod indexer;
pub mod model;
pub mod numeric;
pub mod parallel;
pub mod quantizer;
pub mod retriever;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
