//! Multitask affect learning on frame embeddings of vocal bursts.

pub mod dataio;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
