//! Deterministic simulator of server-side proximal federated domain-incremental
//! learning, with a harness that estimates the analysis constants and checks
//! the drift, backward-transfer and convergence bounds on logged runs.

pub mod client;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runlog;
pub mod server;
pub mod theory;

pub use error::{Error, Result};
