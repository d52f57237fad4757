//! Deterministic simulator for federated learning with two-sided low-rank
//! gradient projection and orthogonal-subspace superposition of layer
//! updates, applied to unsupervised angle-of-arrival estimation.

pub mod aoa;
pub mod codec;
pub mod config;
pub mod error;
pub mod lowrank_opt;
pub mod model;
pub mod projector;
pub mod protocol;
pub mod rng;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
