//! Temporal clustering of patient visit sequences with an external memory
//! network.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: matrices, linear maps, the LSTM cell, softmax, and a
//!   finite-difference gradient checker.
//! - [`memory`]: the slot memory bank with gated writes, similarity-weighted
//!   reads, and the dual-memory calibration gate.
//! - [`model`]: the per-visit variational sequence model and its
//!   hand-written backward pass.
//! - [`training`]: objectives, KL annealing, Adam, and the epoch loop.
//! - [`cluster`]: k-means, purity / NMI / ARI, and PCA projection.
//! - [`data`]: synthetic cohorts, the long-format CSV loader, imputation,
//!   normalization, and splitting.
//! - [`checkpoint`]: the versioned text container for trained parameters.

pub mod checkpoint;
pub mod cluster;
pub mod data;
mod error;
pub mod kv;
pub mod memory;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
