//! Mixture of sparse Gaussian-process experts with a deep neural gating
//! network.
//!
//! Each expert is a constant-mean GP with a squared-exponential kernel,
//! approximated through a set of optimized pseudo-inputs so that training
//! and prediction cost O(N M^2) instead of O(N^3). A feedforward ReLU
//! network with a softmax head routes inputs to experts. Models are
//! trained either by alternating exact allocation with first-order
//! parameter fitting (`trainer::fit_mm`), by the one-pass
//! cluster-classify-regress approximation (`trainer::fit_ccr`), or by two
//! MM iterations from a random allocation (`trainer::fit_mm2r`).
//!
//! Predictions come in two flavors: hard routing through the most probable
//! expert, and the gate-weighted mixture with exact mixture moments and a
//! full predictive density (`model::MoePredictor`).

pub mod cli;
pub mod clustering;
pub mod datasets;
pub mod error;
pub mod gating;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod model_io;
pub mod optim;
pub mod report;
pub mod sparse_gp;
pub mod trainer;

pub use error::{Error, Result};
