//! Numerical laboratory for kernel-target alignment of the neural tangent kernel under
//! edge-of-stability gradient descent on two-layer networks.
//!
//! Modules, bottom up: [`spectral`] (dense and diagonal-plus-rank-one eigenproblems),
//! [`datagen`] (spiked Gaussian data), [`models`] (linear, reduced rank-1 and ReLU nets),
//! [`metrics`] (alignment and sharpness), [`dynamics`] (GD, gradient flow, central flow,
//! phase detection), [`theorychecks`] (quantitative checks on trajectories) and
//! [`experiment`] (the matched-loss sweep protocol shared by the CLI and the test suite).

pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod models;
pub mod spectral;
pub mod theorychecks;

pub use error::{Error, Result};
