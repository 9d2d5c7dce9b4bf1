//! Flow-map generative models on low-dimensional synthetic densities.
//!
//! The library trains a joint flow map — a shared-trunk MLP predicting both
//! the average velocity over a time interval and the average negative
//! divergence along the trajectory — so that sampling *and* exact
//! log-likelihood evaluation each take only a handful of network calls.
//! Analytic densities and a closed-form linear flow provide oracles for
//! verifying likelihood calibration end to end.

pub mod acceptance;
pub mod analytic;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod density;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod residuals;
pub mod sampling;
pub mod train;
pub mod rng;

pub use autodiff::{Activation, Tensor};
pub use error::{Error, Result};
pub use rng::{RngStream, StreamKind};
