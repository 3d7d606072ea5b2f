//! Probabilistic camera pose estimation from noisy runway-corner
//! projections.
//!
//! Three estimators turn a single noisy observation of the four runway
//! corners into a Gaussian belief over the camera position:
//! noise-sampled least squares, linear covariance propagation and a
//! No-U-Turn Hamiltonian Monte Carlo sampler. Beliefs are scored with
//! closed-form calibration and sharpness metrics for multivariate normals
//! and can be fused over time with a constant-velocity Kalman filter.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod calibration;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod kalman;
pub mod nlsq;
pub mod noise;

pub use error::{Error, Result};

use nalgebra::{SMatrix, SVector};

/// Stacked image coordinates of the four corners, in pixels.
pub type Vector8 = SVector<f64, 8>;
pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Matrix8x3 = SMatrix<f64, 8, 3>;
