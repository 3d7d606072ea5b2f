//! Estimators producing a Gaussian belief over the camera position.

mod linear;
mod lsq;
mod mcmc;
pub mod nuts;

pub use linear::{estimate_linear, information_covariance, sandwich_covariance, LinearEstimate, LinearOptions};
pub use lsq::{estimate_lsq, LsqConfig, LsqEstimate};
pub use mcmc::{estimate_mcmc, McmcConfig, McmcEstimate, PosePosterior};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::nlsq::{ResidualProblem, Weighting, WhitenedProblem};
use crate::noise::NoiseModel;
use crate::Vector8;

/// Multivariate normal belief over `[alongtrack, crosstrack, altitude]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector3<f64>> {
        let l = self
            .covariance
            .cholesky()
            .ok_or(Error::FactorizationFailed("belief covariance is not positive definite"))?
            .l();
        let z = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
        Ok(self.mean + l * z)
    }

    pub fn std_devs(&self) -> Vector3<f64> {
        self.covariance.diagonal().map(f64::sqrt)
    }
}

/// Draws of the camera position, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<Vector3<f64>>,
}

impl SampleSet {
    pub fn new(samples: Vec<Vector3<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: samples.len(),
            });
        }
        if !samples.iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConfig("non-finite sample".into()));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub belief: GaussianBelief,
    /// Sample covariance has rank below 3.
    pub degenerate: bool,
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(samples: &SampleSet) -> GaussianFit {
    let n = samples.len() as f64;
    let mean = samples.as_slice().iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for s in samples.as_slice() {
        let d = s - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    cov = (cov + cov.transpose()) * 0.5;
    let eig = cov.symmetric_eigenvalues();
    let max = eig.max();
    let degenerate = max <= 0.0 || eig.min() <= 1e-12 * max;
    GaussianFit {
        belief: GaussianBelief::new(mean, cov),
        degenerate,
    }
}

/// Diagonal Gaussian prior over the camera position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub belief: GaussianBelief,
}

impl Prior {
    pub const DEFAULT_STD: [f64; 3] = [1000.0, 200.0, 200.0];

    /// Prior with the default spread centered on `center`.
    pub fn around(center: Vector3<f64>) -> Self {
        let [a, c, h] = Self::DEFAULT_STD;
        Self {
            belief: GaussianBelief::new(center, Matrix3::from_diagonal(&Vector3::new(a * a, c * c, h * h))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        self.belief.sample(rng).expect("prior covariance is positive definite")
    }
}

/// One observation of the runway: geometry plus the noisy measured corner
/// projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseProblem {
    pub scene: Scene,
    pub measurements: Vector8,
}

impl PoseProblem {
    pub fn new(scene: Scene, measurements: Vector8) -> Self {
        Self { scene, measurements }
    }

    /// Least-squares problem weighted by the (possibly moment-matched)
    /// noise covariance.
    pub fn whitened(&self, noise: &NoiseModel) -> Result<WhitenedProblem> {
        Ok(WhitenedProblem {
            problem: ResidualProblem::new(
                self.scene,
                self.measurements,
                Weighting::Covariance(noise.covariance().matrix),
            ),
            factor: *noise.whitening(),
        })
    }
}

/// Draws an initial guess from `prior`, redrawing while a corner would be
/// behind the camera.
pub fn prior_init<R: Rng + ?Sized>(problem: &PoseProblem, prior: &Prior, rng: &mut R) -> Result<Vector3<f64>> {
    let mut last = None;
    for _ in 0..100 {
        let init = prior.sample(rng);
        match problem.scene.project_all(&init) {
            Ok(_) => return Ok(init),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
