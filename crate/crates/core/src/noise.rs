//! Measurement-noise models over the stacked 8-vector of corner coordinates.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{Matrix8, Vector8};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Vector8,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum NoiseKind {
    /// Independent corners sharing one 2×2 (right, up) covariance.
    UncorrelatedGaussian { corner_covariance: Matrix2<f64> },
    /// Arbitrary joint covariance over all eight components.
    CorrelatedGaussian { covariance: Matrix8 },
    /// Every scalar component drawn independently from
    /// `weight·N(0, σ_low²) + (1 − weight)·N(0, σ_high²)`.
    LongTailMixture {
        weight: f64,
        sigma_low: f64,
        sigma_high: f64,
    },
}

/// Covariance as seen by an estimator that assumes Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCovariance {
    pub matrix: Matrix8,
    /// False when the model is not Gaussian and `matrix` only matches its
    /// second moments.
    pub exact: bool,
}

#[derive(Debug, Clone)]
struct GaussianFactor {
    covariance: Matrix8,
    lower: Matrix8,
    whitening: Matrix8,
    precision: Matrix8,
    log_norm: f64,
}

impl GaussianFactor {
    fn new(covariance: Matrix8) -> Result<Self> {
        if (covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1e-300) {
            return Err(Error::FactorizationFailed("noise covariance is not symmetric"));
        }
        let chol =
            Cholesky::new(covariance).ok_or(Error::FactorizationFailed("noise covariance is not positive definite"))?;
        let lower = chol.l();
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let whitening = lower
            .solve_lower_triangular(&Matrix8::identity())
            .ok_or(Error::FactorizationFailed("singular noise factor"))?;
        Ok(Self {
            covariance,
            lower,
            whitening,
            precision: chol.inverse(),
            log_norm: -0.5 * (8.0 * LN_2PI + log_det),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    /// Factor of the exact covariance, or of the moment-matched one for
    /// non-Gaussian models.
    moments: GaussianFactor,
    exact: bool,
}

impl NoiseModel {
    pub fn uncorrelated(corner_covariance: Matrix2<f64>) -> Result<Self> {
        let mut cov = Matrix8::zeros();
        for i in 0..4 {
            cov.fixed_view_mut::<2, 2>(2 * i, 2 * i).copy_from(&corner_covariance);
        }
        Ok(Self {
            kind: NoiseKind::UncorrelatedGaussian { corner_covariance },
            moments: GaussianFactor::new(cov)?,
            exact: true,
        })
    }

    /// Isotropic per-component standard deviation `sigma` in pixels.
    pub fn isotropic(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise std {sigma} must be positive")));
        }
        Self::uncorrelated(Matrix2::identity() * (sigma * sigma))
    }

    pub fn correlated(covariance: Matrix8) -> Result<Self> {
        Ok(Self {
            moments: GaussianFactor::new(covariance)?,
            exact: true,
            kind: NoiseKind::CorrelatedGaussian { covariance },
        })
    }

    /// Matching components (right with right, up with up) of different
    /// corners share covariance `cross`; each component has variance
    /// `variance`; right and up are uncorrelated.
    pub fn cross_corner_correlated(variance: f64, cross: f64) -> Result<Self> {
        let cov = Matrix8::from_fn(|i, j| {
            if i == j {
                variance
            } else if i % 2 == j % 2 {
                cross
            } else {
                0.0
            }
        });
        Self::correlated(cov)
    }

    pub fn long_tail(weight: f64, sigma_low: f64, sigma_high: f64) -> Result<Self> {
        if !(weight > 0.0 && weight < 1.0) {
            return Err(Error::InvalidConfig(format!("mixture weight {weight} not in (0, 1)")));
        }
        if !(sigma_low > 0.0 && sigma_high > 0.0) {
            return Err(Error::InvalidConfig("mixture scales must be positive".into()));
        }
        Ok(Self {
            kind: NoiseKind::LongTailMixture {
                weight,
                sigma_low,
                sigma_high,
            },
            moments: GaussianFactor::new(
                Matrix8::identity() * (weight * sigma_low.powi(2) + (1.0 - weight) * sigma_high.powi(2)),
            )?,
            exact: false,
        })
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn is_gaussian(&self) -> bool {
        self.exact
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        let epsilon = match &self.kind {
            _ if self.exact => {
                let z = Vector8::from_fn(|_, _| rng.sample(StandardNormal));
                self.moments.lower * z
            }
            NoiseKind::LongTailMixture {
                weight,
                sigma_low,
                sigma_high,
            } => Vector8::from_fn(|_, _| {
                let sigma = if rng.random::<f64>() < *weight {
                    *sigma_low
                } else {
                    *sigma_high
                };
                sigma * rng.sample::<f64, _>(StandardNormal)
            }),
            _ => unreachable!("gaussian variants always carry a factor"),
        };
        NoiseDraw { epsilon }
    }

    pub fn covariance(&self) -> NoiseCovariance {
        NoiseCovariance {
            matrix: self.moments.covariance,
            exact: self.exact,
        }
    }

    /// Inverse of [`covariance`](Self::covariance).
    pub fn precision(&self) -> &Matrix8 {
        &self.moments.precision
    }

    /// `L⁻¹` for `covariance = LLᵀ`; maps residuals to unit variance.
    pub fn whitening(&self) -> &Matrix8 {
        &self.moments.whitening
    }

    /// Exact joint log-density of `eps`.
    pub fn log_density(&self, eps: &Vector8) -> f64 {
        self.log_density_with_gradient(eps).0
    }

    /// Log-density and its gradient with respect to `eps`.
    pub fn log_density_with_gradient(&self, eps: &Vector8) -> (f64, Vector8) {
        match &self.kind {
            _ if self.exact => {
                let g = &self.moments;
                let grad = -(g.precision * eps);
                (g.log_norm + 0.5 * eps.dot(&grad), grad)
            }
            NoiseKind::LongTailMixture {
                weight,
                sigma_low,
                sigma_high,
            } => {
                let mut total = 0.0;
                let mut grad = Vector8::zeros();
                let comps = [(*weight, *sigma_low), (1.0 - weight, *sigma_high)];
                for (l, e) in eps.iter().enumerate() {
                    let logs = comps.map(|(w, s)| w.ln() - s.ln() - 0.5 * LN_2PI - 0.5 * (e / s).powi(2));
                    let m = logs[0].max(logs[1]);
                    let lse = m + ((logs[0] - m).exp() + (logs[1] - m).exp()).ln();
                    total += lse;
                    grad[l] = comps
                        .iter()
                        .zip(logs)
                        .map(|((_, s), lg)| -(lg - lse).exp() * e / (s * s))
                        .sum();
                }
                (total, grad)
            }
            _ => unreachable!(),
        }
    }
}

/// Log-density of a scalar `N(0, σ²)` at `x`; handy for tests and docs.
pub fn normal_log_pdf(x: f64, sigma: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * (x / sigma).powi(2)
}
