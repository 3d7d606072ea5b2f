//! Posterior sampling of the camera position with NUTS.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::nuts::{sample_nuts, LogDensity, NutsConfig};
use super::{fit_gaussian, prior_init, GaussianBelief, PoseProblem, Prior, SampleSet};
use crate::error::{Error, Result};
use crate::nlsq::solve;
use crate::noise::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct McmcConfig {
    pub sampler: NutsConfig,
    /// Drop the likelihood and sample the prior alone.
    pub prior_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcEstimate {
    pub samples: SampleSet,
    pub belief: GaussianBelief,
    pub degenerate: bool,
    pub divergent: usize,
    pub step_size: f64,
    pub mean_accept: f64,
    pub leapfrog_steps: usize,
}

/// `log N(β; prior) + log p_ε(y − f(β))`, using the exact noise density.
#[derive(Debug, Clone)]
pub struct PosePosterior<'a> {
    pub problem: &'a PoseProblem,
    pub noise: &'a NoiseModel,
    prior_mean: Vector3<f64>,
    prior_precision: Matrix3<f64>,
    likelihood: bool,
}

impl<'a> PosePosterior<'a> {
    pub fn new(problem: &'a PoseProblem, noise: &'a NoiseModel, prior: &Prior) -> Result<Self> {
        let prior_precision = prior
            .belief
            .covariance
            .cholesky()
            .ok_or(Error::FactorizationFailed("prior covariance is not positive definite"))?
            .inverse();
        Ok(Self {
            problem,
            noise,
            prior_mean: prior.belief.mean,
            prior_precision,
            likelihood: true,
        })
    }

    pub fn prior_only(mut self) -> Self {
        self.likelihood = false;
        self
    }

    /// `-∞` with a zero gradient where a corner falls behind the camera.
    pub fn log_density_and_gradient(&self, beta: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let d = beta - self.prior_mean;
        let prior_grad = -(self.prior_precision * d);
        let mut logp = 0.5 * d.dot(&prior_grad);
        let mut grad = prior_grad;
        if self.likelihood {
            let Ok((pred, jac)) = self.problem.scene.project_with_jacobian(beta) else {
                return (f64::NEG_INFINITY, Vector3::zeros());
            };
            let (ll, dll) = self
                .noise
                .log_density_with_gradient(&(self.problem.measurements - pred));
            logp += ll;
            grad -= jac.transpose() * dll;
        }
        (logp, grad)
    }

    pub fn log_density(&self, beta: &Vector3<f64>) -> f64 {
        self.log_density_and_gradient(beta).0
    }
}

impl LogDensity<3> for PosePosterior<'_> {
    fn log_density_and_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        PosePosterior::log_density_and_gradient(self, x)
    }
}

/// Starting point and metric: the least-squares solution from a prior draw
/// and the Laplace approximation there. Prior-only sampling starts at the
/// prior itself.
fn initialize<R: Rng + ?Sized>(
    problem: &PoseProblem,
    noise: &NoiseModel,
    prior: &Prior,
    prior_only: bool,
    rng: &mut R,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    if prior_only {
        return Ok((prior.belief.mean, prior.belief.covariance));
    }
    let start = prior_init(problem, prior, rng)?;
    let whitened = problem.whitened(noise)?;
    let beta = solve(&whitened, &start).map(|s| s.beta).unwrap_or(start);
    let (_, jac) = whitened.residuals_and_jacobian(&beta)?;
    let prior_precision = prior
        .belief
        .covariance
        .cholesky()
        .ok_or(Error::FactorizationFailed("prior covariance is not positive definite"))?
        .inverse();
    let info: Matrix3<f64> = jac.transpose() * jac + prior_precision;
    let metric = info.cholesky().map(|c| c.inverse()).unwrap_or(prior.belief.covariance);
    Ok((beta, (metric + metric.transpose()) * 0.5))
}

pub fn estimate_mcmc<R: Rng + ?Sized>(
    problem: &PoseProblem,
    noise: &NoiseModel,
    prior: &Prior,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<McmcEstimate> {
    let mut posterior = PosePosterior::new(problem, noise, prior)?;
    if config.prior_only {
        posterior = posterior.prior_only();
    }
    let (init, metric) = initialize(problem, noise, prior, config.prior_only, rng)?;
    let out = sample_nuts(&posterior, &init, &metric, &config.sampler, rng)?;
    let draws = if out.draws.len() == 1 {
        vec![out.draws[0]; 2]
    } else {
        out.draws
    };
    let samples = SampleSet::new(draws)?;
    let fit = fit_gaussian(&samples);
    Ok(McmcEstimate {
        samples,
        belief: fit.belief,
        degenerate: fit.degenerate,
        divergent: out.divergent,
        step_size: out.step_size,
        mean_accept: out.mean_accept,
        leapfrog_steps: out.leapfrog_steps,
    })
}
