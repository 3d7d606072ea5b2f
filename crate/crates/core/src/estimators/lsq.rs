//! Noise-sampling least squares: re-solve with the measurements shifted by
//! fresh noise draws and fit a Gaussian to the solutions.

use nalgebra::Vector3;
use rand::Rng;

use super::{fit_gaussian, prior_init, GaussianBelief, PoseProblem, Prior, SampleSet};
use crate::error::{Error, Result};
use crate::nlsq::{solve_with, TrustRegionConfig};
use crate::noise::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqConfig {
    pub samples: usize,
    /// Fraction of draws allowed to fail before the estimate is rejected.
    pub max_discard_fraction: f64,
    pub solver: TrustRegionConfig,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self {
            samples: 400,
            max_discard_fraction: 0.1,
            solver: TrustRegionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqEstimate {
    pub samples: SampleSet,
    pub belief: GaussianBelief,
    pub degenerate: bool,
    pub discarded: usize,
    pub total_iterations: usize,
}

pub fn estimate_lsq<R: Rng + ?Sized>(
    problem: &PoseProblem,
    noise: &NoiseModel,
    prior: &Prior,
    config: &LsqConfig,
    rng: &mut R,
) -> Result<LsqEstimate> {
    if config.samples == 0 {
        return Err(Error::InvalidConfig("LSQ needs at least one sample".into()));
    }
    let base = problem.whitened(noise)?;
    let mut init = prior_init(problem, prior, rng)?;
    let mut solutions: Vec<Vector3<f64>> = Vec::with_capacity(config.samples);
    let mut discarded = 0;
    let mut total_iterations = 0;
    for _ in 0..config.samples {
        let eps = noise.sample(rng).epsilon;
        let perturbed = base.with_measurements(problem.measurements - eps);
        match solve_with(&perturbed, &init, &config.solver) {
            Ok(sol) => {
                total_iterations += sol.iterations;
                init = sol.beta;
                solutions.push(sol.beta);
            }
            Err(_) => discarded += 1,
        }
    }
    if discarded as f64 > config.max_discard_fraction * config.samples as f64 {
        return Err(Error::TooManyDiscarded {
            discarded,
            total: config.samples,
        });
    }
    // a single surviving draw still yields a point estimate
    if solutions.len() == 1 {
        solutions.push(solutions[0]);
    }
    let samples = SampleSet::new(solutions)?;
    let fit = fit_gaussian(&samples);
    Ok(LsqEstimate {
        samples,
        belief: fit.belief,
        degenerate: fit.degenerate,
        discarded,
        total_iterations,
    })
}
