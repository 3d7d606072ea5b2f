//! Linear covariance propagation around a single least-squares solve.
//!
//! Linearizing `f` at the solution `μ` gives `β ≈ μ + A·ε` with
//! `A = (JᵀWJ)⁻¹JᵀW`, hence `Σ_β = A Σ_ε Aᵀ`.

use nalgebra::{Const, Matrix3, SMatrix, Vector3};

use super::{GaussianBelief, PoseProblem};
use crate::error::{Error, Result};
use crate::nlsq::{solve_with, TrustRegionConfig};
use crate::noise::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearOptions {
    /// Center the propagated noise on the observed residual `y − f(μ)`
    /// instead of zero. This adds `A·r(μ)` to the mean and leaves the
    /// covariance unchanged; at an exact least-squares optimum `JᵀW r = 0`,
    /// so the shift is bounded by the solver's gradient tolerance.
    pub robust: bool,
    pub solver: TrustRegionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimate {
    pub belief: GaussianBelief,
    /// Solver iterations for the single solve.
    pub iterations: usize,
    /// False when the noise covariance was moment-matched.
    pub exact_noise_covariance: bool,
}

/// `(JᵀWJ)⁻¹ JᵀW Σ W J (JᵀWJ)⁻¹`.
pub fn sandwich_covariance<const M: usize>(
    jac: &SMatrix<f64, M, 3>,
    weight: &SMatrix<f64, M, M>,
    noise_cov: &SMatrix<f64, M, M>,
) -> Result<Matrix3<f64>>
where
    Const<M>: nalgebra::DimName,
{
    let jtw = jac.transpose() * weight;
    let info: Matrix3<f64> = jtw * jac;
    let bread = info.cholesky().ok_or(Error::RankDeficientJacobian)?.inverse();
    let meat: Matrix3<f64> = jtw * noise_cov * jtw.transpose();
    let cov = bread * meat * bread;
    Ok((cov + cov.transpose()) * 0.5)
}

/// `(JᵀΣ⁻¹J)⁻¹`, the sandwich with `W = Σ⁻¹`.
pub fn information_covariance<const M: usize>(
    jac: &SMatrix<f64, M, 3>,
    noise_cov: &SMatrix<f64, M, M>,
) -> Result<Matrix3<f64>>
where
    Const<M>: nalgebra::DimName,
{
    let l = noise_cov
        .cholesky()
        .ok_or(Error::FactorizationFailed("noise covariance is not positive definite"))?
        .l();
    let whitened = l
        .solve_lower_triangular(jac)
        .ok_or(Error::FactorizationFailed("singular noise factor"))?;
    let info: Matrix3<f64> = whitened.transpose() * whitened;
    let cov = info.cholesky().ok_or(Error::RankDeficientJacobian)?.inverse();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Solves once from `init` and propagates the noise covariance through the
/// Jacobian at the solution. Non-Gaussian noise enters through its
/// moment-matched covariance.
pub fn estimate_linear(
    problem: &PoseProblem,
    noise: &NoiseModel,
    init: &Vector3<f64>,
    options: &LinearOptions,
) -> Result<LinearEstimate> {
    let noise_cov = noise.covariance();
    let whitened = problem.whitened(noise)?;
    let solution = solve_with(&whitened, init, &options.solver)?;
    let (prediction, jac) = problem.scene.project_with_jacobian(&solution.beta)?;
    let weight = *noise.precision();
    let covariance = sandwich_covariance(&jac, &weight, &noise_cov.matrix)?;

    let mut mean = solution.beta;
    if options.robust {
        let jtw = jac.transpose() * weight;
        let info: Matrix3<f64> = jtw * jac;
        let residual = problem.measurements - prediction;
        let shift = info
            .cholesky()
            .ok_or(Error::RankDeficientJacobian)?
            .solve(&(jtw * residual));
        mean += shift;
    }

    Ok(LinearEstimate {
        belief: GaussianBelief::new(mean, covariance),
        iterations: solution.iterations,
        exact_noise_covariance: noise_cov.exact,
    })
}
