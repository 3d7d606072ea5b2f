//! Weighted nonlinear least squares for the camera position.
//!
//! The objective `r(β)ᵀ W r(β)` with `r = y − f(β)` is turned into an
//! ordinary sum of squares `r̃ᵀr̃` by a triangular factor `U` with
//! `UᵀU = W`, and minimized with a dogleg trust-region method.

use nalgebra::{Cholesky, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::{Matrix8, Matrix8x3, Vector8};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Weight matrix `W` used directly.
    Weight(Matrix8),
    /// Noise covariance `Σ`; the weight is `Σ⁻¹`.
    Covariance(Matrix8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualProblem {
    pub scene: Scene,
    pub measurements: Vector8,
    pub weighting: Weighting,
}

impl ResidualProblem {
    pub fn new(scene: Scene, measurements: Vector8, weighting: Weighting) -> Self {
        Self {
            scene,
            measurements,
            weighting,
        }
    }

    /// Measurement minus prediction, in `project_all` order.
    pub fn residuals(&self, beta: &Vector3<f64>) -> Result<Vector8> {
        Ok(self.measurements - self.scene.project_all(beta)?)
    }

    /// `W` itself, inverting the covariance if needed.
    pub fn weight_matrix(&self) -> Result<Matrix8> {
        match self.weighting {
            Weighting::Weight(w) => Ok(w),
            Weighting::Covariance(s) => Cholesky::new(s)
                .map(|c| c.inverse())
                .ok_or(Error::FactorizationFailed("covariance is not positive definite")),
        }
    }

    fn covariance_matrix(&self) -> Result<Matrix8> {
        match self.weighting {
            Weighting::Covariance(s) => Ok(s),
            Weighting::Weight(w) => Cholesky::new(w)
                .map(|c| c.inverse())
                .ok_or(Error::FactorizationFailed("weight is not positive definite")),
        }
    }
}

/// How the whitening factor is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factorization {
    /// `W = LLᵀ`, `r̃ = Lᵀr`.
    WeightCholesky,
    /// Unpivoted `W = LU`; since `U = D·Lᵀ` for symmetric `W`,
    /// `r̃ = D^{-1/2}·U·r`.
    WeightLu,
    /// `Σ = LLᵀ`, `r̃ = L⁻¹r`.
    CovarianceCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitenedProblem {
    pub problem: ResidualProblem,
    /// `r̃ = factor · r`.
    pub factor: Matrix8,
}

/// Whitens with the factorization natural to the problem's weighting.
pub fn whiten(problem: &ResidualProblem) -> Result<WhitenedProblem> {
    let f = match problem.weighting {
        Weighting::Weight(_) => Factorization::WeightCholesky,
        Weighting::Covariance(_) => Factorization::CovarianceCholesky,
    };
    whiten_with(problem, f)
}

pub fn whiten_with(problem: &ResidualProblem, how: Factorization) -> Result<WhitenedProblem> {
    let factor = match how {
        Factorization::WeightCholesky => {
            let w = problem.weight_matrix()?;
            check_symmetric(&w)?;
            Cholesky::new(w)
                .ok_or(Error::FactorizationFailed("weight is not positive definite"))?
                .l()
                .transpose()
        }
        Factorization::WeightLu => {
            let w = problem.weight_matrix()?;
            check_symmetric(&w)?;
            let u = doolittle_upper(&w)?;
            let mut f = u;
            for i in 0..8 {
                let d = u[(i, i)];
                if !(d > 0.0) {
                    return Err(Error::FactorizationFailed("weight is not positive definite"));
                }
                f.row_mut(i).scale_mut(1.0 / d.sqrt());
            }
            f
        }
        Factorization::CovarianceCholesky => {
            let s = problem.covariance_matrix()?;
            check_symmetric(&s)?;
            let l = Cholesky::new(s)
                .ok_or(Error::FactorizationFailed("covariance is not positive definite"))?
                .l();
            l.solve_lower_triangular(&Matrix8::identity())
                .ok_or(Error::FactorizationFailed("singular covariance factor"))?
        }
    };
    Ok(WhitenedProblem {
        problem: *problem,
        factor,
    })
}

fn check_symmetric(m: &Matrix8) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-10 * m.amax() {
        return Err(Error::FactorizationFailed("matrix is not symmetric"));
    }
    Ok(())
}

/// Upper factor of the unpivoted Doolittle decomposition `A = LU`.
fn doolittle_upper(a: &Matrix8) -> Result<Matrix8> {
    let mut m = *a;
    for k in 0..8 {
        let pivot = m[(k, k)];
        if pivot.abs() < f64::MIN_POSITIVE {
            return Err(Error::FactorizationFailed("zero pivot in LU"));
        }
        for i in k + 1..8 {
            let l = m[(i, k)] / pivot;
            for j in k..8 {
                m[(i, j)] -= l * m[(k, j)];
            }
        }
    }
    Ok(m.upper_triangle())
}

impl WhitenedProblem {
    pub fn whitened_residuals(&self, beta: &Vector3<f64>) -> Result<Vector8> {
        Ok(self.factor * self.problem.residuals(beta)?)
    }

    /// `Σ r̃ᵢ²`.
    pub fn objective(&self, beta: &Vector3<f64>) -> Result<f64> {
        Ok(self.whitened_residuals(beta)?.norm_squared())
    }

    /// Whitened residuals and their Jacobian `−U·∂f/∂β`.
    pub fn residuals_and_jacobian(&self, beta: &Vector3<f64>) -> Result<(Vector8, Matrix8x3)> {
        let (pred, jac) = self.problem.scene.project_with_jacobian(beta)?;
        Ok((self.factor * (self.problem.measurements - pred), -(self.factor * jac)))
    }

    /// Same geometry and weighting, different measurements.
    pub fn with_measurements(&self, measurements: Vector8) -> Self {
        let mut out = *self;
        out.problem.measurements = measurements;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionConfig {
    pub initial_radius: f64,
    pub max_radius: f64,
    pub grow: f64,
    pub shrink: f64,
    pub good_ratio: f64,
    pub bad_ratio: f64,
    /// Minimum gain ratio for a step to be accepted.
    pub accept_ratio: f64,
    pub max_iterations: usize,
    /// Converged when `‖J̃ᵀr̃‖ ≤ gradient_tol · (1 + ‖r̃‖)`.
    pub gradient_tol: f64,
    /// Also converged when an accepted step is shorter than
    /// `step_tol · (1 + ‖β‖)`.
    pub step_tol: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            initial_radius: 100.0,
            max_radius: 1e5,
            grow: 2.0,
            shrink: 0.25,
            good_ratio: 0.75,
            bad_ratio: 0.25,
            accept_ratio: 1e-4,
            max_iterations: 100,
            gradient_tol: 1e-8,
            step_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: Vector3<f64>,
    /// Number of trust-region iterations (accepted or rejected).
    pub iterations: usize,
    /// Final `Σ r̃ᵢ²`.
    pub objective: f64,
    pub gradient_norm: f64,
    /// Objective after the initial point and after every accepted step.
    pub trace: Vec<f64>,
}

pub fn solve(problem: &WhitenedProblem, init: &Vector3<f64>) -> Result<Solution> {
    solve_with(problem, init, &TrustRegionConfig::default())
}

pub fn solve_with(problem: &WhitenedProblem, init: &Vector3<f64>, cfg: &TrustRegionConfig) -> Result<Solution> {
    let mut beta = *init;
    let (r, mut jac) = problem.residuals_and_jacobian(&beta)?;
    let mut cost = r.norm_squared();
    let mut radius = cfg.initial_radius;
    let mut trace = vec![cost];
    let mut gradient = jac.transpose() * r;

    let finish = |beta, iterations, cost: f64, gradient: Vector3<f64>, trace| Solution {
        beta,
        iterations,
        objective: cost,
        gradient_norm: gradient.norm(),
        trace,
    };

    for iter in 0..cfg.max_iterations {
        if !cost.is_finite() || !gradient.iter().all(|g| g.is_finite()) {
            return Err(Error::Divergence("non-finite residuals"));
        }
        if gradient.norm() <= cfg.gradient_tol * (1.0 + cost.sqrt()) {
            return Ok(finish(beta, iter, cost, gradient, trace));
        }

        let (gauss_newton, step) = dogleg_step(&jac, &gradient, radius)?;
        // the remaining correction is below what β can represent
        if gauss_newton.norm() <= cfg.step_tol * (1.0 + beta.norm()) {
            return Ok(finish(beta, iter, cost, gradient, trace));
        }
        let jp = jac * step;
        // model of ½‖r̃‖²
        let predicted = -(gradient.dot(&step) + 0.5 * jp.norm_squared());

        // Near the minimum the decrease in cost drops below the rounding
        // error of the cost itself, so the gain ratio is meaningless. Take the
        // full Gauss-Newton step and judge it by the gradient instead.
        let noise_floor = 1e-12 * (1.0 + cost);
        if predicted < noise_floor {
            let candidate = beta + gauss_newton;
            match problem.residuals_and_jacobian(&candidate) {
                Ok((r_new, j_new)) => {
                    let g_new = j_new.transpose() * r_new;
                    let c_new = r_new.norm_squared();
                    if g_new.norm() < gradient.norm() && c_new <= cost + noise_floor {
                        beta = candidate;
                        jac = j_new;
                        cost = c_new.min(cost);
                        gradient = g_new;
                        trace.push(cost);
                        continue;
                    }
                }
                Err(Error::PointBehindCamera { .. }) => {}
                Err(e) => return Err(e),
            }
            // nothing left that floating point can resolve
            return Ok(finish(beta, iter + 1, cost, gradient, trace));
        }

        let candidate = beta + step;
        let (ratio, trial) = match problem.residuals_and_jacobian(&candidate) {
            Ok((r_new, j_new)) => {
                let c_new = r_new.norm_squared();
                let actual = 0.5 * (cost - c_new);
                (actual / predicted, Some((r_new, j_new, c_new)))
            }
            Err(Error::PointBehindCamera { .. }) => (f64::NEG_INFINITY, None),
            Err(e) => return Err(e),
        };

        let step_norm = step.norm();
        if ratio < cfg.bad_ratio {
            radius = cfg.shrink * step_norm.min(radius);
        } else if ratio > cfg.good_ratio && step_norm >= 0.99 * radius {
            radius = (cfg.grow * radius).min(cfg.max_radius);
        }

        if ratio > cfg.accept_ratio {
            if let Some((r_new, j_new, c_new)) = trial {
                if c_new < cost {
                    beta = candidate;
                    jac = j_new;
                    cost = c_new;
                    gradient = jac.transpose() * r_new;
                    trace.push(cost);
                    if step_norm <= cfg.step_tol * (1.0 + beta.norm()) {
                        return Ok(finish(beta, iter + 1, cost, gradient, trace));
                    }
                }
            }
        }

        if radius <= cfg.step_tol * (1.0 + beta.norm()) {
            return Err(Error::Divergence("trust region collapsed"));
        }
    }

    if gradient.norm() <= cfg.gradient_tol * (1.0 + cost.sqrt()) {
        return Ok(finish(beta, cfg.max_iterations, cost, gradient, trace));
    }
    Err(Error::MaxIterations {
        iterations: cfg.max_iterations,
        gradient_norm: gradient.norm(),
    })
}

/// Returns the Gauss-Newton step and the dogleg step inside `radius`.
fn dogleg_step(jac: &Matrix8x3, gradient: &Vector3<f64>, radius: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let jtj: Matrix3<f64> = jac.transpose() * jac;
    let gauss_newton = match Cholesky::new(jtj) {
        Some(c) => -c.solve(gradient),
        // pseudo-inverse step on the range of JᵀJ
        None => jtj
            .svd(true, true)
            .solve(&(-gradient), 1e-14 * jtj.amax())
            .map_err(|_| Error::RankDeficientJacobian)?,
    };
    if gauss_newton.norm() <= radius {
        return Ok((gauss_newton, gauss_newton));
    }
    let g2 = gradient.norm_squared();
    let jg2 = (jac * gradient).norm_squared();
    if jg2 <= 0.0 {
        return Ok((gauss_newton, -gradient * (radius / gradient.norm())));
    }
    let cauchy = -gradient * (g2 / jg2);
    let cauchy_norm = cauchy.norm();
    if cauchy_norm >= radius {
        return Ok((gauss_newton, cauchy * (radius / cauchy_norm)));
    }
    // ‖cauchy + τ·d‖ = radius, τ ∈ [0, 1]
    let d = gauss_newton - cauchy;
    let a = d.norm_squared();
    let b = 2.0 * cauchy.dot(&d);
    let c = cauchy.norm_squared() - radius * radius;
    let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    Ok((gauss_newton, cauchy + d * tau))
}
