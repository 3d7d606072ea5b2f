//! Linear Kalman filter fusing a time series of position beliefs.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::estimators::GaussianBelief;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState<const N: usize> {
    pub x: SVector<f64, N>,
    pub p: SMatrix<f64, N, N>,
}

impl<const N: usize> FilterState<N> {
    pub fn new(x: SVector<f64, N>, p: SMatrix<f64, N, N>) -> Self {
        Self { x, p }
    }
}

/// `x ← A x + w`, `y = C x + v` with `E[w wᵀ] = Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterModel<const N: usize, const M: usize> {
    pub a: SMatrix<f64, N, N>,
    pub c: SMatrix<f64, M, N>,
    pub q: SMatrix<f64, N, N>,
}

/// Position and velocity along the three axes, observing position.
pub type ConstantVelocity = FilterModel<6, 3>;

pub const DEFAULT_ACCEL_STD: f64 = 0.5;
pub const DEFAULT_INITIAL_SPEED_STD: f64 = 50.0;

impl ConstantVelocity {
    /// Discrete white-noise acceleration with standard deviation `sigma_a`.
    pub fn constant_velocity(dt: f64, sigma_a: f64) -> Result<Self> {
        if !(dt > 0.0) || !(sigma_a >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "constant-velocity model needs dt > 0 and sigma_a >= 0, got {dt}, {sigma_a}"
            )));
        }
        let mut a = SMatrix::<f64, 6, 6>::identity();
        let mut c = SMatrix::<f64, 3, 6>::zeros();
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let s2 = sigma_a * sigma_a;
        for i in 0..3 {
            a[(i, i + 3)] = dt;
            c[(i, i)] = 1.0;
            q[(i, i)] = s2 * dt.powi(4) / 4.0;
            q[(i, i + 3)] = s2 * dt.powi(3) / 2.0;
            q[(i + 3, i)] = s2 * dt.powi(3) / 2.0;
            q[(i + 3, i + 3)] = s2 * dt * dt;
        }
        Ok(Self { a, c, q })
    }

    /// Position from `belief`, zero velocity with a wide spread.
    pub fn initial_state(belief: &GaussianBelief, speed_std: f64) -> FilterState<6> {
        let mut x = SVector::<f64, 6>::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&belief.mean);
        let mut p = SMatrix::<f64, 6, 6>::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&belief.covariance);
        for i in 3..6 {
            p[(i, i)] = speed_std * speed_std;
        }
        FilterState::new(x, p)
    }
}

fn symmetrize<const N: usize>(p: SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (p + p.transpose()) * 0.5
}

pub fn predict<const N: usize, const M: usize>(state: &FilterState<N>, model: &FilterModel<N, M>) -> FilterState<N> {
    FilterState {
        x: model.a * state.x,
        p: symmetrize(model.a * state.p * model.a.transpose() + model.q),
    }
}

/// Kalman update with a Joseph-form covariance.
pub fn update<const N: usize, const M: usize>(
    state: &FilterState<N>,
    mean: &SVector<f64, M>,
    covariance: &SMatrix<f64, M, M>,
    model: &FilterModel<N, M>,
) -> Result<FilterState<N>> {
    let pct = state.p * model.c.transpose();
    let s = symmetrize(model.c * pct + covariance);
    let s_inv = s.cholesky().ok_or(Error::InnovationCovarianceSingular)?.inverse();
    let gain = pct * s_inv;
    let x = state.x + gain * (mean - model.c * state.x);
    let ikc = SMatrix::<f64, N, N>::identity() - gain * model.c;
    let p = ikc * state.p * ikc.transpose() + gain * covariance * gain.transpose();
    Ok(FilterState { x, p: symmetrize(p) })
}

pub fn update_with_belief(
    state: &FilterState<6>,
    belief: &GaussianBelief,
    model: &ConstantVelocity,
) -> Result<FilterState<6>> {
    update(state, &belief.mean, &belief.covariance, model)
}

/// Marginal position belief `N(Cx, C P Cᵀ)`.
pub fn position_belief(state: &FilterState<6>, model: &ConstantVelocity) -> GaussianBelief {
    let mean: Vector3<f64> = model.c * state.x;
    let cov: Matrix3<f64> = model.c * state.p * model.c.transpose();
    GaussianBelief::new(mean, symmetrize(cov))
}

/// Filters `beliefs` in order. Without `init` the first belief seeds the
/// state and is reported unchanged; otherwise every belief is preceded by a
/// prediction from the previous state.
pub fn run_filter(
    beliefs: &[GaussianBelief],
    model: &ConstantVelocity,
    init: Option<FilterState<6>>,
) -> Result<Vec<GaussianBelief>> {
    let mut out = Vec::with_capacity(beliefs.len());
    let (mut state, rest) = match (init, beliefs.split_first()) {
        (_, None) => return Ok(out),
        (Some(s), _) => (s, beliefs),
        (None, Some((first, rest))) => {
            let s = ConstantVelocity::initial_state(first, DEFAULT_INITIAL_SPEED_STD);
            out.push(position_belief(&s, model));
            (s, rest)
        }
    };
    for b in rest {
        state = update_with_belief(&predict(&state, model), b, model)?;
        out.push(position_belief(&state, model));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix1, Vector1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cv() -> ConstantVelocity {
        ConstantVelocity::constant_velocity(1.0, 0.5).unwrap()
    }

    fn belief(mean: Vector3<f64>, var: f64) -> GaussianBelief {
        GaussianBelief::new(mean, Matrix3::identity() * var)
    }

    fn gauss<const N: usize>(rng: &mut ChaCha8Rng, cov: &SMatrix<f64, N, N>) -> SVector<f64, N> {
        let l = cov.cholesky().unwrap().l();
        l * SVector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(ConstantVelocity::constant_velocity(0.0, 0.5).is_err());
        assert!(ConstantVelocity::constant_velocity(1.0, -1.0).is_err());
        assert!(ConstantVelocity::constant_velocity(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn white_acceleration_process_noise() {
        let m = ConstantVelocity::constant_velocity(2.0, 0.5).unwrap();
        assert_relative_eq!(m.q[(0, 0)], 0.25 * 16.0 / 4.0);
        assert_relative_eq!(m.q[(0, 3)], 0.25 * 8.0 / 2.0);
        assert_relative_eq!(m.q[(3, 3)], 0.25 * 4.0);
        assert_eq!(m.q[(0, 1)], 0.0);
        assert!(m.q.symmetric_eigenvalues().min() >= -1e-12);
    }

    #[test]
    fn predict_moves_with_velocity() {
        let mut m = cv();
        m.q = SMatrix::zeros();
        let still = FilterState::new(
            SVector::<f64, 6>::from_column_slice(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]),
            SMatrix::identity(),
        );
        assert_eq!(predict(&still, &m).x, still.x);
        let moving = FilterState::new(
            SVector::<f64, 6>::from_column_slice(&[1.0, 2.0, 3.0, 70.0, -1.0, 3.5]),
            SMatrix::identity(),
        );
        let next = predict(&moving, &m).x;
        assert_eq!(next.fixed_rows::<3>(0).into_owned(), Vector3::new(71.0, 1.0, 6.5));
    }

    #[test]
    fn prediction_never_shrinks_trace() {
        let m = cv();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = FilterState::new(SVector::zeros(), SMatrix::identity());
        for _ in 0..50 {
            let next = predict(&s, &m);
            assert!(next.p.trace() >= s.p.trace());
            let meas = belief(
                Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                rng.random_range(0.1..10.0),
            );
            s = update_with_belief(&next, &meas, &m).unwrap();
        }
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let m = cv();
        let s = FilterState::new(
            SVector::<f64, 6>::from_column_slice(&[10.0, -3.0, 50.0, 70.0, 0.0, -3.0]),
            SMatrix::identity() * 4.0,
        );
        let meas = belief(Vector3::new(1000.0, 1000.0, 1000.0), 1e12);
        let u = update_with_belief(&s, &meas, &m).unwrap();
        assert!((u.x - s.x).norm() <= 1e-6 * s.x.norm());
        assert!((u.p - s.p).norm() <= 1e-6 * s.p.norm());
    }

    #[test]
    fn uninformative_prior_takes_measurement() {
        let m = cv();
        let s = FilterState::new(SVector::zeros(), SMatrix::identity() * 1e12);
        let target = Vector3::new(-4000.0, 12.0, 200.0);
        let u = update_with_belief(&s, &belief(target, 1.0), &m).unwrap();
        assert!((u.x.fixed_rows::<3>(0) - target).norm() < 1e-6);
    }

    #[test]
    fn scalar_update_is_precision_weighted_average() {
        let model = FilterModel::<1, 1> {
            a: Matrix1::identity(),
            c: Matrix1::identity(),
            q: Matrix1::zeros(),
        };
        let (m1, s1, m2, s2) = (3.0, 2.0, -1.0, 0.5);
        let u = update(
            &FilterState::new(Vector1::new(m1), Matrix1::new(s1 * s1)),
            &Vector1::new(m2),
            &Matrix1::new(s2 * s2),
            &model,
        )
        .unwrap();
        let w1 = 1.0 / (s1 * s1);
        let w2 = 1.0 / (s2 * s2);
        assert_relative_eq!(u.x[0], (w1 * m1 + w2 * m2) / (w1 + w2), epsilon = 1e-14);
        assert_relative_eq!(u.p[(0, 0)], 1.0 / (w1 + w2), epsilon = 1e-14);
    }

    #[test]
    fn updates_commute_without_dynamics() {
        let model = FilterModel::<3, 3> {
            a: Matrix3::identity(),
            c: Matrix3::identity(),
            q: Matrix3::zeros(),
        };
        let s = FilterState::new(
            Vector3::new(1.0, 2.0, 3.0),
            Matrix3::new(4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0),
        );
        let (y1, r1) = (
            Vector3::new(0.0, 1.0, -1.0),
            Matrix3::new(1.0, 0.2, 0.0, 0.2, 2.0, 0.0, 0.0, 0.0, 0.5),
        );
        let (y2, r2) = (Vector3::new(2.0, 0.0, 0.5), Matrix3::identity() * 3.0);
        let a = update(&update(&s, &y1, &r1, &model).unwrap(), &y2, &r2, &model).unwrap();
        let b = update(&update(&s, &y2, &r2, &model).unwrap(), &y1, &r1, &model).unwrap();
        assert!((a.x - b.x).amax() < 1e-9);
        assert!((a.p - b.p).amax() < 1e-9);
    }

    #[test]
    fn singular_innovation_rejected() {
        let m = cv();
        let s = FilterState::new(SVector::zeros(), SMatrix::zeros());
        let r = update_with_belief(&s, &GaussianBelief::new(Vector3::zeros(), Matrix3::zeros()), &m);
        assert!(matches!(r, Err(Error::InnovationCovarianceSingular)));
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let m = cv();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ConstantVelocity::initial_state(&belief(Vector3::zeros(), 100.0), 50.0);
        for _ in 0..10_000 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let r = a * a.transpose() * rng.random_range(0.01..1e4) + Matrix3::identity() * 1e-3;
            let mean = Vector3::from_fn(|_, _| rng.random_range(-1e3..1e3));
            s = update(&predict(&s, &m), &mean, &r, &m).unwrap();
            let tr = s.p.trace();
            assert!((s.p - s.p.transpose()).amax() <= 1e-10 * tr);
            assert!(s.p.symmetric_eigenvalues().min() >= -1e-9 * tr);
        }
    }

    #[test]
    fn steady_state_trace_decreases() {
        let m = cv();
        let beliefs = vec![belief(Vector3::new(0.0, 0.0, 100.0), 25.0); 40];
        let out = run_filter(&beliefs, &m, None).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(out[0], beliefs[0]);
        for t in 3..out.len() {
            assert!(out[t].covariance.trace() <= out[t - 1].covariance.trace() + 1e-12);
        }
        let last = out[39].covariance.trace();
        assert!((out[38].covariance.trace() - last).abs() < 1e-3 * last);
    }

    #[test]
    fn single_step_is_predict_then_update() {
        let m = cv();
        let init = ConstantVelocity::initial_state(&belief(Vector3::new(-6000.0, 5.0, 300.0), 100.0), 50.0);
        let b = belief(Vector3::new(-5930.0, 4.0, 296.0), 80.0);
        let out = run_filter(&[b], &m, Some(init)).unwrap();
        let manual = update_with_belief(&predict(&init, &m), &b, &m).unwrap();
        assert_eq!(out, vec![position_belief(&manual, &m)]);
        assert!(run_filter(&[], &m, None).unwrap().is_empty());
    }

    #[test]
    fn nees_is_chi_square_on_self_generated_data() {
        let m = cv();
        let r = Matrix3::new(400.0, 10.0, 0.0, 10.0, 4.0, 0.5, 0.0, 0.5, 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let runs = 500;
        let mut total = 0.0;
        for _ in 0..runs {
            let v0 = gauss(&mut rng, &(Matrix3::identity() * 2500.0));
            let mut x = SVector::<f64, 6>::zeros();
            x.fixed_rows_mut::<3>(3).copy_from(&v0);
            let z0 = x.fixed_rows::<3>(0) + gauss(&mut rng, &r);
            let mut s = ConstantVelocity::initial_state(&GaussianBelief::new(z0, r), 50.0);
            for _ in 0..30 {
                // Q has rank three: draw the acceleration itself
                let acc = gauss(&mut rng, &(Matrix3::identity() * 0.25));
                x = m.a * x;
                for i in 0..3 {
                    x[i] += 0.5 * acc[i];
                    x[i + 3] += acc[i];
                }
                let z = m.c * x + gauss(&mut rng, &r);
                s = update(&predict(&s, &m), &z, &r, &m).unwrap();
            }
            let e = s.x - x;
            total += e.dot(&(s.p.try_inverse().unwrap() * e));
        }
        let mean = total / runs as f64;
        // mean of 500 χ²₆ draws
        let half_width = 1.96 * (12.0f64 / runs as f64).sqrt();
        assert!((mean - 6.0).abs() <= half_width, "{mean}");
    }
}
