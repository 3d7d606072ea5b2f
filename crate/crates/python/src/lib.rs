//! Python bindings. Vectors and matrices cross the boundary as nested lists of
//! floats; matrices are row-major.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ppest::calibration::{self as cal, MvNormal, PredictionRecord};
use ppest::estimators::{self as est, LinearOptions, LsqConfig, McmcConfig, PoseProblem};
use ppest::geometry::{runway_corners, Attitude, CameraModel, RunwaySpec};
use ppest::harness::{self, ExperimentConfig};
use ppest::kalman::{self, ConstantVelocity};
use ppest::{Matrix8, Vector8};

fn err(e: ppest::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v)
}

fn rows<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<Vec<f64>> {
    (0..R).map(|i| (0..C).map(|j| m[(i, j)]).collect()).collect()
}

fn mat3(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn dmat(m: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| m[i][j]))
}

/// Camera looking at the runway from a fixed attitude.
#[pyclass(frozen, from_py_object, module = "ppest")]
#[derive(Clone)]
struct Scene {
    inner: ppest::geometry::Scene,
}

#[pymethods]
impl Scene {
    /// Attitude angles are in radians.
    #[new]
    #[pyo3(signature = (roll=0.0, pitch=0.0, yaw=0.0, focal_length=3000.0, runway_length=3500.0, runway_width=60.0))]
    fn new(roll: f64, pitch: f64, yaw: f64, focal_length: f64, runway_length: f64, runway_width: f64) -> Self {
        let corners = runway_corners(&RunwaySpec {
            length: runway_length,
            width: runway_width,
        });
        Scene {
            inner: ppest::geometry::Scene::new(corners, CameraModel { focal_length }, Attitude::new(roll, pitch, yaw)),
        }
    }

    /// Pixel coordinates `[u1, v1, ..., u4, v4]` of the four corners.
    fn project(&self, position: [f64; 3]) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .project_all(&vec3(position))
            .map_err(err)?
            .iter()
            .copied()
            .collect())
    }

    /// 8x3 Jacobian of `project` with respect to the position.
    fn jacobian(&self, position: [f64; 3]) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.jacobian(&vec3(position)).map_err(err)?))
    }
}

/// Pixel noise on the eight corner coordinates.
#[pyclass(frozen, from_py_object, module = "ppest")]
#[derive(Clone)]
struct NoiseModel {
    inner: ppest::noise::NoiseModel,
}

#[pymethods]
impl NoiseModel {
    #[staticmethod]
    fn isotropic(sigma: f64) -> PyResult<Self> {
        Ok(NoiseModel {
            inner: ppest::noise::NoiseModel::isotropic(sigma).map_err(err)?,
        })
    }

    #[staticmethod]
    fn correlated(covariance: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = dmat(&covariance)?;
        if m.nrows() != 8 {
            return Err(PyValueError::new_err("covariance must be 8x8"));
        }
        Ok(NoiseModel {
            inner: ppest::noise::NoiseModel::correlated(Matrix8::from_fn(|i, j| m[(i, j)])).map_err(err)?,
        })
    }

    /// Each coordinate has `variance`; matching coordinates of different
    /// corners share covariance `cross`.
    #[staticmethod]
    fn cross_corner(variance: f64, cross: f64) -> PyResult<Self> {
        Ok(NoiseModel {
            inner: ppest::noise::NoiseModel::cross_corner_correlated(variance, cross).map_err(err)?,
        })
    }

    #[staticmethod]
    fn long_tail(weight: f64, sigma_low: f64, sigma_high: f64) -> PyResult<Self> {
        Ok(NoiseModel {
            inner: ppest::noise::NoiseModel::long_tail(weight, sigma_low, sigma_high).map_err(err)?,
        })
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.covariance().matrix)
    }

    fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.sample(&mut rng).epsilon.iter().copied().collect()
    }

    fn log_density(&self, eps: [f64; 8]) -> f64 {
        self.inner.log_density(&Vector8::from(eps))
    }
}

/// Gaussian belief over `[alongtrack, crosstrack, altitude]` in metres.
#[pyclass(frozen, from_py_object, module = "ppest")]
#[derive(Clone)]
struct Belief {
    inner: est::GaussianBelief,
}

#[pymethods]
impl Belief {
    #[new]
    fn new(mean: [f64; 3], covariance: [[f64; 3]; 3]) -> Self {
        Belief {
            inner: est::GaussianBelief::new(vec3(mean), mat3(&covariance)),
        }
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.covariance)
    }

    /// Volume of the one-sigma ellipsoid in cubic metres.
    fn sharpness(&self) -> f64 {
        cal::belief_sharpness(&self.inner)
    }

    fn __repr__(&self) -> String {
        let m = self.inner.mean;
        let s = self.inner.std_devs();
        format!(
            "Belief(mean=[{:.2}, {:.2}, {:.2}], std=[{:.3}, {:.3}, {:.3}])",
            m[0], m[1], m[2], s[0], s[1], s[2]
        )
    }
}

fn problem(scene: &Scene, measurements: [f64; 8]) -> PoseProblem {
    PoseProblem::new(scene.inner, Vector8::from(measurements))
}

#[pyfunction]
#[pyo3(signature = (scene, measurements, noise, init, robust=false))]
fn estimate_linear(
    scene: &Scene,
    measurements: [f64; 8],
    noise: &NoiseModel,
    init: [f64; 3],
    robust: bool,
) -> PyResult<Belief> {
    let options = LinearOptions {
        robust,
        ..LinearOptions::default()
    };
    let e = est::estimate_linear(&problem(scene, measurements), &noise.inner, &vec3(init), &options).map_err(err)?;
    Ok(Belief { inner: e.belief })
}

/// Sampling estimate. The prior is centred on `prior_mean` with the default
/// spread.
#[pyfunction]
#[pyo3(signature = (scene, measurements, noise, prior_mean, samples=400, seed=0))]
fn estimate_lsq(
    py: Python<'_>,
    scene: &Scene,
    measurements: [f64; 8],
    noise: &NoiseModel,
    prior_mean: [f64; 3],
    samples: usize,
    seed: u64,
) -> PyResult<Belief> {
    let p = problem(scene, measurements);
    let prior = est::Prior::around(vec3(prior_mean));
    let config = LsqConfig {
        samples,
        ..LsqConfig::default()
    };
    let noise = noise.inner.clone();
    let e = py
        .detach(|| est::estimate_lsq(&p, &noise, &prior, &config, &mut ChaCha8Rng::seed_from_u64(seed)))
        .map_err(err)?;
    Ok(Belief { inner: e.belief })
}

#[pyfunction]
#[pyo3(signature = (scene, measurements, noise, prior_mean, samples=400, warmup=250, seed=0))]
#[allow(clippy::too_many_arguments)]
fn estimate_mcmc(
    py: Python<'_>,
    scene: &Scene,
    measurements: [f64; 8],
    noise: &NoiseModel,
    prior_mean: [f64; 3],
    samples: usize,
    warmup: usize,
    seed: u64,
) -> PyResult<Belief> {
    let p = problem(scene, measurements);
    let prior = est::Prior::around(vec3(prior_mean));
    let mut config = McmcConfig::default();
    config.sampler.samples = samples;
    config.sampler.warmup = warmup;
    let noise = noise.inner.clone();
    let e = py
        .detach(|| est::estimate_mcmc(&p, &noise, &prior, &config, &mut ChaCha8Rng::seed_from_u64(seed)))
        .map_err(err)?;
    Ok(Belief { inner: e.belief })
}

/// Fraction of truths inside each belief's rho-confidence box, for each level.
#[pyfunction]
#[pyo3(signature = (beliefs, truths, levels=None))]
fn calibration_curve(
    beliefs: Vec<Belief>,
    truths: Vec<Vec<f64>>,
    levels: Option<Vec<f64>>,
) -> PyResult<Vec<(f64, f64)>> {
    if beliefs.len() != truths.len() {
        return Err(PyValueError::new_err("beliefs and truths differ in length"));
    }
    let records: Vec<_> = beliefs
        .iter()
        .zip(&truths)
        .map(|(b, t)| PredictionRecord::new(MvNormal::from(&b.inner), DVector::from_vec(t.clone())))
        .collect();
    let levels = levels.unwrap_or_else(cal::CalibrationCurve::default_levels);
    let curve = cal::calibration_curve(&records, &levels).map_err(err)?;
    Ok(curve.levels.into_iter().zip(curve.coverage).collect())
}

/// Volume of the one-sigma ellipsoid of a covariance of any dimension.
#[pyfunction]
fn sharpness(covariance: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(cal::sharpness(&dmat(&covariance)?))
}

/// Constant-velocity Kalman smoothing of a sequence of per-frame beliefs.
#[pyfunction]
#[pyo3(signature = (beliefs, dt=1.0, accel_std=kalman::DEFAULT_ACCEL_STD))]
fn kalman_filter(beliefs: Vec<Belief>, dt: f64, accel_std: f64) -> PyResult<Vec<Belief>> {
    let model = ConstantVelocity::constant_velocity(dt, accel_std).map_err(err)?;
    let raw: Vec<_> = beliefs.into_iter().map(|b| b.inner).collect();
    let out = kalman::run_filter(&raw, &model, None).map_err(err)?;
    Ok(out.into_iter().map(|inner| Belief { inner }).collect())
}

/// Runs the calibration suite for a TOML configuration and returns, per
/// estimator, the joint calibration curve, failure count and median sharpness.
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn run_suite<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let report = py.detach(|| harness::run_suite(&cfg)).map_err(err)?;
    let out = PyDict::new(py);
    for c in &report.calibration {
        let entry = PyDict::new(py);
        let curve: Vec<(f64, f64)> = c
            .joint
            .levels
            .iter()
            .copied()
            .zip(c.joint.coverage.iter().copied())
            .collect();
        entry.set_item("calibration", curve)?;
        entry.set_item("max_deviation", c.joint.max_deviation())?;
        entry.set_item("failures", c.failures)?;
        entry.set_item("median_sharpness", harness::median(&report.sharpness_of(c.estimator)))?;
        out.set_item(c.estimator.name(), entry)?;
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "ppest")]
fn ppest_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<NoiseModel>()?;
    m.add_class::<Belief>()?;
    m.add_function(wrap_pyfunction!(estimate_linear, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_lsq, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_mcmc, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_curve, m)?)?;
    m.add_function(wrap_pyfunction!(sharpness, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_filter, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
