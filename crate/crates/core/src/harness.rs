//! Experiment orchestration: Monte-Carlo trials over random poses,
//! calibration and sharpness reporting, runtime benchmarks and the
//! filtered approach study.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    belief_sharpness, calibration_curve, marginal_calibration_curve, Axis, CalibrationCurve, PredictionRecord,
};
use crate::error::{Error, Result};
use crate::estimators::nuts::NutsConfig;
use crate::estimators::{
    estimate_linear, estimate_lsq, estimate_mcmc, prior_init, GaussianBelief, LinearOptions, LsqConfig, McmcConfig,
    PoseProblem, Prior,
};
use crate::geometry::{runway_corners, sample_pose, Attitude, CameraModel, RunwaySpec, Scene};
use crate::kalman::{run_filter, ConstantVelocity};
use crate::noise::NoiseModel;

/// Overrides the worker thread count.
pub const THREADS_ENV: &str = "PPEST_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Lsq,
    Linear,
    Mcmc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Lsq, EstimatorKind::Linear, EstimatorKind::Mcmc];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Lsq => "lsq",
            EstimatorKind::Linear => "linear",
            EstimatorKind::Mcmc => "mcmc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseVariant {
    /// Independent isotropic Gaussian per component.
    Uncorrelated,
    /// Gaussian with equal correlation between matching components of
    /// different corners.
    Correlated,
    /// Two-component scale mixture per component.
    Longtail,
    /// Gaussian with the mixture's second moments.
    Matched,
}

/// Everything a run needs. Loaded from a flat TOML file; missing keys take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Noise that generates the measurements.
    pub noise: NoiseVariant,
    /// Noise the estimators assume; the generating noise when absent.
    pub model_noise: Option<NoiseVariant>,
    pub noise_std: f64,
    pub cross_correlation: f64,
    pub mixture_weight: f64,
    pub mixture_sigma_low: f64,
    pub mixture_sigma_high: f64,
    pub samples: usize,
    pub burnin: usize,
    pub rho_levels: Vec<f64>,
    pub runway_length: f64,
    pub runway_width: f64,
    pub focal_length: f64,
    pub robust_linear: bool,
    pub max_failure_fraction: f64,
    pub bench_ks: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub approach_runs: usize,
    pub approach_start: f64,
    pub approach_end: f64,
    pub approach_speed: f64,
    pub approach_dt: f64,
    pub accel_std: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            trials: 300,
            estimators: EstimatorKind::ALL.to_vec(),
            noise: NoiseVariant::Uncorrelated,
            model_noise: None,
            noise_std: 1.0,
            cross_correlation: 0.7,
            mixture_weight: 0.75,
            mixture_sigma_low: 1.0,
            mixture_sigma_high: 3.0,
            samples: 400,
            burnin: 250,
            rho_levels: CalibrationCurve::default_levels(),
            runway_length: 3500.0,
            runway_width: 60.0,
            focal_length: 3000.0,
            robust_linear: false,
            max_failure_fraction: 0.1,
            bench_ks: vec![100, 300, 500],
            bench_repeats: 30,
            bench_warmup: 3,
            approach_runs: 100,
            approach_start: -6000.0,
            approach_end: -1500.0,
            approach_speed: 70.0,
            approach_dt: 1.0,
            accel_std: 0.5,
            out: PathBuf::from("out"),
        }
    }
}

/// Help text for the configuration file, one line per key.
pub const CONFIG_KEYS_HELP: &str = "\
CONFIG KEYS (flat TOML, all optional):
  seed                 master RNG seed [42]
  trials               number of random poses per suite [300]
  estimators           subset of [\"lsq\", \"linear\", \"mcmc\"] [all]
  noise                generating noise: uncorrelated | correlated | longtail | matched [uncorrelated]
  model_noise          noise assumed by the estimators; same as `noise` when unset
  noise_std            per-component standard deviation in pixels [1.0]
  cross_correlation    correlation between matching components of different corners [0.7]
  mixture_weight       weight of the narrow mixture component [0.75]
  mixture_sigma_low    narrow component standard deviation in pixels [1.0]
  mixture_sigma_high   wide component standard deviation in pixels [3.0]
  samples              LSQ solves / MCMC draws per estimate [400]
  burnin               MCMC warmup iterations [250]
  rho_levels           nominal coverage levels [0.05, 0.10, ..., 0.95]
  runway_length        meters [3500]
  runway_width         meters [60]
  focal_length         pixels [3000]
  robust_linear        center linear propagation on the observed residual [false]
  max_failure_fraction abort when more trials fail per estimator [0.1]
  bench_ks             sample counts to benchmark [100, 300, 500]
  bench_repeats        timed runs per estimator and K [30]
  bench_warmup         untimed runs before timing [3]
  approach_runs        synthetic approaches to filter [100]
  approach_start       first along-track position in meters [-6000]
  approach_end         last along-track position in meters [-1500]
  approach_speed       ground speed in m/s [70]
  approach_dt          seconds between measurements [1]
  accel_std            filter process noise, white acceleration in m/s^2 [0.5]
  out                  output directory [out]";

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.trials == 0 {
            return fail("trials must be at least 1");
        }
        if self.samples < 2 {
            return fail("samples must be at least 2");
        }
        if self.estimators.is_empty() {
            return fail("no estimators selected");
        }
        if self.rho_levels.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return fail("rho_levels must lie in (0, 1)");
        }
        if !(self.noise_std > 0.0) || !(self.focal_length > 0.0) {
            return fail("noise_std and focal_length must be positive");
        }
        if !(self.runway_length > 0.0 && self.runway_width > 0.0) {
            return fail("runway dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return fail("max_failure_fraction must lie in [0, 1]");
        }
        if self.bench_ks.iter().any(|&k| k < 2) || self.bench_repeats == 0 {
            return fail("bench_ks entries must be at least 2 and bench_repeats at least 1");
        }
        if !(self.approach_speed > 0.0 && self.approach_dt > 0.0)
            || self.approach_end <= self.approach_start
            || self.approach_end >= 0.0
        {
            return fail("approach must move forward and stay before the threshold");
        }
        Ok(())
    }

    fn noise_model(&self, variant: NoiseVariant) -> Result<NoiseModel> {
        let var = self.noise_std * self.noise_std;
        match variant {
            NoiseVariant::Uncorrelated => NoiseModel::isotropic(self.noise_std),
            NoiseVariant::Correlated => NoiseModel::cross_corner_correlated(var, self.cross_correlation * var),
            NoiseVariant::Longtail => {
                NoiseModel::long_tail(self.mixture_weight, self.mixture_sigma_low, self.mixture_sigma_high)
            }
            NoiseVariant::Matched => {
                let mix = NoiseModel::long_tail(self.mixture_weight, self.mixture_sigma_low, self.mixture_sigma_high)?;
                NoiseModel::correlated(mix.covariance().matrix)
            }
        }
    }

    pub fn generation_noise(&self) -> Result<NoiseModel> {
        self.noise_model(self.noise)
    }

    pub fn estimator_noise(&self) -> Result<NoiseModel> {
        self.noise_model(self.model_noise.unwrap_or(self.noise))
    }

    pub fn runway(&self) -> RunwaySpec {
        RunwaySpec {
            length: self.runway_length,
            width: self.runway_width,
        }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel {
            focal_length: self.focal_length,
        }
    }

    fn lsq_config(&self, samples: usize) -> LsqConfig {
        LsqConfig {
            samples,
            ..LsqConfig::default()
        }
    }

    fn mcmc_config(&self, samples: usize) -> McmcConfig {
        McmcConfig {
            sampler: NutsConfig {
                samples,
                warmup: self.burnin,
                ..NutsConfig::default()
            },
            prior_only: false,
        }
    }
}

/// Worker pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={v} is not a count")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Independent stream per (trial, purpose) so results do not depend on
/// scheduling or on which estimators run.
fn stream_rng(seed: u64, trial: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 * 8 + purpose);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutcome {
    pub estimator: EstimatorKind,
    pub belief: std::result::Result<GaussianBelief, String>,
    pub wall_ms: f64,
    /// Discarded LSQ draws or divergent MCMC transitions.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub truth: Vector3<f64>,
    pub attitude: Attitude,
    pub outcomes: Vec<EstimatorOutcome>,
}

/// One random pose with its noisy measurement.
pub fn make_scenario(
    cfg: &ExperimentConfig,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<(Vector3<f64>, PoseProblem)> {
    let pose = sample_pose(rng);
    let scene = Scene::new(runway_corners(&cfg.runway()), cfg.camera(), pose.attitude);
    let y = scene.project_all(&pose.position)? + noise.sample(rng).epsilon;
    Ok((pose.position, PoseProblem::new(scene, y)))
}

fn run_estimator(
    kind: EstimatorKind,
    cfg: &ExperimentConfig,
    samples: usize,
    problem: &PoseProblem,
    noise: &NoiseModel,
    prior: &Prior,
    rng: &mut ChaCha8Rng,
) -> (Result<GaussianBelief>, usize) {
    match kind {
        EstimatorKind::Linear => {
            let opts = LinearOptions {
                robust: cfg.robust_linear,
                ..Default::default()
            };
            let r = prior_init(problem, prior, rng).and_then(|init| estimate_linear(problem, noise, &init, &opts));
            (r.map(|e| e.belief), 0)
        }
        EstimatorKind::Lsq => match estimate_lsq(problem, noise, prior, &cfg.lsq_config(samples), rng) {
            Ok(e) => (Ok(e.belief), e.discarded),
            Err(e) => (Err(e), 0),
        },
        EstimatorKind::Mcmc => match estimate_mcmc(problem, noise, prior, &cfg.mcmc_config(samples), rng) {
            Ok(e) => (Ok(e.belief), e.divergent),
            Err(e) => (Err(e), 0),
        },
    }
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let generation = cfg.generation_noise()?;
    let model = cfg.estimator_noise()?;
    let (truth, problem) = make_scenario(cfg, &generation, &mut stream_rng(cfg.seed, trial, 0))?;
    let prior = Prior::around(truth);

    let outcomes = cfg
        .estimators
        .iter()
        .map(|&kind| {
            let mut rng = stream_rng(cfg.seed, trial, 1 + kind as u64);
            let start = Instant::now();
            let (belief, rejected) = run_estimator(kind, cfg, cfg.samples, &problem, &model, &prior, &mut rng);
            EstimatorOutcome {
                estimator: kind,
                belief: belief.map_err(|e| e.to_string()),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                rejected,
            }
        })
        .collect();
    Ok(TrialResult {
        trial,
        truth,
        attitude: problem.scene.attitude,
        outcomes,
    })
}

/// Calibration curves of one estimator: joint, then one per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCalibration {
    pub estimator: EstimatorKind,
    pub joint: CalibrationCurve,
    pub marginals: [CalibrationCurve; 3],
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub trials: Vec<TrialResult>,
    pub calibration: Vec<EstimatorCalibration>,
}

impl SuiteReport {
    pub fn calibration_of(&self, kind: EstimatorKind) -> Option<&EstimatorCalibration> {
        self.calibration.iter().find(|c| c.estimator == kind)
    }

    pub fn sharpness_of(&self, kind: EstimatorKind) -> Vec<f64> {
        self.trials
            .iter()
            .flat_map(|t| t.outcomes.iter())
            .filter(|o| o.estimator == kind)
            .filter_map(|o| o.belief.as_ref().ok().map(belief_sharpness))
            .collect()
    }

    pub fn mean_wall_ms(&self, kind: EstimatorKind) -> f64 {
        let times: Vec<f64> = self
            .trials
            .iter()
            .flat_map(|t| t.outcomes.iter())
            .filter(|o| o.estimator == kind)
            .map(|o| o.wall_ms)
            .collect();
        times.iter().sum::<f64>() / times.len().max(1) as f64
    }
}

fn curves_for(records: &[PredictionRecord], levels: &[f64]) -> Result<(CalibrationCurve, [CalibrationCurve; 3])> {
    let joint = calibration_curve(records, levels)?;
    let marginals = [
        marginal_calibration_curve(records, 0, levels)?,
        marginal_calibration_curve(records, 1, levels)?,
        marginal_calibration_curve(records, 2, levels)?,
    ];
    Ok((joint, marginals))
}

pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    // fail fast on a bad noise configuration
    cfg.generation_noise()?;
    cfg.estimator_noise()?;
    let pool = thread_pool()?;
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, t))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut calibration = Vec::new();
    for &kind in &cfg.estimators {
        let mut records = Vec::new();
        let mut failures = 0;
        for t in &trials {
            for o in t.outcomes.iter().filter(|o| o.estimator == kind) {
                match &o.belief {
                    Ok(b) => records.push(PredictionRecord::from_belief(b, &t.truth)),
                    Err(_) => failures += 1,
                }
            }
        }
        if failures as f64 > cfg.max_failure_fraction * cfg.trials as f64 {
            return Err(Error::TooManyFailedTrials {
                failed: failures,
                total: cfg.trials,
            });
        }
        let (joint, marginals) = curves_for(&records, &cfg.rho_levels)?;
        calibration.push(EstimatorCalibration {
            estimator: kind,
            joint,
            marginals,
            failures,
        });
    }
    Ok(SuiteReport { trials, calibration })
}

/// The long-tail experiment: mixture noise, every estimator told the truth
/// about it.
pub fn longtail_config(base: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        noise: NoiseVariant::Longtail,
        model_noise: None,
        ..base.clone()
    }
}

pub fn run_longtail_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    run_suite(&longtail_config(cfg))
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(name))?)
}

fn write_calibration_rows(
    w: &mut csv::Writer<fs::File>,
    name: &str,
    joint: &CalibrationCurve,
    marginals: &[CalibrationCurve; 3],
) -> Result<()> {
    let scopes = std::iter::once(("joint", joint)).chain(Axis::ALL.iter().map(|a| (a.name(), &marginals[a.index()])));
    for (scope, curve) in scopes {
        for (rho, cov) in curve.levels.iter().zip(&curve.coverage) {
            w.write_record([name, scope, &rho.to_string(), &cov.to_string(), &curve.n.to_string()])?;
        }
    }
    Ok(())
}

pub fn write_suite_outputs(report: &SuiteReport, dir: &Path) -> Result<()> {
    let mut w = csv_writer(dir, "calibration.csv")?;
    w.write_record(["estimator", "scope", "rho", "coverage", "n"])?;
    for c in &report.calibration {
        write_calibration_rows(&mut w, c.estimator.name(), &c.joint, &c.marginals)?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "sharpness.csv")?;
    w.write_record(["estimator", "trial", "sharpness_m3"])?;
    for c in &report.calibration {
        for t in &report.trials {
            for o in t.outcomes.iter().filter(|o| o.estimator == c.estimator) {
                if let Ok(b) = &o.belief {
                    w.write_record([
                        c.estimator.name(),
                        &t.trial.to_string(),
                        &belief_sharpness(b).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv_writer(dir, "trials.csv")?;
    w.write_record([
        "trial",
        "estimator",
        "status",
        "rejected",
        "truth_alongtrack",
        "truth_crosstrack",
        "truth_altitude",
        "mean_alongtrack",
        "mean_crosstrack",
        "mean_altitude",
        "cov_aa",
        "cov_ac",
        "cov_ah",
        "cov_cc",
        "cov_ch",
        "cov_hh",
    ])?;
    for t in &report.trials {
        for o in &t.outcomes {
            let mut row = vec![t.trial.to_string(), o.estimator.name().to_string()];
            match &o.belief {
                Ok(_) => row.push("ok".into()),
                Err(e) => row.push(e.clone()),
            }
            row.push(o.rejected.to_string());
            row.extend(t.truth.iter().map(|v| v.to_string()));
            match &o.belief {
                Ok(b) => {
                    row.extend(b.mean.iter().map(|v| v.to_string()));
                    let c = &b.covariance;
                    for (i, j) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
                        row.push(c[(i, j)].to_string());
                    }
                }
                Err(_) => row.extend(std::iter::repeat_n(String::new(), 9)),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pass/fail outcome of one acceptance-style check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Every estimator's joint curve within `tol` of the diagonal.
pub fn check_calibrated(report: &SuiteReport, tol: f64) -> Vec<Check> {
    report
        .calibration
        .iter()
        .map(|c| {
            let dev = c.joint.max_deviation();
            Check::new(
                format!("{} joint calibration", c.estimator.name()),
                dev <= tol,
                format!("max |coverage - rho| = {dev:.3} (limit {tol})"),
            )
        })
        .collect()
}

/// Every estimator overconfident at `rho`: coverage at most `limit`.
pub fn check_overconfident(report: &SuiteReport, rho: f64, limit: f64) -> Vec<Check> {
    report
        .calibration
        .iter()
        .map(|c| {
            let cov = c.joint.coverage_at(rho).unwrap_or(f64::NAN);
            Check::new(
                format!("{} overconfident under mis-modeled noise", c.estimator.name()),
                cov <= limit,
                format!("coverage at rho={rho} is {cov:.3} (limit {limit})"),
            )
        })
        .collect()
}

pub fn check_longtail(report: &SuiteReport) -> Vec<Check> {
    let mut checks = Vec::new();
    for c in &report.calibration {
        let dev = c.joint.max_deviation();
        checks.push(match c.estimator {
            EstimatorKind::Linear => Check::new(
                "linear miscalibrated under long-tail noise",
                dev > 0.10,
                format!("max |coverage - rho| = {dev:.3} (must exceed 0.10)"),
            ),
            k => Check::new(
                format!("{} calibrated under long-tail noise", k.name()),
                dev <= 0.07,
                format!("max |coverage - rho| = {dev:.3} (limit 0.07)"),
            ),
        });
    }
    let selected = |k| report.calibration_of(k).is_some();
    if selected(EstimatorKind::Mcmc) && selected(EstimatorKind::Lsq) {
        let m = median(&report.sharpness_of(EstimatorKind::Mcmc));
        let l = median(&report.sharpness_of(EstimatorKind::Lsq));
        checks.push(Check::new(
            "mcmc sharper than lsq",
            m < l,
            format!("median sharpness mcmc {m:.4e} m^3, lsq {l:.4e} m^3"),
        ));
    }
    checks
}

/// Checks matching the configured noise setup: calibration when the model
/// is right, overconfidence when correlation is ignored.
pub fn suite_checks(cfg: &ExperimentConfig, report: &SuiteReport) -> Vec<Check> {
    let model = cfg.model_noise.unwrap_or(cfg.noise);
    match (cfg.noise, model) {
        (NoiseVariant::Correlated, NoiseVariant::Uncorrelated) => check_overconfident(report, 0.9, 0.82),
        (NoiseVariant::Longtail, NoiseVariant::Longtail) => check_longtail(report),
        (g, m) if g == m => check_calibrated(report, 0.07),
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub estimator: EstimatorKind,
    pub k: usize,
    pub median_ms: f64,
    pub rel_sigma: f64,
}

fn time_stats(times: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (median(times), var.sqrt() / mean)
}

/// Sequential timing of every selected estimator at each K. Each repeat uses
/// a fresh scenario; the same scenarios are reused across K.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let generation = cfg.generation_noise()?;
    let model = cfg.estimator_noise()?;
    let scenarios = (0..cfg.bench_repeats + cfg.bench_warmup)
        .map(|i| make_scenario(cfg, &generation, &mut stream_rng(cfg.seed, i, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &kind in &cfg.estimators {
        for &k in &cfg.bench_ks {
            let mut times = Vec::with_capacity(cfg.bench_repeats);
            for (i, (truth, problem)) in scenarios.iter().enumerate() {
                let prior = Prior::around(*truth);
                let mut rng = stream_rng(cfg.seed, i, 1 + kind as u64);
                let start = Instant::now();
                let (belief, _) = run_estimator(kind, cfg, k, problem, &model, &prior, &mut rng);
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(&belief);
                if i >= cfg.bench_warmup {
                    times.push(elapsed);
                }
            }
            let (median_ms, rel_sigma) = time_stats(&times);
            rows.push(BenchRow {
                estimator: kind,
                k,
                median_ms,
                rel_sigma,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], dir: &Path) -> Result<()> {
    let mut w = csv_writer(dir, "bench.csv")?;
    w.write_record(["estimator", "K", "median_ms", "rel_sigma"])?;
    for r in rows {
        w.write_record([
            r.estimator.name(),
            &r.k.to_string(),
            &r.median_ms.to_string(),
            &r.rel_sigma.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return if syy == 0.0 { 1.0 } else { 0.0 };
    }
    sxy * sxy / (sxx * syy)
}

pub fn check_benchmark(rows: &[BenchRow]) -> Vec<Check> {
    let of = |kind| -> Vec<&BenchRow> { rows.iter().filter(|r| r.estimator == kind).collect() };
    let lin = of(EstimatorKind::Linear);
    let lsq = of(EstimatorKind::Lsq);
    let mut checks = Vec::new();
    if let (Some(l), Some(s)) = (lin.iter().find(|r| r.k == 100), lsq.iter().find(|r| r.k == 100)) {
        let speedup = s.median_ms / l.median_ms;
        checks.push(Check::new(
            "linear at least 50x faster than lsq(K=100)",
            speedup >= 50.0,
            format!(
                "lsq {:.3} ms / linear {:.4} ms = {speedup:.1}x",
                s.median_ms, l.median_ms
            ),
        ));
    }
    if lsq.len() >= 3 {
        let x: Vec<f64> = lsq.iter().map(|r| r.k as f64).collect();
        let y: Vec<f64> = lsq.iter().map(|r| r.median_ms).collect();
        let r2 = linear_r2(&x, &y);
        checks.push(Check::new(
            "lsq runtime linear in K",
            r2 >= 0.95,
            format!("r^2 = {r2:.4}"),
        ));
    }
    if lin.len() >= 2 {
        let t: Vec<f64> = lin.iter().map(|r| r.median_ms).collect();
        let spread = t.iter().cloned().fold(f64::MIN, f64::max) / t.iter().cloned().fold(f64::MAX, f64::min);
        checks.push(Check::new(
            "linear runtime independent of K",
            spread <= 1.5,
            format!("max/min = {spread:.3}"),
        ));
    }
    checks
}

/// One filtered approach.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachTrack {
    pub times: Vec<f64>,
    pub truth: Vec<Vector3<f64>>,
    pub raw: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproachReport {
    pub tracks: Vec<ApproachTrack>,
    pub raw_joint: CalibrationCurve,
    pub raw_marginals: [CalibrationCurve; 3],
    pub filtered_joint: CalibrationCurve,
    pub filtered_marginals: [CalibrationCurve; 3],
    /// Median over all steps after the first of filtered / raw sharpness.
    pub median_sharpness_ratio: f64,
}

/// Straight-in approach toward the threshold with per-step linear beliefs
/// under fresh uncorrelated noise, then filtered.
pub fn simulate_approach(cfg: &ExperimentConfig, run: usize, model: &ConstantVelocity) -> Result<ApproachTrack> {
    let noise = NoiseModel::isotropic(cfg.noise_std)?;
    let mut rng = stream_rng(cfg.seed, run, 4);
    let start = sample_pose(&mut rng);
    let dir = start.position / start.position.x.abs();
    let scene = Scene::new(runway_corners(&cfg.runway()), cfg.camera(), start.attitude);
    let steps = ((cfg.approach_end - cfg.approach_start) / (cfg.approach_speed * cfg.approach_dt)).floor() as usize + 1;

    let mut track = ApproachTrack {
        times: Vec::with_capacity(steps),
        truth: Vec::with_capacity(steps),
        raw: Vec::with_capacity(steps),
        filtered: Vec::new(),
    };
    let mut init: Option<Vector3<f64>> = None;
    for s in 0..steps {
        let t = s as f64 * cfg.approach_dt;
        let along = cfg.approach_start + cfg.approach_speed * t;
        let truth = dir * along.abs();
        let y = scene.project_all(&truth)? + noise.sample(&mut rng).epsilon;
        let problem = PoseProblem::new(scene, y);
        let guess = match init {
            Some(g) => g,
            None => prior_init(&problem, &Prior::around(truth), &mut rng)?,
        };
        let est = estimate_linear(&problem, &noise, &guess, &LinearOptions::default())?;
        init = Some(est.belief.mean);
        track.times.push(t);
        track.truth.push(truth);
        track.raw.push(est.belief);
    }
    track.filtered = run_filter(&track.raw, model, None)?;
    Ok(track)
}

pub fn run_approach(cfg: &ExperimentConfig) -> Result<ApproachReport> {
    run_approach_with(cfg, cfg.accel_std)
}

/// As [`run_approach`] with the filter's acceleration noise overridden.
pub fn run_approach_with(cfg: &ExperimentConfig, accel_std: f64) -> Result<ApproachReport> {
    cfg.validate()?;
    let model = ConstantVelocity::constant_velocity(cfg.approach_dt, accel_std)?;
    let pool = thread_pool()?;
    let tracks: Vec<ApproachTrack> = pool.install(|| {
        (0..cfg.approach_runs)
            .into_par_iter()
            .map(|r| simulate_approach(cfg, r, &model))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut raw = Vec::new();
    let mut filtered = Vec::new();
    let mut ratios = Vec::new();
    for tr in &tracks {
        for (i, truth) in tr.truth.iter().enumerate() {
            raw.push(PredictionRecord::from_belief(&tr.raw[i], truth));
            filtered.push(PredictionRecord::from_belief(&tr.filtered[i], truth));
            if i > 0 {
                ratios.push(belief_sharpness(&tr.filtered[i]) / belief_sharpness(&tr.raw[i]));
            }
        }
    }
    let (raw_joint, raw_marginals) = curves_for(&raw, &cfg.rho_levels)?;
    let (filtered_joint, filtered_marginals) = curves_for(&filtered, &cfg.rho_levels)?;
    Ok(ApproachReport {
        tracks,
        raw_joint,
        raw_marginals,
        filtered_joint,
        filtered_marginals,
        median_sharpness_ratio: median(&ratios),
    })
}

pub fn check_approach(report: &ApproachReport) -> Vec<Check> {
    let mut checks = vec![Check::new(
        "filtered sharpness at most 0.6x unfiltered",
        report.median_sharpness_ratio <= 0.6,
        format!("median ratio {:.3}", report.median_sharpness_ratio),
    )];
    for axis in Axis::ALL {
        let dev = report.filtered_marginals[axis.index()].max_deviation();
        checks.push(Check::new(
            format!("filtered {} marginal calibration", axis.name()),
            dev <= 0.10,
            format!("max |coverage - rho| = {dev:.3} (limit 0.10)"),
        ));
    }
    checks
}

/// `approach.csv` for the first track, `calibration.csv` over all tracks.
pub fn write_approach_outputs(report: &ApproachReport, dir: &Path) -> Result<()> {
    let mut w = csv_writer(dir, "approach.csv")?;
    w.write_record(["t_s", "axis", "mu", "sigma", "sharpness_raw", "sharpness_filtered"])?;
    if let Some(tr) = report.tracks.first() {
        for i in 0..tr.times.len() {
            let raw = belief_sharpness(&tr.raw[i]).to_string();
            let filt = belief_sharpness(&tr.filtered[i]).to_string();
            for axis in Axis::ALL {
                let k = axis.index();
                let b = &tr.filtered[i];
                w.write_record([
                    &tr.times[i].to_string(),
                    axis.name(),
                    &b.mean[k].to_string(),
                    &b.covariance[(k, k)].sqrt().to_string(),
                    &raw,
                    &filt,
                ])?;
            }
        }
    }
    w.flush()?;
    let mut w = csv_writer(dir, "calibration.csv")?;
    w.write_record(["estimator", "scope", "rho", "coverage", "n"])?;
    write_calibration_rows(&mut w, "linear", &report.raw_joint, &report.raw_marginals)?;
    write_calibration_rows(&mut w, "filtered", &report.filtered_joint, &report.filtered_marginals)?;
    w.flush()?;
    Ok(())
}

/// Quick internal consistency checks that need no long simulation.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    use crate::calibration::{sharpness, MvNormal};
    use crate::nlsq::{whiten, ResidualProblem, Weighting};
    use crate::Matrix8;
    use std::f64::consts::PI;

    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // calibration on truths drawn from the beliefs themselves
    let n = 10_000;
    for d in 1..=3usize {
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let mean = nalgebra::DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
            let l = cov.clone().cholesky().ok_or(Error::EigenFailure)?.l();
            let z = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let truth = &mean + l * z;
            records.push(PredictionRecord::new(MvNormal::new(mean, cov), truth));
        }
        let curve = calibration_curve(&records, &CalibrationCurve::default_levels())?;
        let worst = curve
            .levels
            .iter()
            .zip(&curve.coverage)
            .map(|(r, c)| (c - r).abs() / (3.0 * (r * (1.0 - r) / n as f64).sqrt()))
            .fold(0.0, f64::max);
        checks.push(Check::new(
            format!("self-consistent calibration d={d}"),
            worst <= 1.0,
            format!("worst deviation {worst:.2} of the 3-sigma binomial band"),
        ));
    }

    let s1 = sharpness(&DMatrix::from_element(1, 1, 4.0));
    let s2 = sharpness(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0])));
    let s3 = sharpness(&DMatrix::identity(3, 3));
    let ok =
        (s1 - 4.0).abs() <= 1e-12 && (s2 - 6.0 * PI).abs() <= 1e-12 * 6.0 * PI && (s3 - 4.0 * PI / 3.0).abs() <= 1e-12;
    checks.push(Check::new("closed-form sharpness", ok, format!("{s1}, {s2}, {s3}")));

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = Matrix8::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let w = a * a.transpose() + Matrix8::identity() * 0.1;
        let (_, problem) = make_scenario(&ExperimentConfig::default(), &NoiseModel::isotropic(1.0)?, &mut rng)?;
        let rp = ResidualProblem::new(problem.scene, problem.measurements, Weighting::Weight(w));
        let beta = sample_pose(&mut rng).position;
        let r = rp.residuals(&beta)?;
        let direct = r.dot(&(w * r));
        let white = whiten(&rp)?.objective(&beta)?;
        worst = worst.max((white - direct).abs() / direct);
    }
    checks.push(Check::new(
        "whitening equivalence",
        worst <= 1e-10,
        format!("worst relative error {worst:.2e}"),
    ));

    let mut worst: f64 = 0.0;
    let noise = NoiseModel::isotropic(1.0)?;
    for _ in 0..50 {
        let (truth, problem) = make_scenario(&ExperimentConfig::default(), &noise, &mut rng)?;
        let beta = truth
            + Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
        let j = problem.scene.jacobian(&beta)?;
        let fd = problem.scene.jacobian_fd(&beta)?;
        worst = worst.max((j - fd).norm() / j.norm());
    }
    checks.push(Check::new(
        "projection jacobian",
        worst <= 1e-5,
        format!("worst relative error {worst:.2e}"),
    ));
    Ok(checks)
}

/// Writes `checks` one per line and reports whether all passed.
pub fn report_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{}", c.line());
    }
    checks.iter().all(|c| c.passed)
}
