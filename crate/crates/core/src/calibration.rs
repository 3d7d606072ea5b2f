//! Calibration and sharpness of multivariate normal predictions.
//!
//! A prediction `N(μ, Σ)` is rotated into the eigenbasis of `Σ`, where it
//! factorizes into `d` independent 1-D normals. The level-`ρ` prediction
//! set is the product of the centered 1-D sets at level `ρ^{1/d}`, so a
//! point `ξ` is inside iff every standardized eigen-coordinate satisfies
//! `|ξ̃ₗ/σ̃ₗ| < Φ⁻¹(ρ^{1/d}/2 + 1/2)`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::GaussianBelief;

/// Multivariate normal of any dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MvNormal {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MvNormal {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        assert_eq!(covariance.nrows(), mean.len());
        assert_eq!(covariance.ncols(), mean.len());
        Self { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// One-dimensional marginal along `axis`.
    pub fn marginal(&self, axis: usize) -> MvNormal {
        MvNormal::new(
            DVector::from_element(1, self.mean[axis]),
            DMatrix::from_element(1, 1, self.covariance[(axis, axis)]),
        )
    }
}

impl From<&GaussianBelief> for MvNormal {
    fn from(b: &GaussianBelief) -> Self {
        MvNormal::new(
            DVector::from_column_slice(b.mean.as_slice()),
            DMatrix::from_column_slice(3, 3, b.covariance.as_slice()),
        )
    }
}

/// Position axes of a pose belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Alongtrack,
    Crosstrack,
    Altitude,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Alongtrack, Axis::Crosstrack, Axis::Altitude];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Alongtrack => "alongtrack",
            Axis::Crosstrack => "crosstrack",
            Axis::Altitude => "altitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub belief: MvNormal,
    pub truth: DVector<f64>,
}

impl PredictionRecord {
    pub fn new(belief: MvNormal, truth: DVector<f64>) -> Self {
        assert_eq!(belief.dim(), truth.len(), "belief and truth dimensions differ");
        Self { belief, truth }
    }

    pub fn from_belief(belief: &GaussianBelief, truth: &nalgebra::Vector3<f64>) -> Self {
        Self::new(belief.into(), DVector::from_column_slice(truth.as_slice()))
    }

    pub fn marginal(&self, axis: usize) -> PredictionRecord {
        PredictionRecord::new(self.belief.marginal(axis), DVector::from_element(1, self.truth[axis]))
    }
}

/// Eigenvalues in descending order and matching unit eigenvectors (as
/// columns), each oriented so its first nonzero component is positive.
pub fn diagonalize(covariance: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = covariance.nrows();
    if !covariance.iter().all(|v| v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    let eig = covariance.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-300) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(col, &v);
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    Ok((values, vectors))
}

/// `|ξ̃ₗ / σ̃ₗ|` for every eigen-dimension of `belief`.
pub fn standardized_deviations(belief: &MvNormal, xi: &DVector<f64>) -> Result<DVector<f64>> {
    let (mut values, mut vectors) = diagonalize(&belief.covariance)?;
    if values.iter().any(|v| *v <= 0.0) {
        let ridge = 1e-12 * belief.covariance.trace().abs().max(f64::MIN_POSITIVE);
        let d = belief.dim();
        (values, vectors) = diagonalize(&(&belief.covariance + DMatrix::identity(d, d) * ridge))?;
        if values.iter().any(|v| *v <= 0.0) {
            return Err(Error::EigenFailure);
        }
    }
    let rotated = vectors.transpose() * (xi - &belief.mean);
    Ok(rotated.zip_map(&values, |x, v| (x / v.sqrt()).abs()))
}

/// Half-width, in standard deviations, of each 1-D centered set at joint
/// level `rho` in `dim` dimensions.
pub fn per_dimension_threshold(rho: f64, dim: usize) -> f64 {
    normal_quantile(rho.powf(1.0 / dim as f64) / 2.0 + 0.5)
}

pub fn point_in_pset(belief: &MvNormal, xi: &DVector<f64>, rho: f64) -> Result<bool> {
    let z = standardized_deviations(belief, xi)?;
    Ok(z.max() < per_dimension_threshold(rho, belief.dim()))
}

/// Fraction of records whose truth falls in the level-`rho` set.
pub fn compute_calibration(records: &[PredictionRecord], rho: f64) -> Result<f64> {
    Ok(calibration_curve(records, &[rho])?.coverage[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub n: usize,
}

impl CalibrationCurve {
    /// `{0.05, 0.10, …, 0.95}`.
    pub fn default_levels() -> Vec<f64> {
        (1..20).map(|i| i as f64 * 0.05).collect()
    }

    /// Largest `|coverage − ρ|`.
    pub fn max_deviation(&self) -> f64 {
        self.signed_deviations().map(f64::abs).fold(0.0, f64::max)
    }

    /// `coverage − ρ` for each level.
    pub fn signed_deviations(&self) -> impl Iterator<Item = f64> + '_ {
        self.coverage.iter().zip(&self.levels).map(|(c, r)| c - r)
    }

    pub fn coverage_at(&self, rho: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|l| (l - rho).abs() < 1e-9)
            .map(|i| self.coverage[i])
    }

    /// Writes `rho,coverage,n` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rho", "coverage", "n"])?;
        for (r, c) in self.levels.iter().zip(&self.coverage) {
            w.write_record([r.to_string(), c.to_string(), self.n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn calibration_curve(records: &[PredictionRecord], levels: &[f64]) -> Result<CalibrationCurve> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let worst: Vec<(f64, usize)> = records
        .iter()
        .map(|r| Ok((standardized_deviations(&r.belief, &r.truth)?.max(), r.belief.dim())))
        .collect::<Result<_>>()?;
    let coverage = levels
        .iter()
        .map(|&rho| {
            let inside = worst
                .iter()
                .filter(|(z, d)| *z < per_dimension_threshold(rho, *d))
                .count();
            inside as f64 / records.len() as f64
        })
        .collect();
    Ok(CalibrationCurve {
        levels: levels.to_vec(),
        coverage,
        n: records.len(),
    })
}

pub fn marginal_calibration_curve(
    records: &[PredictionRecord],
    axis: usize,
    levels: &[f64],
) -> Result<CalibrationCurve> {
    let marginals: Vec<_> = records.iter().map(|r| r.marginal(axis)).collect();
    calibration_curve(&marginals, levels)
}

/// Volume of the unit ball in `d` dimensions, `π^{d/2} / Γ(d/2 + 1)`.
pub fn unit_ball_volume(d: usize) -> f64 {
    // V₀ = 1, V₁ = 2, V_d = 2π/d · V_{d−2}
    let mut v = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = 2 + d % 2;
    while k <= d {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}

/// Hypervolume of the one-standard-deviation ellipsoid of `covariance`.
pub fn sharpness(covariance: &DMatrix<f64>) -> f64 {
    let d = covariance.nrows();
    let eig = covariance.clone().symmetric_eigenvalues();
    unit_ball_volume(d) * eig.iter().map(|v| v.max(0.0).sqrt()).product::<f64>()
}

pub fn belief_sharpness(belief: &GaussianBelief) -> f64 {
    sharpness(&MvNormal::from(belief).covariance)
}

/// Standard normal quantile, Wichura's AS241 (PPND16); relative accuracy
/// about 1e-16 over (0, 1).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r + 6.726_577_092_700_87e4) * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den =
            ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r + 1.519_866_656_361_645_7e-2) * r
                + 1.481_039_764_274_800_8e-1)
                * r
                + 6.897_673_349_851e-1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_758_8)
                * r
                + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den =
            ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5) * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 1.369_298_809_227_358e-1)
                * r
                + 5.998_322_065_558_88e-1)
                * r
                + 1.0;
        num / den
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}
