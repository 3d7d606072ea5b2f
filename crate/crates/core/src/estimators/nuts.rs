//! No-U-Turn sampler with multinomial trajectory sampling, a dense metric
//! and dual-averaging step-size adaptation.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Energy error beyond which a trajectory is declared divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Unnormalized log density with gradient. Return a non-finite value where
/// the density is undefined; the sampler treats it as a divergence.
pub trait LogDensity<const D: usize> {
    fn log_density_and_gradient(&self, x: &SVector<f64, D>) -> (f64, SVector<f64, D>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutsConfig {
    pub samples: usize,
    pub warmup: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    /// Adapt a dense metric in windows during warmup.
    pub adapt_metric: bool,
    pub max_divergent_fraction: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            samples: 400,
            warmup: 250,
            max_depth: 10,
            target_accept: 0.65,
            adapt_metric: true,
            max_divergent_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NutsOutput<const D: usize> {
    pub draws: Vec<SVector<f64, D>>,
    pub step_size: f64,
    pub inverse_metric: SMatrix<f64, D, D>,
    /// Divergent transitions after warmup.
    pub divergent: usize,
    pub mean_accept: f64,
    pub leapfrog_steps: usize,
}

#[derive(Debug, Clone, Copy)]
struct Point<const D: usize> {
    q: SVector<f64, D>,
    p: SVector<f64, D>,
    p_sharp: SVector<f64, D>,
    logp: f64,
    grad: SVector<f64, D>,
}

struct Tree<const D: usize> {
    /// Earliest and latest points in integration time.
    minus: Point<D>,
    plus: Point<D>,
    proposal: Point<D>,
    rho: SVector<f64, D>,
    log_weight: f64,
    turning: bool,
    divergent: bool,
    sum_accept: f64,
    leapfrogs: usize,
}

struct Hamiltonian<'a, const D: usize, L> {
    target: &'a L,
    inverse_metric: SMatrix<f64, D, D>,
    /// Lower Cholesky factor of the inverse metric.
    chol: SMatrix<f64, D, D>,
}

impl<'a, const D: usize, L: LogDensity<D>> Hamiltonian<'a, D, L> {
    fn new(target: &'a L, inverse_metric: SMatrix<f64, D, D>) -> Result<Self> {
        let chol = inverse_metric
            .cholesky()
            .ok_or(Error::FactorizationFailed("metric is not positive definite"))?
            .l();
        Ok(Self {
            target,
            inverse_metric,
            chol,
        })
    }

    fn point(&self, q: SVector<f64, D>, p: SVector<f64, D>) -> Point<D> {
        let (logp, grad) = self.target.log_density_and_gradient(&q);
        Point {
            q,
            p,
            p_sharp: self.inverse_metric * p,
            logp,
            grad,
        }
    }

    /// Momentum with covariance `M = inverse_metric⁻¹`.
    fn refresh<R: Rng + ?Sized>(&self, at: &Point<D>, rng: &mut R) -> Point<D> {
        let z = SVector::<f64, D>::from_fn(|_, _| rng.sample(StandardNormal));
        let p = self
            .chol
            .transpose()
            .solve_upper_triangular(&z)
            .expect("cholesky factor is nonsingular");
        Point {
            p,
            p_sharp: self.inverse_metric * p,
            ..*at
        }
    }

    fn energy(&self, pt: &Point<D>) -> f64 {
        -pt.logp + 0.5 * pt.p.dot(&pt.p_sharp)
    }

    fn leapfrog(&self, pt: &Point<D>, eps: f64) -> Point<D> {
        let p_half = pt.p + pt.grad * (0.5 * eps);
        let q = pt.q + self.inverse_metric * p_half * eps;
        let (logp, grad) = self.target.log_density_and_gradient(&q);
        let p = p_half + grad * (0.5 * eps);
        Point {
            q,
            p,
            p_sharp: self.inverse_metric * p,
            logp,
            grad,
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn turning<const D: usize>(a: &SVector<f64, D>, b: &SVector<f64, D>, rho: &SVector<f64, D>) -> bool {
    !(a.dot(rho) > 0.0 && b.dot(rho) > 0.0)
}

/// Joins two adjacent valid trees; `early` precedes `late` in integration
/// time. Proposal selection is left to the caller.
fn join<const D: usize>(early: &Tree<D>, late: &Tree<D>) -> (SVector<f64, D>, bool) {
    let rho = early.rho + late.rho;
    let turn = turning(&early.minus.p_sharp, &late.plus.p_sharp, &rho)
        || turning(&early.minus.p_sharp, &late.minus.p_sharp, &(early.rho + late.minus.p))
        || turning(&early.plus.p_sharp, &late.plus.p_sharp, &(early.plus.p + late.rho));
    (rho, turn)
}

fn build_tree<const D: usize, L: LogDensity<D>, R: Rng + ?Sized>(
    ham: &Hamiltonian<'_, D, L>,
    edge: &Point<D>,
    eps: f64,
    depth: usize,
    h0: f64,
    rng: &mut R,
) -> Tree<D> {
    if depth == 0 {
        let pt = ham.leapfrog(edge, eps);
        let h = ham.energy(&pt);
        let h = if h.is_finite() && pt.grad.iter().all(|g| g.is_finite()) {
            h
        } else {
            f64::INFINITY
        };
        let divergent = h - h0 > MAX_ENERGY_ERROR;
        let log_weight = if divergent { f64::NEG_INFINITY } else { h0 - h };
        return Tree {
            minus: pt,
            plus: pt,
            proposal: pt,
            rho: pt.p,
            log_weight,
            turning: false,
            divergent,
            sum_accept: (h0 - h).exp().min(1.0),
            leapfrogs: 1,
        };
    }
    let first = build_tree(ham, edge, eps, depth - 1, h0, rng);
    if first.turning || first.divergent {
        return first;
    }
    let outer = if eps > 0.0 { &first.plus } else { &first.minus };
    let second = build_tree(ham, outer, eps, depth - 1, h0, rng);
    let sum_accept = first.sum_accept + second.sum_accept;
    let leapfrogs = first.leapfrogs + second.leapfrogs;
    if second.turning || second.divergent {
        return Tree {
            sum_accept,
            leapfrogs,
            ..second
        };
    }
    let log_weight = log_add_exp(first.log_weight, second.log_weight);
    let take_second = rng.random::<f64>().ln() < second.log_weight - log_weight;
    let proposal = if take_second { second.proposal } else { first.proposal };
    let (early, late) = if eps > 0.0 {
        (&first, &second)
    } else {
        (&second, &first)
    };
    let (rho, turn) = join(early, late);
    Tree {
        minus: early.minus,
        plus: late.plus,
        proposal,
        rho,
        log_weight,
        turning: turn,
        divergent: false,
        sum_accept,
        leapfrogs,
    }
}

struct Transition<const D: usize> {
    point: Point<D>,
    accept: f64,
    divergent: bool,
    leapfrogs: usize,
}

fn transition<const D: usize, L: LogDensity<D>, R: Rng + ?Sized>(
    ham: &Hamiltonian<'_, D, L>,
    current: &Point<D>,
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> Transition<D> {
    let start = ham.refresh(current, rng);
    let h0 = ham.energy(&start);
    let mut tree = Tree {
        minus: start,
        plus: start,
        proposal: start,
        rho: start.p,
        log_weight: 0.0,
        turning: false,
        divergent: false,
        sum_accept: 0.0,
        leapfrogs: 0,
    };
    let mut sample = start;
    let mut divergent = false;
    for depth in 0..max_depth {
        let forward = rng.random::<bool>();
        let sub = if forward {
            build_tree(ham, &tree.plus, eps, depth, h0, rng)
        } else {
            build_tree(ham, &tree.minus, -eps, depth, h0, rng)
        };
        tree.sum_accept += sub.sum_accept;
        tree.leapfrogs += sub.leapfrogs;
        if sub.divergent {
            divergent = true;
            break;
        }
        if sub.turning {
            break;
        }
        // biased progressive sampling favours the new subtree
        if rng.random::<f64>().ln() < sub.log_weight - tree.log_weight {
            sample = sub.proposal;
        }
        tree.log_weight = log_add_exp(tree.log_weight, sub.log_weight);
        let (early, late) = if forward { (&tree, &sub) } else { (&sub, &tree) };
        let (rho, turn) = join(early, late);
        let (minus, plus) = (early.minus, late.plus);
        tree.minus = minus;
        tree.plus = plus;
        tree.rho = rho;
        if turn {
            break;
        }
    }
    Transition {
        point: sample,
        accept: tree.sum_accept / tree.leapfrogs.max(1) as f64,
        divergent,
        leapfrogs: tree.leapfrogs,
    }
}

/// Nesterov dual averaging on `log ε`.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            target,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Doubles or halves ε until a single leapfrog step crosses acceptance 0.8.
fn initial_step_size<const D: usize, L: LogDensity<D>, R: Rng + ?Sized>(
    ham: &Hamiltonian<'_, D, L>,
    at: &Point<D>,
    mut eps: f64,
    rng: &mut R,
) -> f64 {
    let threshold = 0.8f64.ln();
    let mut direction = 0.0;
    for _ in 0..100 {
        let start = ham.refresh(at, rng);
        let end = ham.leapfrog(&start, eps);
        let delta = ham.energy(&start) - ham.energy(&end);
        let delta = if delta.is_nan() { f64::NEG_INFINITY } else { delta };
        if direction == 0.0 {
            direction = if delta > threshold { 1.0 } else { -1.0 };
        }
        if (direction > 0.0 && delta <= threshold) || (direction < 0.0 && delta >= threshold) {
            break;
        }
        eps = if direction > 0.0 { eps * 2.0 } else { eps * 0.5 };
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e7)
}

/// Metric adaptation windows `[start, end)` within warmup.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    const INIT_BUFFER: usize = 75;
    const TERM_BUFFER: usize = 50;
    const BASE_WINDOW: usize = 25;
    if warmup < INIT_BUFFER + TERM_BUFFER + BASE_WINDOW {
        // too short for the standard layout: one window in the middle
        let start = warmup * 15 / 100;
        let end = warmup - warmup / 10;
        return if end > start + 2 {
            vec![(start, end)]
        } else {
            Vec::new()
        };
    }
    let last = warmup - TERM_BUFFER;
    let mut windows = Vec::new();
    let mut start = INIT_BUFFER;
    let mut size = BASE_WINDOW;
    while start < last {
        let mut end = start + size;
        if end + 2 * size > last {
            end = last;
        }
        windows.push((start, end));
        start = end;
        size *= 2;
    }
    windows
}

/// Welford accumulator for the sample covariance.
struct Welford<const D: usize> {
    n: usize,
    mean: SVector<f64, D>,
    m2: SMatrix<f64, D, D>,
}

impl<const D: usize> Welford<D> {
    fn new() -> Self {
        Self {
            n: 0,
            mean: SVector::zeros(),
            m2: SMatrix::zeros(),
        }
    }

    fn push(&mut self, x: &SVector<f64, D>) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean).transpose();
    }

    /// Sample covariance shrunk towards its diagonal.
    fn regularized(&self) -> SMatrix<f64, D, D> {
        let n = self.n as f64;
        let s = self.m2 / (n - 1.0);
        let s = (s + s.transpose()) * 0.5;
        let diag = SMatrix::<f64, D, D>::from_diagonal(&s.diagonal());
        s * (n / (n + 5.0)) + diag * (1e-3 * 5.0 / (n + 5.0))
    }
}

/// Runs one chain from `init` and returns the post-warmup draws.
pub fn sample_nuts<const D: usize, L: LogDensity<D>, R: Rng + ?Sized>(
    target: &L,
    init: &SVector<f64, D>,
    inverse_metric: &SMatrix<f64, D, D>,
    config: &NutsConfig,
    rng: &mut R,
) -> Result<NutsOutput<D>> {
    if config.samples == 0 || config.max_depth == 0 {
        return Err(Error::InvalidConfig(
            "sampler needs at least one draw and depth one".into(),
        ));
    }
    let mut ham = Hamiltonian::new(target, *inverse_metric)?;
    let mut current = ham.point(*init, SVector::zeros());
    if !current.logp.is_finite() || !current.grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }

    let mut eps = initial_step_size(&ham, &current, 1.0, rng);
    let mut averaging = DualAveraging::new(eps, config.target_accept);
    let windows = if config.adapt_metric {
        adaptation_windows(config.warmup)
    } else {
        Vec::new()
    };
    let mut window = 0;
    let mut welford = Welford::new();

    for it in 0..config.warmup {
        let t = transition(&ham, &current, eps, config.max_depth, rng);
        current = t.point;
        eps = averaging.update(t.accept);
        if let Some(&(start, end)) = windows.get(window) {
            if it >= start {
                welford.push(&current.q);
            }
            if it + 1 == end {
                if welford.n >= 3 {
                    if let Ok(h) = Hamiltonian::new(target, welford.regularized()) {
                        ham = h;
                        current = ham.point(current.q, SVector::zeros());
                        eps = initial_step_size(&ham, &current, eps, rng);
                        averaging = DualAveraging::new(eps, config.target_accept);
                    }
                }
                welford = Welford::new();
                window += 1;
            }
        }
    }
    if config.warmup > 0 {
        eps = averaging.final_step();
    }

    let mut draws = Vec::with_capacity(config.samples);
    let mut divergent = 0;
    let mut accept_sum = 0.0;
    let mut leapfrog_steps = 0;
    for _ in 0..config.samples {
        let t = transition(&ham, &current, eps, config.max_depth, rng);
        current = t.point;
        divergent += usize::from(t.divergent);
        accept_sum += t.accept;
        leapfrog_steps += t.leapfrogs;
        draws.push(current.q);
    }
    if divergent as f64 > config.max_divergent_fraction * config.samples as f64 {
        return Err(Error::DivergentTransitions {
            divergent,
            total: config.samples,
        });
    }
    Ok(NutsOutput {
        draws,
        step_size: eps,
        inverse_metric: ham.inverse_metric,
        divergent,
        mean_accept: accept_sum / config.samples as f64,
        leapfrog_steps,
    })
}
