//! No-U-Turn sampler over an unconstrained parameter space.
//!
//! Recursive multinomial-slice tree doubling, dual-averaging step-size
//! adaptation during warmup, and a diagonal mass matrix estimated over
//! expanding warmup windows. Chains run sequentially and are seeded
//! deterministically from a root seed.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Target log density and gradient. Implementations must return a
/// finite value and gradient or mark the point rejected.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Returns (log density, gradient). Non-finite values signal
    /// rejection; the gradient is ignored in that case.
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Scale of the uniform jitter applied to the shared initial point
    /// to start each chain from a distinct location.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 500,
            samples: 500,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 20_240_901,
            init_jitter: 0.1,
        }
    }
}

/// Per-chain adaptation and health counters.
#[derive(Debug, Clone)]
pub struct ChainStats {
    pub divergences: usize,
    pub mean_accept: f64,
    pub step_size: f64,
    pub max_depth_hits: usize,
}

struct State {
    x: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Tree {
    // Leftmost / rightmost position and momentum of the trajectory.
    x_minus: Vec<f64>,
    p_minus: Vec<f64>,
    g_minus: Vec<f64>,
    x_plus: Vec<f64>,
    p_plus: Vec<f64>,
    g_plus: Vec<f64>,
    // Proposal drawn from the subtree.
    x_prop: Vec<f64>,
    g_prop: Vec<f64>,
    logp_prop: f64,
    // log of the subtree weight: logsumexp of (logp - kinetic) over leaves.
    log_w: f64,
    n_leaves: f64,
    diverged: bool,
    turned: bool,
    sum_accept: f64,
    n_accept: f64,
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

/// Kinetic-energy metric: either a diagonal variance estimate or a dense
/// inverse mass matrix (posterior covariance) with a square-root factor
/// for momentum sampling.
#[derive(Clone)]
enum Metric {
    Diag(Vec<f64>),
    Dense {
        /// Inverse mass `M^{-1}` (the posterior covariance estimate).
        sigma: DMatrix<f64>,
        /// Any `S` with `S S^T = M`, used to draw momenta.
        sqrt_mass: DMatrix<f64>,
        /// Any `R` with `R R^T = M^{-1}`, used to scale the init jitter.
        sqrt_sigma: DMatrix<f64>,
    },
}

impl Metric {
    /// Map a unit-scale perturbation to position space, so chain
    /// dispersion at the start is measured in posterior scales rather
    /// than raw coordinates.
    fn scale_jitter(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Metric::Diag(inv_mass) => z
                .iter()
                .zip(inv_mass)
                .map(|(&zi, &im)| zi * im.sqrt())
                .collect(),
            Metric::Dense { sqrt_sigma, .. } => {
                (sqrt_sigma * DVector::from_column_slice(z)).as_slice().to_vec()
            }
        }
    }
}

struct Hamiltonian<'a, L: LogDensity> {
    target: &'a L,
    metric: Metric,
    evals: std::cell::Cell<usize>,
}

impl<'a, L: LogDensity> Hamiltonian<'a, L> {
    /// Velocity `M^{-1} p`.
    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        match &self.metric {
            Metric::Diag(inv_mass) => p
                .iter()
                .zip(inv_mass)
                .map(|(&pi, &im)| pi * im)
                .collect(),
            Metric::Dense { sigma, .. } => {
                let v = sigma * DVector::from_column_slice(p);
                v.as_slice().to_vec()
            }
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(self.velocity(p))
            .map(|(&pi, vi)| pi * vi)
            .sum::<f64>()
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.metric {
            Metric::Diag(inv_mass) => inv_mass
                .iter()
                .map(|&im| {
                    let z: f64 = rng.sample(StandardNormal);
                    z / im.sqrt()
                })
                .collect(),
            Metric::Dense { sqrt_mass, .. } => {
                let z = DVector::from_iterator(
                    sqrt_mass.nrows(),
                    (0..sqrt_mass.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                (sqrt_mass * z).as_slice().to_vec()
            }
        }
    }

    /// One leapfrog step; returns None when the density rejects.
    fn leapfrog(
        &self,
        x: &[f64],
        p: &[f64],
        grad: &[f64],
        eps: f64,
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let dim = x.len();
        let mut p_half = vec![0.0; dim];
        for i in 0..dim {
            p_half[i] = p[i] + 0.5 * eps * grad[i];
        }
        let v = self.velocity(&p_half);
        let mut x_new = vec![0.0; dim];
        for i in 0..dim {
            x_new[i] = x[i] + eps * v[i];
        }
        self.evals.set(self.evals.get() + 1);
        let (logp, grad_new) = self.target.value_and_grad(&x_new);
        if !logp.is_finite() {
            return None;
        }
        let mut p_new = p_half;
        for i in 0..dim {
            p_new[i] += 0.5 * eps * grad_new[i];
        }
        Some((x_new, p_new, grad_new, logp))
    }

    /// Termination criterion between the trajectory end points.
    fn is_turning(
        &self,
        x_minus: &[f64],
        x_plus: &[f64],
        p_minus: &[f64],
        p_plus: &[f64],
    ) -> bool {
        let v_minus = self.velocity(p_minus);
        let v_plus = self.velocity(p_plus);
        let mut dot_minus = 0.0;
        let mut dot_plus = 0.0;
        for i in 0..x_minus.len() {
            let dx = x_plus[i] - x_minus[i];
            dot_minus += dx * v_minus[i];
            dot_plus += dx * v_plus[i];
        }
        dot_minus < 0.0 || dot_plus < 0.0
    }
}

const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[allow(clippy::too_many_arguments)]
fn build_tree<L: LogDensity>(
    ham: &Hamiltonian<'_, L>,
    x: &[f64],
    p: &[f64],
    grad: &[f64],
    logp: f64,
    dir: f64,
    depth: usize,
    eps: f64,
    h0: f64,
    rng: &mut ChaCha8Rng,
) -> Tree {
    if depth == 0 {
        // Base case: a single leapfrog step in the given direction.
        match ham.leapfrog(x, p, grad, dir * eps) {
            Some((x1, p1, g1, logp1)) => {
                let h1 = logp1 - ham.kinetic(&p1);
                let delta = h1 - h0;
                let diverged = delta < -DIVERGENCE_THRESHOLD;
                let accept = delta.min(0.0).exp();
                Tree {
                    x_minus: x1.clone(),
                    p_minus: p1.clone(),
                    g_minus: g1.clone(),
                    x_plus: x1.clone(),
                    p_plus: p1.clone(),
                    g_plus: g1.clone(),
                    x_prop: x1,
                    g_prop: g1,
                    logp_prop: logp1,
                    log_w: if diverged { f64::NEG_INFINITY } else { delta },
                    n_leaves: 1.0,
                    diverged,
                    turned: false,
                    sum_accept: accept,
                    n_accept: 1.0,
                }
            }
            None => Tree {
                x_minus: x.to_vec(),
                p_minus: p.to_vec(),
                g_minus: grad.to_vec(),
                x_plus: x.to_vec(),
                p_plus: p.to_vec(),
                g_plus: grad.to_vec(),
                x_prop: x.to_vec(),
                g_prop: grad.to_vec(),
                logp_prop: logp,
                log_w: f64::NEG_INFINITY,
                n_leaves: 1.0,
                diverged: true,
                turned: false,
                sum_accept: 0.0,
                n_accept: 1.0,
            },
        }
    } else {
        let mut first = build_tree(ham, x, p, grad, logp, dir, depth - 1, eps, h0, rng);
        if first.diverged || first.turned {
            return first;
        }
        // Extend from the outward edge of the first subtree.
        let second = if dir > 0.0 {
            build_tree(
                ham,
                &first.x_plus,
                &first.p_plus,
                &first.g_plus,
                first.logp_prop,
                dir,
                depth - 1,
                eps,
                h0,
                rng,
            )
        } else {
            build_tree(
                ham,
                &first.x_minus,
                &first.p_minus,
                &first.g_minus,
                first.logp_prop,
                dir,
                depth - 1,
                eps,
                h0,
                rng,
            )
        };
        first.sum_accept += second.sum_accept;
        first.n_accept += second.n_accept;
        first.n_leaves += second.n_leaves;
        if second.diverged {
            first.diverged = true;
            return first;
        }
        // Multinomial proposal swap between the subtrees.
        let log_w_total = log_add_exp(first.log_w, second.log_w);
        if log_w_total > f64::NEG_INFINITY
            && rng.gen::<f64>().ln() < second.log_w - log_w_total
        {
            first.x_prop = second.x_prop;
            first.g_prop = second.g_prop;
            first.logp_prop = second.logp_prop;
        }
        first.log_w = log_w_total;
        if dir > 0.0 {
            first.x_plus = second.x_plus;
            first.p_plus = second.p_plus;
            first.g_plus = second.g_plus;
        } else {
            first.x_minus = second.x_minus;
            first.p_minus = second.p_minus;
            first.g_minus = second.g_minus;
        }
        first.turned = second.turned
            || ham.is_turning(
                &first.x_minus,
                &first.x_plus,
                &first.p_minus,
                &first.p_plus,
            );
        first
    }
}

/// One transition of the sampler; returns the new state, the mean
/// acceptance statistic, whether a divergence occurred, and whether the
/// maximum tree depth was reached.
fn transition<L: LogDensity>(
    ham: &Hamiltonian<'_, L>,
    state: State,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> (State, f64, bool, bool) {
    let p0 = ham.sample_momentum(rng);
    let h0 = state.logp - ham.kinetic(&p0);
    let mut x_minus = state.x.clone();
    let mut p_minus = p0.clone();
    let mut g_minus = state.grad.clone();
    let mut x_plus = state.x.clone();
    let mut p_plus = p0;
    let mut g_plus = state.grad.clone();
    let mut x_prop = state.x.clone();
    let mut g_prop = state.grad.clone();
    let mut logp_prop = state.logp;
    let mut log_w = 0.0f64; // weight of the initial point: exp(h0 - h0)
    let mut sum_accept = 0.0;
    let mut n_accept = 0.0;
    let mut diverged = false;
    let mut hit_max = true;
    for depth in 0..max_depth {
        let dir: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let subtree = if dir > 0.0 {
            build_tree(ham, &x_plus, &p_plus, &g_plus, logp_prop, dir, depth, eps, h0, rng)
        } else {
            build_tree(
                ham, &x_minus, &p_minus, &g_minus, logp_prop, dir, depth, eps, h0, rng,
            )
        };
        sum_accept += subtree.sum_accept;
        n_accept += subtree.n_accept;
        if subtree.diverged {
            diverged = true;
            hit_max = false;
            break;
        }
        if subtree.turned {
            hit_max = false;
            break;
        }
        // Biased progressive sampling: accept the new subtree's proposal
        // with probability min(1, w_new / w_old).
        if rng.gen::<f64>().ln() < subtree.log_w - log_w {
            x_prop = subtree.x_prop.clone();
            g_prop = subtree.g_prop.clone();
            logp_prop = subtree.logp_prop;
        }
        log_w = log_add_exp(log_w, subtree.log_w);
        if dir > 0.0 {
            x_plus = subtree.x_plus;
            p_plus = subtree.p_plus;
            g_plus = subtree.g_plus;
        } else {
            x_minus = subtree.x_minus;
            p_minus = subtree.p_minus;
            g_minus = subtree.g_minus;
        }
        if ham.is_turning(&x_minus, &x_plus, &p_minus, &p_plus) {
            hit_max = false;
            break;
        }
    }
    let accept_stat = if n_accept > 0.0 {
        sum_accept / n_accept
    } else {
        0.0
    };
    (
        State {
            x: x_prop,
            grad: g_prop,
            logp: logp_prop,
        },
        accept_stat,
        diverged,
        hit_max,
    )
}

/// Dual-averaging step-size adaptation.
struct DualAverage {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
}

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

impl DualAverage {
    fn new(eps0: f64) -> Self {
        DualAverage {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_stat: f64, target: f64) {
        self.t += 1.0;
        let eta = 1.0 / (self.t + DA_T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat);
        self.log_eps = self.mu - self.t.sqrt() / DA_GAMMA * self.h_bar;
        let w = self.t.powf(-DA_KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Heuristic initial step size: double/halve until the one-step
/// acceptance probability crosses 0.5.
fn find_initial_step<L: LogDensity>(
    ham: &Hamiltonian<'_, L>,
    state: &State,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut eps = 1.0;
    let p0 = ham.sample_momentum(rng);
    let h0 = state.logp - ham.kinetic(&p0);
    let ratio = |eps: f64| -> f64 {
        match ham.leapfrog(&state.x, &p0, &state.grad, eps) {
            Some((_, p1, _, logp1)) => (logp1 - ham.kinetic(&p1) - h0).exp(),
            None => 0.0,
        }
    };
    let r0 = ratio(eps);
    let go_up = r0 > 0.5;
    for _ in 0..40 {
        let r = ratio(eps);
        if go_up {
            if r <= 0.5 {
                break;
            }
            eps *= 2.0;
        } else {
            if r >= 0.5 {
                break;
            }
            eps *= 0.5;
        }
        if !(1e-10..=1e6).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-8, 1e3)
}

/// Diagonal-Hessian (Laplace) scale estimate at a point: central
/// differences of the gradient give per-coordinate curvature, whose
/// negated inverse approximates the posterior variance. Coordinates with
/// non-concave or unevaluable curvature keep unit scale. This seeds the
/// mass matrix so the first warmup window starts from honest scales even
/// when they span several orders of magnitude.
fn diag_hessian_metric<L: LogDensity>(target: &L, x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let mut var = vec![1.0; dim];
    let mut xp = x.to_vec();
    for i in 0..dim {
        let h = 1e-4 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let (vp, gp) = target.value_and_grad(&xp);
        xp[i] = x[i] - h;
        let (vm, gm) = target.value_and_grad(&xp);
        xp[i] = x[i];
        if vp.is_finite() && vm.is_finite() {
            let hii = (gp[i] - gm[i]) / (2.0 * h);
            if hii < 0.0 {
                var[i] = (-1.0 / hii).clamp(1e-8, 1e6);
            }
        }
    }
    var
}

/// Dense Laplace metric: the full finite-difference Hessian of the log
/// density at `x`, negated, symmetrized, and made positive definite by
/// flooring its spectrum. Directions the density barely constrains (or
/// constrains only through near-collinear combinations of coordinates)
/// get their honest scale, which a diagonal metric cannot express.
/// Returns None when the curvature is not usable (rejected evaluations,
/// non-finite entries, or no positive curvature at all).
fn dense_hessian_metric<L: LogDensity>(target: &L, x: &[f64]) -> Option<Metric> {
    let dim = x.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut xp = x.to_vec();
    for i in 0..dim {
        let step = 1e-4 * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let (vp, gp) = target.value_and_grad(&xp);
        xp[i] = x[i] - step;
        let (vm, gm) = target.value_and_grad(&xp);
        xp[i] = x[i];
        if !vp.is_finite() || !vm.is_finite() {
            return None;
        }
        for j in 0..dim {
            let v = (gp[j] - gm[j]) / (2.0 * step);
            if !v.is_finite() {
                return None;
            }
            h[(i, j)] = v;
        }
    }
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            a[(i, j)] = -0.5 * (h[(i, j)] + h[(j, i)]);
        }
    }
    let eig = a.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lmax > 0.0 && lmax.is_finite()) {
        return None;
    }
    // Saddle directions keep their curvature magnitude; near-null
    // directions are floored relative to the sharpest one.
    let floor = lmax * 1e-12;
    let lam: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| l.abs().max(floor))
        .collect();
    let v = &eig.eigenvectors;
    let inv_l = DMatrix::from_diagonal(&DVector::from_iterator(
        dim,
        lam.iter().map(|l| 1.0 / l),
    ));
    let sigma = v * inv_l * v.transpose();
    let sqrt_mass = v * DMatrix::from_diagonal(&DVector::from_iterator(
        dim,
        lam.iter().map(|l| l.sqrt()),
    ));
    let sqrt_sigma = v * DMatrix::from_diagonal(&DVector::from_iterator(
        dim,
        lam.iter().map(|l| 1.0 / l.sqrt()),
    ));
    Some(Metric::Dense {
        sigma,
        sqrt_mass,
        sqrt_sigma,
    })
}

/// Welford accumulator for the diagonal mass-matrix windows.
struct RunningVariance {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        RunningVariance {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate (shrunk toward unit scale), as used
    /// for diagonal mass-matrix adaptation.
    fn variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|&m2| {
                let v = if n > 1.0 { m2 / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Energy-conservation scan used while diagnosing sampler behavior:
/// from `x0`, run `n_traj` fixed-length leapfrog trajectories per step
/// size with the same metric the sampler would build, and report
/// (eps, mean |energy error|, mean acceptance, rejected trajectories).
#[doc(hidden)]
pub fn energy_scan<L: LogDensity>(
    target: &L,
    metric_at: &[f64],
    x0: &[f64],
    eps_list: &[f64],
    n_steps: usize,
    n_traj: usize,
    seed: u64,
) -> Vec<(f64, f64, f64, usize)> {
    let metric = dense_hessian_metric(target, metric_at)
        .unwrap_or_else(|| Metric::Diag(diag_hessian_metric(target, metric_at)));
    let ham = Hamiltonian {
        target,
        metric,
        evals: std::cell::Cell::new(0),
    };
    let (logp0, grad0) = target.value_and_grad(x0);
    let mut out = Vec::new();
    for &eps in eps_list {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut sum_dh, mut sum_acc, mut rej, mut cnt) = (0.0, 0.0, 0usize, 0usize);
        for _ in 0..n_traj {
            let p0 = ham.sample_momentum(&mut rng);
            let h0 = logp0 - ham.kinetic(&p0);
            let (mut x, mut p, mut g, mut lp) = (x0.to_vec(), p0, grad0.clone(), logp0);
            let mut ok = true;
            for _ in 0..n_steps {
                match ham.leapfrog(&x, &p, &g, eps) {
                    Some((x1, p1, g1, lp1)) => {
                        x = x1;
                        p = p1;
                        g = g1;
                        lp = lp1;
                    }
                    None => {
                        rej += 1;
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let dh = (lp - ham.kinetic(&p)) - h0;
                sum_dh += dh.abs();
                sum_acc += dh.min(0.0).exp();
                cnt += 1;
            }
        }
        let c = cnt.max(1) as f64;
        out.push((eps, sum_dh / c, sum_acc / c, rej));
    }
    out
}

/// Draws from all chains: `draws[chain][iteration][coordinate]`.
pub fn sample<L: LogDensity>(
    target: &L,
    init: &[f64],
    config: &SamplerConfig,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<ChainStats>)> {
    if config.chains == 0 || config.samples == 0 {
        return Err(Error::domain("need at least one chain and one sample"));
    }
    if init.len() != target.dim() {
        return Err(Error::domain("initial point has wrong dimension"));
    }
    if !(0.0..1.0).contains(&config.target_accept) {
        return Err(Error::domain("target acceptance must be in (0, 1)"));
    }
    let dim = target.dim();
    let mut all_draws = Vec::with_capacity(config.chains);
    let mut all_stats = Vec::with_capacity(config.chains);

    // Mass-matrix update points as fractions of warmup (diagonal path).
    let windows: Vec<usize> = [0.25, 0.5, 0.9]
        .iter()
        .map(|f| ((config.warmup as f64) * f) as usize)
        .filter(|&w| w > 2)
        .collect();

    // Dense Laplace metric at the shared initial point, computed once.
    // When the curvature there is usable it is the starting metric for
    // all chains (the windowed diagonal estimate cannot express the
    // near-collinear directions this posterior family has, and estimating
    // a dense covariance from warmup draws needs draws that mix, which
    // without a good metric they do not).
    let metric0 = dense_hessian_metric(target, init)
        .unwrap_or_else(|| Metric::Diag(diag_hessian_metric(target, init)));
    let dense = matches!(metric0, Metric::Dense { .. });

    // The curvature is position-dependent: a metric built at the start
    // point goes stale as the chain moves, which collapses the adapted
    // step size. Rebuild the dense metric at the chain's current position
    // a few times during warmup, restarting step-size adaptation each
    // time; the final stretch of warmup tunes the step for the metric
    // used during sampling.
    let rebuilds: Vec<usize> = [0.1, 0.25, 0.45, 0.7]
        .iter()
        .map(|f| ((config.warmup as f64) * f) as usize)
        .filter(|&w| w > 2)
        .collect();

    for chain in 0..config.chains {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(chain as u64),
        );
        // Jittered start, dispersed in posterior scales (via the metric)
        // so no coordinate starts an extreme number of its own standard
        // deviations away from the initial point.
        let z: Vec<f64> = (0..dim)
            .map(|_| rng.gen_range(-config.init_jitter..=config.init_jitter))
            .collect();
        let x0: Vec<f64> = init
            .iter()
            .zip(metric0.scale_jitter(&z))
            .map(|(&v, j)| v + j)
            .collect();
        let (logp, grad) = target.value_and_grad(&x0);
        if !logp.is_finite() {
            return Err(Error::numeric(format!(
                "chain {chain} initial point has non-finite log density"
            )));
        }
        let mut state = State { x: x0, grad, logp };
        let mut ham = Hamiltonian {
            target,
            metric: metric0.clone(),
            evals: std::cell::Cell::new(0),
        };
        let mut eps = find_initial_step(&ham, &state, &mut rng);
        let mut da = DualAverage::new(eps);
        let mut acc = RunningVariance::new(dim);
        let mut window_cursor = 0usize;

        // Warmup. With a dense metric the Hessian is rebuilt at the
        // chain's position at the scheduled points; on the diagonal
        // fallback the metric re-estimates at the window ends.
        for it in 0..config.warmup {
            let (next, a, _, _) =
                transition(&ham, state, eps, config.max_tree_depth, &mut rng);
            state = next;
            da.update(a, config.target_accept);
            eps = da.current().clamp(1e-8, 1e3);
            acc.push(&state.x);
            if dense {
                if window_cursor < rebuilds.len() && it + 1 == rebuilds[window_cursor] {
                    if let Some(m) = dense_hessian_metric(target, &state.x) {
                        ham.metric = m;
                    }
                    window_cursor += 1;
                    eps = find_initial_step(&ham, &state, &mut rng);
                    da = DualAverage::new(eps);
                }
            } else if window_cursor < windows.len() && it + 1 == windows[window_cursor] {
                ham.metric = Metric::Diag(acc.variance());
                acc = RunningVariance::new(dim);
                window_cursor += 1;
                // Re-tune the step size for the new metric.
                eps = find_initial_step(&ham, &state, &mut rng);
                da = DualAverage::new(eps);
            }
        }
        let eps_final = if config.warmup > 0 {
            da.adapted().clamp(1e-8, 1e3)
        } else {
            eps
        };

        // Sampling.
        let mut draws = Vec::with_capacity(config.samples);
        let mut divergences = 0usize;
        let mut max_depth_hits = 0usize;
        let mut accept_sum = 0.0;
        for _ in 0..config.samples {
            let (next, a, div, hit) =
                transition(&ham, state, eps_final, config.max_tree_depth, &mut rng);
            state = next;
            accept_sum += a;
            if div {
                divergences += 1;
            }
            if hit {
                max_depth_hits += 1;
            }
            draws.push(state.x.clone());
        }
        all_draws.push(draws);
        all_stats.push(ChainStats {
            divergences,
            mean_accept: accept_sum / config.samples as f64,
            step_size: eps_final,
            max_depth_hits,
        });
    }
    Ok((all_draws, all_stats))
}
