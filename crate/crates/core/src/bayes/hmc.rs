//! Static-trajectory Hamiltonian Monte Carlo with dual-averaging step size
//! adaptation and a dense mass matrix estimated in warmup windows.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::model::LogDensity;
use crate::rng::Rng;

/// Energy error above which a transition counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcSettings {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub trajectory_length: f64,
    pub max_leapfrog: usize,
    pub initial_step: f64,
    pub adapt_mass: bool,
}

impl Default for HmcSettings {
    fn default() -> Self {
        HmcSettings {
            warmup: 1000,
            draws: 1000,
            target_accept: 0.99,
            trajectory_length: 1.0,
            max_leapfrog: 1024,
            initial_step: 0.1,
            adapt_mass: true,
        }
    }
}

/// Step-size controller after Hoffman and Gelman's dual averaging.
#[derive(Debug, Clone)]
pub struct DualAverage {
    log_step: f64,
    log_step_avg: f64,
    hbar: f64,
    mu: f64,
    count: u64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAverage {
    pub fn new(initial_step: f64) -> Self {
        DualAverage {
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            hbar: 0.0,
            mu: (10.0 * initial_step).ln(),
            count: 1,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    pub fn update(&mut self, accept_stat: f64, target: f64) {
        let n = self.count as f64;
        let w = 1.0 / (n + self.t0);
        self.hbar = (1.0 - w) * self.hbar + w * (target - accept_stat);
        self.log_step = self.mu - self.hbar * n.sqrt() / self.gamma;
        let m = n.powf(-self.kappa);
        self.log_step_avg = m * self.log_step + (1.0 - m) * self.log_step_avg;
        self.count += 1;
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn adapted(&self) -> f64 {
        self.log_step_avg.exp()
    }
}

/// Welford accumulator for the sample covariance.
#[derive(Debug, Clone)]
struct RunningCovariance {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningCovariance {
    fn new(dim: usize) -> Self {
        RunningCovariance { n: 0.0, mean: DVector::zeros(dim), m2: DMatrix::zeros(dim, dim) }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        let x = DVector::from_column_slice(x);
        let d0 = &x - &self.mean;
        self.mean += &d0 / self.n;
        let d1 = &x - &self.mean;
        self.m2 += &d0 * d1.transpose();
    }

    /// Covariance shrunk towards `1e-3 I`, as Stan regularizes its metric.
    fn regularized(&self) -> DMatrix<f64> {
        let n = self.n;
        let dim = self.mean.len();
        let cov = &self.m2 / (n - 1.0).max(1.0);
        let sym = (&cov + cov.transpose()) * 0.5;
        sym * (n / (n + 5.0)) + DMatrix::identity(dim, dim) * (1e-3 * 5.0 / (n + 5.0))
    }
}

/// Inverse mass matrix with its Cholesky factor, used to draw momenta
/// `p ~ N(0, M)` and to map momenta to velocities `M^-1 p`.
#[derive(Debug, Clone)]
pub struct Metric {
    inv_mass: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl Metric {
    pub fn identity(dim: usize) -> Metric {
        Metric { inv_mass: DMatrix::identity(dim, dim), chol: DMatrix::identity(dim, dim) }
    }

    /// Falls back to the diagonal when the matrix is not positive definite.
    pub fn dense(inv_mass: DMatrix<f64>) -> Metric {
        match inv_mass.clone().cholesky() {
            Some(c) => Metric { inv_mass, chol: c.l() },
            None => {
                let d = DMatrix::from_diagonal(&inv_mass.diagonal().map(|v| v.max(1e-8)));
                let chol = d.map(f64::sqrt);
                Metric { inv_mass: d, chol }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.inv_mass.nrows()
    }

    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        let n = p.len();
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.inv_mass[(i, j)] * p[j];
            }
            *o = acc;
        }
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        let mut v = vec![0.0; p.len()];
        self.velocity(p, &mut v);
        0.5 * p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `p = L^-T z` with `M^-1 = L L^T`, so `Cov(p) = M`.
    fn sample_momentum(&self, rng: &mut Rng, out: &mut [f64]) {
        let z = DVector::from_iterator(out.len(), (0..out.len()).map(|_| StandardNormal.sample(rng)));
        let p = self.chol.transpose().solve_upper_triangular(&z).unwrap_or(z);
        out.copy_from_slice(p.as_slice());
    }
}

/// Runs `n_steps` leapfrog steps in place. Returns `false` if the log
/// density became non-finite.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    theta: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
    metric: &Metric,
    step: f64,
    n_steps: usize,
) -> (f64, bool) {
    let mut logp = f64::NAN;
    let mut velocity = vec![0.0; theta.len()];
    for _ in 0..n_steps {
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * step * g;
        }
        metric.velocity(momentum, &mut velocity);
        for (t, v) in theta.iter_mut().zip(&velocity) {
            *t += step * v;
        }
        logp = target.logp_grad(theta, grad);
        if !logp.is_finite() {
            return (logp, false);
        }
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * step * g;
        }
    }
    (logp, true)
}

/// Absolute change in the Hamiltonian after integrating a fixed trajectory
/// of length `step * n_steps`.
pub fn energy_error<T: LogDensity + ?Sized>(
    target: &T,
    theta0: &[f64],
    momentum0: &[f64],
    metric: &Metric,
    step: f64,
    n_steps: usize,
) -> f64 {
    let mut theta = theta0.to_vec();
    let mut momentum = momentum0.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let logp0 = target.logp_grad(&theta, &mut grad);
    let h0 = -logp0 + metric.kinetic(&momentum);
    let (logp1, ok) = leapfrog(target, &mut theta, &mut momentum, &mut grad, metric, step, n_steps);
    if !ok {
        return f64::INFINITY;
    }
    (-logp1 + metric.kinetic(&momentum) - h0).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStats {
    /// Mean acceptance probability over the sampling phase.
    pub mean_accept: f64,
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// `draws x dim`, row-major.
    pub draws: Vec<f64>,
    pub stats: ChainStats,
}

/// Stan-style warmup windows: a fast step-size-only buffer, doubling slow
/// windows that estimate the metric, and a final fast buffer.
fn window_ends(warmup: usize) -> Vec<usize> {
    let (init, term, base) = (75, 50, 25);
    if warmup < init + term + base {
        return Vec::new();
    }
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    let last = warmup - term;
    while start < last {
        let mut end = start + size;
        if end + 2 * size > last {
            end = last;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

/// Runs one chain from `init`.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    settings: &HmcSettings,
    rng: &mut Rng,
) -> ChainOutput {
    let dim = target.dim();
    let mut theta = init.to_vec();
    let mut grad = vec![0.0; dim];
    let mut logp = target.logp_grad(&theta, &mut grad);
    let mut metric = Metric::identity(dim);
    let mut step = settings.initial_step;
    let mut da = DualAverage::new(step);
    let windows = if settings.adapt_mass { window_ends(settings.warmup) } else { Vec::new() };
    let first_window_start = if windows.is_empty() { usize::MAX } else { 75 };
    let mut window_idx = 0;
    let mut cov_acc = RunningCovariance::new(dim);

    let mut draws = Vec::with_capacity(settings.draws * dim);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut n_leapfrog = 0;

    let mut momentum = vec![0.0; dim];
    let mut prop = vec![0.0; dim];
    let mut prop_grad = vec![0.0; dim];
    for it in 0..settings.warmup + settings.draws {
        let warm = it < settings.warmup;
        if !warm && it == settings.warmup {
            step = da.adapted();
        }
        metric.sample_momentum(rng, &mut momentum);
        let n_steps = ((settings.trajectory_length / step).ceil() as usize).clamp(1, settings.max_leapfrog);
        n_leapfrog = n_steps;
        let h0 = -logp + metric.kinetic(&momentum);
        prop.copy_from_slice(&theta);
        prop_grad.copy_from_slice(&grad);
        let (logp_new, finite) = leapfrog(target, &mut prop, &mut momentum, &mut prop_grad, &metric, step, n_steps);
        let h1 = -logp_new + metric.kinetic(&momentum);
        let delta = h1 - h0;
        let divergent = !finite || !delta.is_finite() || delta > DIVERGENCE_THRESHOLD;
        let accept_prob = if divergent { 0.0 } else { (-delta).exp().min(1.0) };
        if divergent {
            if warm {
                warmup_divergences += 1;
            } else {
                divergences += 1;
            }
        }
        let u: f64 = rng.random();
        if !divergent && u < accept_prob {
            theta.copy_from_slice(&prop);
            grad.copy_from_slice(&prop_grad);
            logp = logp_new;
        }
        if warm {
            da.update(accept_prob, settings.target_accept);
            step = da.current();
            if it >= first_window_start && window_idx < windows.len() {
                cov_acc.add(&theta);
                if it + 1 == windows[window_idx] {
                    metric = Metric::dense(cov_acc.regularized());
                    cov_acc = RunningCovariance::new(dim);
                    window_idx += 1;
                    da = DualAverage::new(step);
                }
            }
        } else {
            accept_sum += accept_prob;
            draws.extend_from_slice(&theta);
        }
    }
    let mean_accept = if settings.draws > 0 { accept_sum / settings.draws as f64 } else { f64::NAN };
    ChainOutput {
        draws,
        stats: ChainStats { mean_accept, step_size: step, n_leapfrog, divergences, warmup_divergences },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for (g, t) in grad.iter_mut().zip(theta) {
                *g = -t;
                lp -= 0.5 * t * t;
            }
            lp
        }
    }

    #[test]
    fn energy_error_shrinks_with_step_size() {
        let target = StdNormal(3);
        let theta = [0.3, -1.2, 0.8];
        let mom = [1.0, 0.5, -0.7];
        let metric = Metric::identity(3);
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&e| energy_error(&target, &theta, &mom, &metric, e, (1.0 / e) as usize))
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-3);
    }

    #[test]
    fn dual_average_moves_step_toward_target() {
        let mut da = DualAverage::new(1.0);
        for _ in 0..50 {
            da.update(0.2, 0.9);
        }
        assert!(da.adapted() < 1.0);
    }

    #[test]
    fn dense_momentum_has_mass_covariance() {
        let inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let metric = Metric::dense(inv.clone());
        let mass = inv.try_inverse().unwrap();
        let mut r = crate::rng::seeded(3);
        let n = 40_000;
        let mut acc = DMatrix::zeros(2, 2);
        let mut p = [0.0; 2];
        for _ in 0..n {
            metric.sample_momentum(&mut r, &mut p);
            let v = DVector::from_column_slice(&p);
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                assert!((acc[(i, j)] - mass[(i, j)]).abs() < 0.05 * mass[(i, i)].max(mass[(j, j)]), "{acc} vs {mass}");
            }
        }
        assert!((metric.kinetic(&[1.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_windows_cover_slow_phase() {
        let w = window_ends(1000);
        assert_eq!(*w.last().unwrap(), 950);
        assert_eq!(w[0], 100);
        assert!(window_ends(100).is_empty());
    }
}
