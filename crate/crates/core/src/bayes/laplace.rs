//! Deterministic fast path: Gaussian approximations of `(beta, u)` at fixed
//! group SD, mixed over a grid on `ln sigma_u`.
//!
//! The joint posterior mode of a centered hierarchical model is unbounded as
//! `sigma_u -> 0`, so a single joint Laplace approximation is not usable.
//! Instead `ln sigma_u` is integrated numerically: at each grid point the
//! conditional mode and curvature of `(beta, u)` are found by Newton ascent,
//! and the grid points are weighted by the Laplace estimate of their
//! marginal density.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::model::{HierarchicalModel, LogDensity};
use super::BayesError;
use crate::rng::Rng;

pub const GRID_POINTS: usize = 48;

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub log_sigma: f64,
    pub mode: DVector<f64>,
    /// Lower Cholesky factor of the conditional precision.
    pub chol: DMatrix<f64>,
    pub log_weight: f64,
}

#[derive(Debug, Clone)]
pub struct LaplaceApprox {
    pub grid: Vec<GridPoint>,
    pub weights: Vec<f64>,
    /// Highest-density grid point's conditional mode plus its `ln sigma_u`.
    pub map: Vec<f64>,
}

fn conditional_mode(
    model: &HierarchicalModel<'_>,
    tau: f64,
    start: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64), BayesError> {
    let m = start.len();
    let mut theta: Vec<f64> = start.iter().copied().chain(std::iter::once(tau)).collect();
    let mut grad = vec![0.0; m + 1];
    let mut lp = model.logp_grad(&theta, &mut grad);
    for _ in 0..100 {
        let h = model.conditional_precision(&theta);
        let chol = h.cholesky().ok_or(BayesError::HessianNotPD)?;
        let g = DVector::from_column_slice(&grad[..m]);
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        let mut cand = theta.clone();
        let mut cand_grad = vec![0.0; m + 1];
        while t > 1e-8 {
            for j in 0..m {
                cand[j] = theta[j] + t * step[j];
            }
            let lp_new = model.logp_grad(&cand, &mut cand_grad);
            if lp_new.is_finite() && lp_new >= lp - 1e-12 * lp.abs() {
                theta.copy_from_slice(&cand);
                grad.copy_from_slice(&cand_grad);
                lp = lp_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let max_step = step.amax() * t;
        if !accepted || max_step < 1e-10 {
            break;
        }
    }
    let h = model.conditional_precision(&theta);
    let chol = h.cholesky().ok_or(BayesError::HessianNotPD)?;
    let mode = DVector::from_column_slice(&theta[..m]);
    Ok((mode, chol.l(), lp))
}

pub fn approximate(model: &HierarchicalModel<'_>) -> Result<LaplaceApprox, BayesError> {
    let m = model.data.n_fixed + model.data.n_groups;
    let lo = (model.group_scale * 2e-3).ln();
    let hi = (model.group_scale * 8.0).ln();
    let mut start = DVector::zeros(m);
    let mut grid = Vec::with_capacity(GRID_POINTS);
    // Sweep from large to small sigma so warm starts move towards stronger
    // shrinkage.
    for k in (0..GRID_POINTS).rev() {
        let tau = lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64;
        let (mode, chol, lp) = conditional_mode(model, tau, &start)?;
        let log_det: f64 = chol.diagonal().iter().map(|d| d.ln()).sum();
        start = mode.clone();
        grid.push(GridPoint { log_sigma: tau, mode, chol, log_weight: lp - log_det });
    }
    grid.reverse();
    let max = grid.iter().map(|g| g.log_weight).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = grid.iter().map(|g| (g.log_weight - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let best = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.log_weight.total_cmp(&b.1.log_weight))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut map: Vec<f64> = grid[best].mode.iter().copied().collect();
    map.push(grid[best].log_sigma);
    Ok(LaplaceApprox { grid, weights, map })
}

impl LaplaceApprox {
    /// Draws `n` parameter vectors, row-major.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let m = self.grid[0].mode.len();
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut out = Vec::with_capacity(n * (m + 1));
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c < u).min(self.grid.len() - 1);
            let g = &self.grid[k];
            let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(rng)));
            // x = L^-T z has covariance (L L^T)^-1
            let x = g.chol.transpose().solve_upper_triangular(&z).unwrap_or_else(|| DVector::zeros(m));
            out.extend((&g.mode + x).iter());
            out.push(g.log_sigma);
        }
        out
    }
}
