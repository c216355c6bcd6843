//! Hierarchical logistic model: fixed effects plus one normal random
//! intercept per group with an exponential prior on the group SD.
//!
//! The parameter vector is laid out as `[beta (p), u (C), ln sigma_u]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{BayesError, MrpModelSpec};
use crate::stats::{log1p_exp, logistic};

/// A log density with its gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Model data compressed to unique (covariate row, group) patterns with
/// binomial counts. Bernoulli log-likelihoods are sums over rows, so the
/// compression is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalData {
    pub n_fixed: usize,
    pub n_groups: usize,
    pub x: Vec<Vec<f64>>,
    pub group: Vec<usize>,
    pub successes: Vec<f64>,
    pub trials: Vec<f64>,
}

impl HierarchicalData {
    /// Builds model data from a dense fixed-effect design `x` (n x p),
    /// Bernoulli outcomes and 0-based group indices in `0..n_groups`.
    pub fn new(x: &DMatrix<f64>, y: &[bool], group: &[usize], n_groups: usize) -> Result<Self, BayesError> {
        let n = x.nrows();
        if y.len() != n || group.len() != n {
            return Err(BayesError::Dimension(format!("{n} rows but {} outcomes / {} group ids", y.len(), group.len())));
        }
        if let Some(g) = group.iter().find(|&&g| g >= n_groups) {
            return Err(BayesError::Dimension(format!("group index {g} out of range (n_groups = {n_groups})")));
        }
        let mut cells: BTreeMap<(Vec<u64>, usize), (f64, f64)> = BTreeMap::new();
        for i in 0..n {
            let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
            let e = cells.entry((key, group[i])).or_insert((0.0, 0.0));
            e.0 += if y[i] { 1.0 } else { 0.0 };
            e.1 += 1.0;
        }
        let mut data = HierarchicalData {
            n_fixed: x.ncols(),
            n_groups,
            x: Vec::with_capacity(cells.len()),
            group: Vec::with_capacity(cells.len()),
            successes: Vec::with_capacity(cells.len()),
            trials: Vec::with_capacity(cells.len()),
        };
        for ((key, g), (k, t)) in cells {
            data.x.push(key.into_iter().map(f64::from_bits).collect());
            data.group.push(g);
            data.successes.push(k);
            data.trials.push(t);
        }
        Ok(data)
    }

    /// No observations, only priors.
    pub fn empty(n_fixed: usize, n_groups: usize) -> Self {
        HierarchicalData { n_fixed, n_groups, x: vec![], group: vec![], successes: vec![], trials: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.n_fixed + self.n_groups + 1
    }

    pub fn n_observations(&self) -> f64 {
        self.trials.iter().sum()
    }
}

/// Log posterior of the hierarchical model.
#[derive(Debug, Clone)]
pub struct HierarchicalModel<'a> {
    pub data: &'a HierarchicalData,
    pub coef_scale: f64,
    /// Mean of the exponential prior on the group SD.
    pub group_scale: f64,
}

impl<'a> HierarchicalModel<'a> {
    pub fn new(spec: &MrpModelSpec, data: &'a HierarchicalData) -> Self {
        HierarchicalModel { data, coef_scale: spec.prior_coef_scale, group_scale: spec.prior_group_scale }
    }

    fn linear_predictor(&self, i: usize, beta: &[f64], u: &[f64]) -> f64 {
        let d = self.data;
        d.x[i].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + u[d.group[i]]
    }

    /// Log prior of `theta`, including the log-Jacobian of the
    /// `ln sigma_u` transform.
    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let (p, c) = (self.data.n_fixed, self.data.n_groups);
        let s2 = self.coef_scale * self.coef_scale;
        let tau = theta[p + c];
        let rate = 1.0 / self.group_scale;
        let mut lp = 0.0;
        for b in &theta[..p] {
            lp += -0.5 * b * b / s2 - 0.5 * (2.0 * PI * s2).ln();
        }
        let inv_var = (-2.0 * tau).exp();
        for u in &theta[p..p + c] {
            lp += -0.5 * u * u * inv_var - tau - 0.5 * (2.0 * PI).ln();
        }
        lp + rate.ln() - rate * tau.exp() + tau
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let (p, c) = (self.data.n_fixed, self.data.n_groups);
        let (beta, u) = (&theta[..p], &theta[p..p + c]);
        (0..self.data.x.len())
            .map(|i| {
                let eta = self.linear_predictor(i, beta, u);
                self.data.successes[i] * eta - self.data.trials[i] * log1p_exp(eta)
            })
            .sum()
    }

    /// Value and exact gradient.
    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, DVector<f64>), BayesError> {
        if theta.len() != self.dim() {
            return Err(BayesError::Dimension(format!("theta has {} entries, model needs {}", theta.len(), self.dim())));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(BayesError::NonFinite);
        }
        let mut g = vec![0.0; theta.len()];
        let v = self.logp_grad(theta, &mut g);
        if !v.is_finite() {
            return Err(BayesError::NonFinite);
        }
        Ok((v, DVector::from_vec(g)))
    }

    /// Negative Hessian of the log posterior with respect to `(beta, u)` at
    /// fixed `ln sigma_u`.
    pub fn conditional_precision(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.data;
        let (p, c) = (d.n_fixed, d.n_groups);
        let (beta, u) = (&theta[..p], &theta[p..p + c]);
        let m = p + c;
        let mut h = DMatrix::zeros(m, m);
        for i in 0..d.x.len() {
            let mu = logistic(self.linear_predictor(i, beta, u));
            let w = d.trials[i] * mu * (1.0 - mu);
            let gi = p + d.group[i];
            for a in 0..p {
                let wa = w * d.x[i][a];
                for b in 0..=a {
                    h[(a, b)] += wa * d.x[i][b];
                }
                h[(gi, a)] += wa;
            }
            h[(gi, gi)] += w;
        }
        for a in 0..m {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let s2 = self.coef_scale * self.coef_scale;
        for a in 0..p {
            h[(a, a)] += 1.0 / s2;
        }
        let inv_var = (-2.0 * theta[p + c]).exp();
        for a in p..m {
            h[(a, a)] += inv_var;
        }
        h
    }
}

impl LogDensity for HierarchicalModel<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data;
        let (p, c) = (d.n_fixed, d.n_groups);
        let (beta, u) = (&theta[..p], &theta[p..p + c]);
        let tau = theta[p + c];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        for i in 0..d.x.len() {
            let eta = self.linear_predictor(i, beta, u);
            ll += d.successes[i] * eta - d.trials[i] * log1p_exp(eta);
            let r = d.successes[i] - d.trials[i] * logistic(eta);
            for (g, xv) in grad[..p].iter_mut().zip(&d.x[i]) {
                *g += r * xv;
            }
            grad[p + d.group[i]] += r;
        }
        let s2 = self.coef_scale * self.coef_scale;
        for j in 0..p {
            grad[j] -= beta[j] / s2;
        }
        let inv_var = (-2.0 * tau).exp();
        let mut sum_u2 = 0.0;
        for k in 0..c {
            grad[p + k] -= u[k] * inv_var;
            sum_u2 += u[k] * u[k];
        }
        let rate = 1.0 / self.group_scale;
        grad[p + c] = sum_u2 * inv_var - c as f64 - rate * tau.exp() + 1.0;
        ll + self.log_prior(theta)
    }
}

/// The same posterior in non-centered coordinates `(beta, z, ln sigma_u)`
/// with `u = sigma_u z`. HMC explores this space, which removes the funnel
/// between `sigma_u` and the country intercepts when there are few groups.
#[derive(Debug, Clone)]
pub struct NonCentered<'a> {
    pub model: HierarchicalModel<'a>,
}

impl NonCentered<'_> {
    /// Maps a non-centered point to the model's own coordinates.
    pub fn to_centered(&self, z: &[f64], out: &mut [f64]) {
        let (p, c) = (self.model.data.n_fixed, self.model.data.n_groups);
        let sigma = z[p + c].exp();
        out.copy_from_slice(z);
        for k in p..p + c {
            out[k] = sigma * z[k];
        }
    }

    pub fn from_centered(&self, theta: &[f64], out: &mut [f64]) {
        let (p, c) = (self.model.data.n_fixed, self.model.data.n_groups);
        let sigma = theta[p + c].exp();
        out.copy_from_slice(theta);
        for k in p..p + c {
            out[k] = theta[k] / sigma;
        }
    }
}

impl LogDensity for NonCentered<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn logp_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let (p, c) = (self.model.data.n_fixed, self.model.data.n_groups);
        let mut theta = vec![0.0; z.len()];
        self.to_centered(z, &mut theta);
        let lp = self.model.logp_grad(&theta, grad);
        let sigma = theta[p + c].exp();
        let mut chain = 0.0;
        for k in p..p + c {
            chain += grad[k] * theta[k];
            grad[k] *= sigma;
        }
        grad[p + c] += chain + c as f64;
        lp + c as f64 * z[p + c]
    }
}
