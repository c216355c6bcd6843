//! Logistic regression by iteratively reweighted least squares.
//!
//! Design matrices are stored row-sparse: dummy-coded factors dominate every
//! model in this crate, so a row has a handful of non-zeros even when the
//! model has hundreds of columns. Fitting works on binomial counts
//! (successes out of trials per row); Bernoulli data is the special case of
//! one trial per row, and [`fit_logistic`] accepts it directly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::stats::{log1p_exp, logistic, normal_quantile, two_sided_p};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("outcome has no variation")]
    NoVariation,
    #[error("complete or quasi-complete separation (|beta|_inf = {max_abs_beta:.3e})")]
    Separation { max_abs_beta: f64 },
    #[error("weighted normal equations are singular")]
    Singular,
    #[error("fewer observations ({n}) than columns ({p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("duplicate design column `{0}`")]
    DuplicateColumn(String),
    #[error("fewer than two clusters")]
    DegenerateClusters,
    #[error("coefficient {0} has zero variance")]
    ZeroVariance(usize),
    #[error("fit did not converge")]
    NotConverged,
}

type Result<T> = std::result::Result<T, GlmError>;

/// Row-sparse design matrix. Column 0 is the intercept when built through
/// [`DesignBuilder`].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    pub column_names: Vec<String>,
    /// Factor name -> dropped reference level.
    pub reference_levels: BTreeMap<String, String>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn row_dot(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).map(|(j, v)| beta[j] * v).sum()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn from_dense(m: &DMatrix<f64>, column_names: Vec<String>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        DesignMatrix {
            n_cols: m.ncols(),
            indptr,
            indices,
            values,
            column_names,
            reference_levels: BTreeMap::new(),
        }
    }

    /// Builds a matrix from explicit sparse rows.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>, column_names: Vec<String>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (j, v) in row {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        DesignMatrix {
            n_cols: column_names.len(),
            indptr,
            indices,
            values,
            column_names,
            reference_levels: BTreeMap::new(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.n_cols);
        for i in 0..self.nrows() {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Keeps the rows whose index satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> DesignMatrix {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.nrows() {
            if keep(i) {
                for (j, v) in self.row(i) {
                    indices.push(j);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
        }
        DesignMatrix { indptr, indices, values, ..self.clone() }
    }
}

enum Term {
    Factor { name: String, values: Vec<String> },
    Numeric { name: String, values: Vec<f64> },
}

/// Builds an intercept-first design matrix from factor and numeric terms.
/// Factors are dummy coded against their lexicographically first level.
pub struct DesignBuilder {
    n: usize,
    terms: Vec<Term>,
}

impl DesignBuilder {
    pub fn new(n: usize) -> Self {
        DesignBuilder { n, terms: Vec::new() }
    }

    pub fn factor<S: AsRef<str>>(mut self, name: &str, values: &[S]) -> Self {
        self.terms.push(Term::Factor {
            name: name.to_string(),
            values: values.iter().map(|s| s.as_ref().to_string()).collect(),
        });
        self
    }

    pub fn numeric(mut self, name: &str, values: Vec<f64>) -> Self {
        self.terms.push(Term::Numeric { name: name.to_string(), values });
        self
    }

    pub fn build(self) -> Result<DesignMatrix> {
        let mut column_names = vec!["(Intercept)".to_string()];
        let mut reference_levels = BTreeMap::new();
        let mut rows: Vec<Vec<(usize, f64)>> = (0..self.n).map(|_| vec![(0, 1.0)]).collect();
        for term in &self.terms {
            match term {
                Term::Factor { name, values } => {
                    if values.len() != self.n {
                        return Err(GlmError::Dimension(format!("factor `{name}` has {} values, expected {}", values.len(), self.n)));
                    }
                    let levels: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                    let mut levels = levels.into_iter();
                    let Some(reference) = levels.next() else { continue };
                    reference_levels.insert(name.clone(), reference.to_string());
                    let mut col_of: HashMap<&str, usize> = HashMap::new();
                    for level in levels {
                        col_of.insert(level, column_names.len());
                        column_names.push(format!("{name}{level}"));
                    }
                    for (row, v) in rows.iter_mut().zip(values) {
                        if let Some(&c) = col_of.get(v.as_str()) {
                            row.push((c, 1.0));
                        }
                    }
                }
                Term::Numeric { name, values } => {
                    if values.len() != self.n {
                        return Err(GlmError::Dimension(format!("column `{name}` has {} values, expected {}", values.len(), self.n)));
                    }
                    let c = column_names.len();
                    column_names.push(name.clone());
                    for (row, &v) in rows.iter_mut().zip(values) {
                        row.push((c, v));
                    }
                }
            }
        }
        let mut m = DesignMatrix::from_rows(rows, column_names);
        m.reference_levels = reference_levels;
        check_distinct_columns(&m)?;
        Ok(m)
    }
}

fn check_distinct_columns(m: &DesignMatrix) -> Result<()> {
    let mut cols: Vec<Vec<(usize, u64)>> = vec![Vec::new(); m.ncols()];
    for i in 0..m.nrows() {
        for (j, v) in m.row(i) {
            cols[j].push((i, v.to_bits()));
        }
    }
    let mut seen: HashMap<&[(usize, u64)], usize> = HashMap::new();
    for (j, col) in cols.iter().enumerate() {
        if let Some(&_first) = seen.get(col.as_slice()) {
            return Err(GlmError::DuplicateColumn(m.column_names[j].clone()));
        }
        seen.insert(col.as_slice(), j);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub beta_tol: f64,
    pub loglik_rel_tol: f64,
    pub separation_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { max_iter: 100, beta_tol: 1e-8, loglik_rel_tol: 1e-10, separation_bound: 1e4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Model,
    ClusterRobust,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub column_names: Vec<String>,
}

impl GlmFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.column_names.iter().position(|c| c == name).map(|j| self.coefficients[j])
    }

    pub fn std_errors(&self) -> DVector<f64> {
        DVector::from_iterator(self.covariance.nrows(), self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()))
    }

    pub fn with_covariance(mut self, cov: DMatrix<f64>, kind: CovarianceKind) -> Self {
        self.covariance = cov;
        self.covariance_kind = kind;
        self
    }
}

/// Binomial log-likelihood `sum k*eta - n*ln(1 + e^eta)`.
pub fn log_likelihood(x: &DesignMatrix, successes: &[f64], trials: &[f64], beta: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta = x.row_dot(i, beta);
            successes[i] * eta - trials[i] * log1p_exp(eta)
        })
        .sum()
}

/// Gradient of [`log_likelihood`] with respect to `beta`.
pub fn score(x: &DesignMatrix, successes: &[f64], trials: &[f64], beta: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let r = successes[i] - trials[i] * logistic(x.row_dot(i, beta));
        for (j, v) in x.row(i) {
            g[j] += r * v;
        }
    }
    g
}

/// Fisher information `X' W X` with `W = n p (1 - p)`.
pub fn information(x: &DesignMatrix, trials: &[f64], beta: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut info = DMatrix::zeros(p, p);
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(16);
    for i in 0..x.nrows() {
        let mu = logistic(x.row_dot(i, beta));
        let w = trials[i] * mu * (1.0 - mu);
        if w == 0.0 {
            continue;
        }
        nz.clear();
        nz.extend(x.row(i));
        for &(a, va) in &nz {
            let wa = w * va;
            for &(b, vb) in &nz {
                if b <= a {
                    info[(a, b)] += wa * vb;
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    info
}

fn to_bool_counts(y: &[bool]) -> (Vec<f64>, Vec<f64>) {
    (y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), vec![1.0; y.len()])
}

/// Maximum-likelihood logistic regression on Bernoulli outcomes.
pub fn fit_logistic(x: &DesignMatrix, y: &[bool]) -> Result<GlmFit> {
    let (k, n) = to_bool_counts(y);
    fit_binomial(x, &k, &n, &IrlsOptions::default())
}

/// Maximum-likelihood logistic regression on binomial counts.
pub fn fit_binomial(x: &DesignMatrix, successes: &[f64], trials: &[f64], opts: &IrlsOptions) -> Result<GlmFit> {
    let (n_rows, p) = (x.nrows(), x.ncols());
    if successes.len() != n_rows || trials.len() != n_rows {
        return Err(GlmError::Dimension(format!("{n_rows} design rows but {} / {} outcomes", successes.len(), trials.len())));
    }
    let total_trials: f64 = trials.iter().sum();
    let total_successes: f64 = successes.iter().sum();
    if (total_trials.round() as usize) < p {
        return Err(GlmError::TooFewObservations { n: total_trials.round() as usize, p });
    }
    if total_successes <= 0.0 || total_successes >= total_trials {
        return Err(GlmError::NoVariation);
    }

    let mut beta = vec![0.0; p];
    let mut ll = log_likelihood(x, successes, trials, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = information(x, trials, &beta);
    for it in 1..=opts.max_iter {
        iterations = it;
        let g = score(x, successes, trials, &beta);
        let chol = info.clone().cholesky().ok_or(GlmError::Singular)?;
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut candidate: Vec<f64>;
        let mut ll_new;
        loop {
            candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            ll_new = log_likelihood(x, successes, trials, &candidate);
            if ll_new >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let max_step = beta
            .iter()
            .zip(&candidate)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let rel_change = (ll_new - ll).abs() / (ll.abs() + 1e-300);
        beta = candidate;
        ll = ll_new;
        let max_abs = beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
        if max_abs > opts.separation_bound {
            return Err(GlmError::Separation { max_abs_beta: max_abs });
        }
        info = information(x, trials, &beta);
        if max_step < opts.beta_tol || rel_change < opts.loglik_rel_tol {
            converged = true;
            break;
        }
        if completely_separated(x, successes, trials, &beta) {
            return Err(GlmError::Separation { max_abs_beta: max_abs });
        }
    }
    if !converged && any_pinned(x, trials, &beta) {
        let max_abs = beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
        return Err(GlmError::Separation { max_abs_beta: max_abs });
    }
    let covariance = info.clone().cholesky().ok_or(GlmError::Singular)?.inverse();
    Ok(GlmFit {
        coefficients: DVector::from_vec(beta),
        covariance,
        covariance_kind: CovarianceKind::Model,
        log_likelihood: ll,
        converged,
        iterations,
        column_names: x.column_names.clone(),
    })
}

fn completely_separated(x: &DesignMatrix, successes: &[f64], trials: &[f64], beta: &[f64]) -> bool {
    (0..x.nrows()).all(|i| {
        let frac = successes[i] / trials[i].max(1e-300);
        if frac != 0.0 && frac != 1.0 {
            return false;
        }
        let mu = logistic(x.row_dot(i, beta));
        (mu - frac).abs() < 1e-9
    })
}

fn any_pinned(x: &DesignMatrix, trials: &[f64], beta: &[f64]) -> bool {
    (0..x.nrows()).any(|i| {
        let mu = logistic(x.row_dot(i, beta));
        trials[i] > 0.0 && !(1e-10..=1.0 - 1e-10).contains(&mu)
    })
}

/// Cluster-robust sandwich covariance `c * A^-1 B A^-1` for a Bernoulli fit,
/// where `A` is the information at the fitted coefficients, `B` sums outer
/// products of per-cluster score totals and `c = G / (G - 1)`.
pub fn cluster_robust_cov<C: Ord + Clone>(
    x: &DesignMatrix,
    y: &[bool],
    fit: &GlmFit,
    cluster_ids: &[C],
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if y.len() != n || cluster_ids.len() != n {
        return Err(GlmError::Dimension("cluster ids and outcomes must match design rows".into()));
    }
    let beta = fit.coefficients.as_slice();
    let p = x.ncols();
    let mut sums: BTreeMap<C, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let r = if y[i] { 1.0 } else { 0.0 } - logistic(x.row_dot(i, beta));
        let s = sums.entry(cluster_ids[i].clone()).or_insert_with(|| DVector::zeros(p));
        for (j, v) in x.row(i) {
            s[j] += r * v;
        }
    }
    let g = sums.len();
    if g < 2 {
        return Err(GlmError::DegenerateClusters);
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in sums.values() {
        meat += s * s.transpose();
    }
    let ones = vec![1.0; n];
    let bread = information(x, &ones, beta).cholesky().ok_or(GlmError::Singular)?.inverse();
    let factor = g as f64 / (g as f64 - 1.0);
    let mut v = &bread * meat * &bread * factor;
    // symmetrize away rounding
    for a in 0..p {
        for b in 0..a {
            let m = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = m;
            v[(b, a)] = m;
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci95: (f64, f64),
}

/// Wald z-test with a normal reference distribution.
pub fn wald(estimate: f64, se: f64) -> WaldTest {
    let z = estimate / se;
    let q = normal_quantile(0.975);
    WaldTest { estimate, se, z, p_value: two_sided_p(z), ci95: (estimate - q * se, estimate + q * se) }
}

pub fn wald_test(fit: &GlmFit, coef_index: usize) -> Result<WaldTest> {
    let var = fit.covariance[(coef_index, coef_index)];
    if !(var > 0.0) {
        return Err(GlmError::ZeroVariance(coef_index));
    }
    Ok(wald(fit.coefficients[coef_index], var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Coefficient table (name, estimate, se, z, p) for serialization.
pub fn coefficient_table(fit: &GlmFit) -> Vec<CoefRow> {
    (0..fit.coefficients.len())
        .map(|j| {
            let se = fit.covariance[(j, j)].max(0.0).sqrt();
            let t = wald(fit.coefficients[j], se);
            CoefRow { name: fit.column_names[j].clone(), estimate: t.estimate, se, z: t.z, p: t.p_value }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn intercept_only(n: usize) -> DesignMatrix {
        DesignBuilder::new(n).build().unwrap()
    }

    #[test]
    fn intercept_only_is_logit_of_mean() {
        let fit = fit_logistic(&intercept_only(4), &[true, true, true, false]).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], 3f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn equal_group_rates_give_zero_slope() {
        let g = ["a", "a", "a", "a", "b", "b", "b", "b"];
        let y = [true, false, true, false, true, false, false, true];
        let x = DesignBuilder::new(8).factor("g", &g).build().unwrap();
        let fit = fit_logistic(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coef("gb").unwrap(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn perfect_separation_detected() {
        let xs = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [false, false, false, true, true, true];
        let x = DesignBuilder::new(6).numeric("x", xs).build().unwrap();
        assert!(matches!(fit_logistic(&x, &y), Err(GlmError::Separation { .. })));
    }

    #[test]
    fn constant_outcome_is_no_variation() {
        assert_eq!(fit_logistic(&intercept_only(3), &[true, true, true]), Err(GlmError::NoVariation));
    }

    #[test]
    fn reference_level_is_lexicographic_first() {
        let x = DesignBuilder::new(3).factor("country", &["US", "KR", "DE"]).build().unwrap();
        assert_eq!(x.reference_levels["country"], "DE");
        assert_eq!(x.column_names, vec!["(Intercept)", "countryKR", "countryUS"]);
    }

    #[test]
    fn duplicate_columns_rejected() {
        let err = DesignBuilder::new(3)
            .numeric("a", vec![1.0, 2.0, 3.0])
            .numeric("b", vec![1.0, 2.0, 3.0])
            .build();
        assert_eq!(err, Err(GlmError::DuplicateColumn("b".into())));
    }

    #[test]
    fn single_cluster_is_degenerate() {
        let x = intercept_only(4);
        let y = [true, false, true, false];
        let fit = fit_logistic(&x, &y).unwrap();
        assert_eq!(cluster_robust_cov(&x, &y, &fit, &[1, 1, 1, 1]), Err(GlmError::DegenerateClusters));
    }

    #[test]
    fn wald_reference_values() {
        let t = wald(0.0, 0.7);
        assert_eq!((t.z, t.p_value), (0.0, 1.0));
        let t = wald(1.96, 1.0);
        assert_abs_diff_eq!(t.p_value, 0.05, epsilon = 1e-4);
        assert_abs_diff_eq!(t.ci95.0, 0.0, epsilon = 1e-3);
        assert_abs_diff_eq!(t.ci95.1, 3.92, epsilon = 1e-3);
        // Uncertainty row of the published Hofstede regression
        let t = wald(-0.289, 0.036);
        assert_abs_diff_eq!(t.z.abs(), 8.03, epsilon = 0.01);
        assert!(t.p_value < 0.001);
    }

    #[test]
    fn zero_variance_coefficient_errors() {
        let fit = GlmFit {
            coefficients: DVector::from_vec(vec![1.0]),
            covariance: DMatrix::zeros(1, 1),
            covariance_kind: CovarianceKind::Model,
            log_likelihood: 0.0,
            converged: true,
            iterations: 1,
            column_names: vec!["a".into()],
        };
        assert_eq!(wald_test(&fit, 0), Err(GlmError::ZeroVariance(0)));
    }
}
