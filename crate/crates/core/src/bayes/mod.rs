//! Hierarchical Bayesian logistic regression for MRP.
//!
//! The model has fixed effects `beta` (demographics, with an intercept), a
//! normal random intercept `u_c ~ N(0, sigma_u^2)` per country and
//! `sigma_u ~ Exponential(mean = prior_group_scale)`. Coefficients get
//! independent `N(0, prior_coef_scale^2)` priors. Sampling happens on
//! `ln sigma_u`.

pub mod diagnostics;
pub mod hmc;
pub mod laplace;
pub mod model;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

pub use diagnostics::{diagnose_all, DiagnosticsReport, ParamDiagnostics};
pub use hmc::{ChainStats, HmcSettings};
pub use model::{HierarchicalData, HierarchicalModel, LogDensity, NonCentered};

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("non-finite parameter or log density")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("step size adaptation failed (mean acceptance {0:.3})")]
    AdaptationFailure(f64),
    #[error("every post-warmup transition diverged")]
    AllDivergent,
    #[error("conditional Hessian is not positive definite")]
    HessianNotPD,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MrpModelSpec {
    pub fixed_factors: Vec<String>,
    pub group_factor: String,
    pub prior_coef_scale: f64,
    pub prior_group_scale: f64,
    pub chains: usize,
    pub warmup: usize,
    pub draws_per_chain: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for MrpModelSpec {
    fn default() -> Self {
        MrpModelSpec {
            fixed_factors: vec!["gender".into(), "age_group".into()],
            group_factor: "country".into(),
            prior_coef_scale: 2.5,
            prior_group_scale: 0.5,
            chains: 4,
            warmup: 1000,
            draws_per_chain: 1000,
            target_accept: 0.99,
            seed: 0,
        }
    }
}

impl MrpModelSpec {
    pub fn validate(&self) -> Result<(), BayesError> {
        if self.chains < 1 {
            return Err(BayesError::InvalidSpec("chains must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(BayesError::InvalidSpec("target_accept must lie in (0, 1)".into()));
        }
        if !(self.prior_coef_scale > 0.0 && self.prior_group_scale > 0.0) {
            return Err(BayesError::InvalidSpec("prior scales must be positive".into()));
        }
        if self.draws_per_chain < 1 {
            return Err(BayesError::InvalidSpec("draws_per_chain must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn total_draws(&self) -> usize {
        self.chains * self.draws_per_chain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hmc,
    /// Laplace approximation; flagged as approximate in every output.
    Laplace,
}

/// Posterior draws for one model fit, `S x (p + C + 1)` row-major, chains
/// concatenated in chain order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorDraws {
    pub item_id: String,
    pub label_id: String,
    pub column_names: Vec<String>,
    pub n_fixed: usize,
    pub n_groups: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    #[serde(skip)]
    pub draws: Vec<f64>,
    pub divergence_count: usize,
    pub chain_stats: Vec<ChainStats>,
    pub method: Method,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.n_fixed + self.n_groups + 1
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len() / self.dim()
    }

    pub fn draw(&self, s: usize) -> &[f64] {
        let d = self.dim();
        &self.draws[s * d..(s + 1) * d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|s| self.draw(s)[j]).collect()
    }

    pub fn sigma_u(&self) -> Vec<f64> {
        self.column(self.dim() - 1).into_iter().map(f64::exp).collect()
    }

    pub fn is_approximate(&self) -> bool {
        self.method == Method::Laplace
    }

    pub fn mean_accept(&self) -> f64 {
        crate::stats::mean(&self.chain_stats.iter().map(|c| c.mean_accept).collect::<Vec<_>>())
    }

    pub fn diagnostics(&self) -> DiagnosticsReport {
        diagnose_all(&self.column_names, &self.draws, self.chains)
    }

    /// Columnar CSV: one header row of parameter names, one row per draw.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.column_names.iter().cloned());
        wtr.write_record(&header)?;
        for s in 0..self.n_draws() {
            let mut row = vec![(s / self.draws_per_chain).to_string(), (s % self.draws_per_chain).to_string()];
            row.extend(self.draw(s).iter().map(|v| format!("{v}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Per-parameter summary (mean, SD, 5/50/95% quantiles, R-hat, ESS).
    pub fn summary(&self) -> Vec<ParamSummary> {
        let diag = self.diagnostics();
        (0..self.dim())
            .map(|j| {
                let col = self.column(j);
                let mut sorted = col.clone();
                sorted.sort_by(f64::total_cmp);
                let d = &diag.params[j];
                ParamSummary {
                    name: self.column_names[j].clone(),
                    mean: crate::stats::mean(&col),
                    sd: crate::stats::sd_sample(&col),
                    q05: crate::stats::quantile_sorted(&sorted, 0.05),
                    q50: crate::stats::quantile_sorted(&sorted, 0.5),
                    q95: crate::stats::quantile_sorted(&sorted, 0.95),
                    rhat: d.rhat,
                    ess: d.ess,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Default parameter names: fixed-effect names as given, `u[<group>]` per
/// group, then `log_sigma_u`.
pub fn parameter_names(fixed: &[String], groups: &[String]) -> Vec<String> {
    let mut names = fixed.to_vec();
    names.extend(groups.iter().map(|g| format!("u[{g}]")));
    names.push("log_sigma_u".into());
    names
}

/// Inputs to one fit: fixed-effect design, outcomes, group index per row.
#[derive(Debug, Clone)]
pub struct FitInput<'a> {
    pub item_id: &'a str,
    pub label_id: &'a str,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [bool],
    pub group_index: &'a [usize],
    pub fixed_names: &'a [String],
    pub group_names: &'a [String],
}

impl FitInput<'_> {
    fn data(&self) -> Result<HierarchicalData, BayesError> {
        HierarchicalData::new(self.x, self.y, self.group_index, self.group_names.len())
    }
}

/// Value and exact gradient of the log posterior at `theta`.
pub fn log_posterior(
    spec: &MrpModelSpec,
    x: &DMatrix<f64>,
    y: &[bool],
    group_index: &[usize],
    n_groups: usize,
    theta: &[f64],
) -> Result<(f64, nalgebra::DVector<f64>), BayesError> {
    let data = HierarchicalData::new(x, y, group_index, n_groups)?;
    HierarchicalModel::new(spec, &data).value_and_gradient(theta)
}

fn initial_point(spec: &MrpModelSpec, dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut theta = vec![0.0; dim];
    theta[dim - 1] = spec.prior_group_scale.ln();
    for t in theta.iter_mut() {
        *t += rng.random_range(-0.1..0.1);
    }
    theta
}

/// Runs HMC on the model in `input`.
pub fn sample_hmc(spec: &MrpModelSpec, input: &FitInput<'_>) -> Result<PosteriorDraws, BayesError> {
    let data = input.data()?;
    sample_hmc_data(spec, &data, input)
}

pub fn sample_hmc_data(
    spec: &MrpModelSpec,
    data: &HierarchicalData,
    input: &FitInput<'_>,
) -> Result<PosteriorDraws, BayesError> {
    spec.validate()?;
    let model = NonCentered { model: HierarchicalModel::new(spec, data) };
    let dim = data.dim();
    let settings = HmcSettings {
        warmup: spec.warmup,
        draws: spec.draws_per_chain,
        target_accept: spec.target_accept,
        ..HmcSettings::default()
    };
    let tag = format!("hmc:{}:{}", input.item_id, input.label_id);
    let chains: Vec<Result<hmc::ChainOutput, BayesError>> = crate::par::map_range(spec.chains, |c| {
        let mut rng = rng::derived(spec.seed, &tag, c as u64);
        let start = initial_point(spec, dim, &mut rng);
        let mut init = vec![0.0; dim];
        model.from_centered(&start, &mut init);
        let mut g = vec![0.0; dim];
        if !model.logp_grad(&init, &mut g).is_finite() {
            return Err(BayesError::NonFinite);
        }
        let mut out = hmc::run_chain(&model, &init, &settings, &mut rng);
        let mut theta = vec![0.0; dim];
        for row in out.draws.chunks_mut(dim) {
            model.to_centered(row, &mut theta);
            row.copy_from_slice(&theta);
        }
        Ok(out)
    });
    let mut draws = Vec::with_capacity(spec.total_draws() * dim);
    let mut chain_stats = Vec::with_capacity(spec.chains);
    for c in chains {
        let c = c?;
        draws.extend_from_slice(&c.draws);
        chain_stats.push(c.stats);
    }
    let divergence_count: usize = chain_stats.iter().map(|c| c.divergences).sum();
    if divergence_count == spec.total_draws() {
        return Err(BayesError::AllDivergent);
    }
    let mean_accept = crate::stats::mean(&chain_stats.iter().map(|c| c.mean_accept).collect::<Vec<_>>());
    if mean_accept < 0.5 {
        return Err(BayesError::AdaptationFailure(mean_accept));
    }
    Ok(PosteriorDraws {
        item_id: input.item_id.to_string(),
        label_id: input.label_id.to_string(),
        column_names: parameter_names(input.fixed_names, input.group_names),
        n_fixed: data.n_fixed,
        n_groups: data.n_groups,
        chains: spec.chains,
        draws_per_chain: spec.draws_per_chain,
        draws,
        divergence_count,
        chain_stats,
        method: Method::Hmc,
    })
}

/// Laplace fast path; draws `chains x draws_per_chain` samples.
pub fn laplace_fit(spec: &MrpModelSpec, input: &FitInput<'_>) -> Result<PosteriorDraws, BayesError> {
    let data = input.data()?;
    laplace_fit_data(spec, &data, input)
}

pub fn laplace_fit_data(
    spec: &MrpModelSpec,
    data: &HierarchicalData,
    input: &FitInput<'_>,
) -> Result<PosteriorDraws, BayesError> {
    spec.validate()?;
    let model = HierarchicalModel::new(spec, data);
    let approx = laplace::approximate(&model)?;
    let mut rng = rng::derived(spec.seed, &format!("laplace:{}:{}", input.item_id, input.label_id), 0);
    let draws = approx.sample(spec.total_draws(), &mut rng);
    Ok(PosteriorDraws {
        item_id: input.item_id.to_string(),
        label_id: input.label_id.to_string(),
        column_names: parameter_names(input.fixed_names, input.group_names),
        n_fixed: data.n_fixed,
        n_groups: data.n_groups,
        chains: spec.chains,
        draws_per_chain: spec.draws_per_chain,
        draws,
        divergence_count: 0,
        chain_stats: Vec::new(),
        method: Method::Laplace,
    })
}

/// Mode of the Laplace approximation (conditional mode at the most probable
/// grid value of `ln sigma_u`).
pub fn laplace_map(spec: &MrpModelSpec, data: &HierarchicalData) -> Result<Vec<f64>, BayesError> {
    Ok(laplace::approximate(&HierarchicalModel::new(spec, data))?.map)
}
