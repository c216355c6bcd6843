//! Rank-normalized split-R-hat and bulk effective sample size.

use serde::Serialize;

use crate::stats::{average_ranks, mean, normal_quantile, variance_sample};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    /// `None` with a single chain or degenerate draws.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    /// All draws identical (or zero within-chain variance).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub single_chain: bool,
    /// True when any parameter has R-hat above 1.01 or is degenerate.
    pub convergence_failure: bool,
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len() as f64;
    let ranks = average_ranks(&flat);
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        out.push(
            c.iter()
                .map(|_| {
                    let r = ranks[k];
                    k += 1;
                    normal_quantile((r - 0.375) / (s + 0.25))
                })
                .collect(),
        );
    }
    out
}

fn rhat_raw(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance_sample(c)).collect::<Vec<_>>());
    let b = n * variance_sample(&means);
    if !(w > 0.0) {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

fn autocov_at(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence. Autocovariances
/// are computed lazily, lag by lag, until the sequence truncates.
fn ess_raw(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len() as f64;
    let n = chains[0].len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocov_at(c, mu, 0)).collect();
    let w = mean(&acov0.iter().map(|a| a * nf / (nf - 1.0)).collect::<Vec<_>>());
    let b = if chains.len() > 1 { variance_sample(&means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b;
    if !(var_plus > 0.0) {
        return None;
    }
    let rho = |t: usize| {
        let acov_t = mean(&chains.iter().zip(&means).map(|(c, &mu)| autocov_at(c, mu, t)).collect::<Vec<_>>());
        1.0 - (w - acov_t) / var_plus
    };
    let mut pair_sums: Vec<f64> = Vec::new();
    let mut t = 0;
    while t + 1 < n {
        let p = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if p < 0.0 {
            break;
        }
        let p = pair_sums.last().map_or(p, |&prev: &f64| p.min(prev));
        pair_sums.push(p);
        t += 2;
    }
    let s = m * nf;
    let tau = (-1.0 + 2.0 * pair_sums.iter().sum::<f64>()).max(1.0 / s.log10());
    Some(s / tau)
}

/// Diagnostics for one parameter given its draws split by chain.
pub fn diagnose(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostics {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let degenerate = flat.windows(2).all(|w| w[0] == w[1])
        || chains.iter().all(|c| c.windows(2).all(|w| w[0] == w[1]));
    if degenerate || flat.len() < 4 {
        return ParamDiagnostics { name: name.to_string(), rhat: None, ess: None, degenerate: true };
    }
    let split_chains = split(chains);
    let z = rank_normalize(&split_chains);
    let ess = ess_raw(&z);
    let rhat = if chains.len() < 2 {
        None
    } else {
        let med = crate::stats::median(&flat);
        let folded: Vec<Vec<f64>> = split_chains.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
        let bulk = rhat_raw(&z);
        let tail = rhat_raw(&rank_normalize(&folded));
        match (bulk, tail) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    };
    ParamDiagnostics { name: name.to_string(), rhat, ess, degenerate: false }
}

/// `draws` holds one row per draw (chain-major order), `n_chains` chains of
/// equal length.
pub fn diagnose_all(names: &[String], draws: &[f64], n_chains: usize) -> DiagnosticsReport {
    let dim = names.len();
    let total = if dim == 0 { 0 } else { draws.len() / dim };
    let per_chain = if n_chains == 0 { 0 } else { total / n_chains };
    let params: Vec<ParamDiagnostics> = (0..dim)
        .map(|j| {
            let chains: Vec<Vec<f64>> = (0..n_chains)
                .map(|c| (0..per_chain).map(|s| draws[(c * per_chain + s) * dim + j]).collect())
                .collect();
            diagnose(&names[j], &chains)
        })
        .collect();
    let convergence_failure = params.iter().any(|p| p.degenerate || p.rhat.is_some_and(|r| r > 1.01));
    DiagnosticsReport { params, single_chain: n_chains < 2, convergence_failure }
}
