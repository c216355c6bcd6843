//! Matched estimation of survey-language effects among bilingual
//! respondents.
//!
//! Treated units are English-surveyed ambassadors, controls are compatriots
//! surveyed in their local language. Both must play in English at least
//! `eligibility_threshold` on the 0..5 scale. Pairs are formed greedily,
//! without replacement, in descending order of the treated propensity
//! logit: each treated unit takes the Mahalanobis-nearest control whose
//! propensity logit lies within the caliper.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{AnnotationRecord, Gender};
use crate::glm::{self, DesignMatrix, GlmError};
use crate::mrp::{Classification, ConsistencyVerdict};
use crate::{rng, stats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("no eligible {0} units")]
    NoEligibleUnits(&'static str),
    #[error("covariance matrix is singular even after ridge")]
    SingularCovariance,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least 2 matched pairs, got {0}")]
    TooFewPairs(usize),
    #[error("missing outcome for respondent {0}")]
    MissingOutcome(String),
    #[error("invalid match spec: {0}")]
    InvalidSpec(String),
}

type Result<T> = std::result::Result<T, MatchingError>;

pub const COVARIATES: [&str; 4] = ["age_group", "gender_male", "play_frequency", "english_play_frequency"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaliperMode {
    /// Caliper in standard deviations of the propensity logit.
    PropensityLogitSd,
    /// Caliper on the raw Mahalanobis distance.
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterBy {
    Pair,
    Respondent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchSpec {
    pub treatment_language: String,
    pub caliper: f64,
    pub caliper_mode: CaliperMode,
    pub eligibility_threshold: u8,
    pub cluster_by: ClusterBy,
    pub seed: u64,
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec {
            treatment_language: "en".into(),
            caliper: 0.2,
            caliper_mode: CaliperMode::PropensityLogitSd,
            eligibility_threshold: 4,
            cluster_by: ClusterBy::Pair,
            seed: 0,
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.caliper > 0.0) {
            return Err(MatchingError::InvalidSpec("caliper must be positive".into()));
        }
        Ok(())
    }

    pub fn is_treated(&self, r: &AnnotationRecord) -> bool {
        *r.survey_language == self.treatment_language && r.ambassador
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: String,
    pub covariates: Vec<f64>,
    pub treated: bool,
}

pub fn covariates_of(r: &AnnotationRecord) -> Vec<f64> {
    vec![
        f64::from(r.age_group.ordinal()),
        if r.gender == Gender::Male { 1.0 } else { 0.0 },
        f64::from(r.play_frequency),
        f64::from(r.english_play_frequency),
    ]
}

/// One unit per eligible respondent, in respondent-id order.
pub fn units_from_records(records: &[&AnnotationRecord], spec: &MatchSpec) -> Vec<Unit> {
    let mut seen = BTreeMap::new();
    for r in records {
        if r.english_play_frequency >= spec.eligibility_threshold {
            seen.entry(&*r.respondent_id).or_insert_with(|| Unit {
                id: r.respondent_id.to_string(),
                covariates: covariates_of(r),
                treated: spec.is_treated(r),
            });
        }
    }
    seen.into_values().collect()
}

/// `sqrt((u - v)' S^-1 (u - v))`.
pub fn mahalanobis(u: &[f64], v: &[f64], s: &DMatrix<f64>) -> Result<f64> {
    if u.len() != v.len() || s.nrows() != u.len() || s.ncols() != u.len() {
        return Err(MatchingError::Dimension("vector and covariance sizes differ".into()));
    }
    let inv = inverse_with_ridge(s)?;
    Ok(mahalanobis_with(u, v, &inv))
}

fn mahalanobis_with(u: &[f64], v: &[f64], inv: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(u.len(), u.iter().zip(v).map(|(a, b)| a - b));
    (d.transpose() * inv * &d)[(0, 0)].max(0.0).sqrt()
}

fn inverse_with_ridge(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let well_conditioned = |m: &DMatrix<f64>| {
        let ev = m.clone().symmetric_eigen().eigenvalues;
        let max = ev.iter().copied().fold(f64::MIN, f64::max);
        let min = ev.iter().copied().fold(f64::MAX, f64::min);
        min > 1e-12 * max.max(1e-300)
    };
    let m = if well_conditioned(s) { s.clone() } else { s + DMatrix::identity(n, n) * 1e-8 };
    m.cholesky().map(|c| c.inverse()).ok_or(MatchingError::SingularCovariance)
}

/// Sample covariance of the rows of `x`.
fn covariance(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut s = DMatrix::zeros(p, p);
    for r in x {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    s / (n.saturating_sub(1).max(1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub pair_id: usize,
    pub treated_id: String,
    pub control_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedSample {
    pub pairs: Vec<MatchedPair>,
    pub n_treated: usize,
    pub n_control: usize,
    pub unmatched_treated: usize,
    /// The propensity model failed; pairs come from raw Mahalanobis
    /// nearest neighbours and a propensity caliper is not applied.
    pub propensity_fallback: bool,
    pub balance: Vec<BalanceRow>,
}

/// Indices of covariates that vary across `units`.
fn varying_columns(units: &[Unit]) -> Vec<usize> {
    let p = units.first().map_or(0, |u| u.covariates.len());
    (0..p)
        .filter(|&j| {
            let first = units[0].covariates[j];
            units.iter().any(|u| u.covariates[j] != first)
        })
        .collect()
}

fn propensity_logits(units: &[Unit], cols: &[usize]) -> std::result::Result<Vec<f64>, GlmError> {
    let rows: Vec<Vec<(usize, f64)>> = units
        .iter()
        .map(|u| std::iter::once((0, 1.0)).chain(cols.iter().enumerate().map(|(k, &j)| (k + 1, u.covariates[j]))).collect())
        .collect();
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(cols.iter().map(|&j| COVARIATES.get(j).map_or_else(|| format!("x{j}"), |s| s.to_string())));
    let x = DesignMatrix::from_rows(rows, names);
    let y: Vec<bool> = units.iter().map(|u| u.treated).collect();
    let fit = glm::fit_logistic(&x, &y)?;
    let beta: Vec<f64> = fit.coefficients.iter().copied().collect();
    Ok((0..units.len()).map(|i| x.row_dot(i, &beta)).collect())
}

/// Greedy one-to-one matching without replacement.
pub fn match_units(units: &[Unit], spec: &MatchSpec) -> Result<MatchedSample> {
    spec.validate()?;
    let treated: Vec<usize> = (0..units.len()).filter(|&i| units[i].treated).collect();
    let controls: Vec<usize> = (0..units.len()).filter(|&i| !units[i].treated).collect();
    if treated.is_empty() {
        return Err(MatchingError::NoEligibleUnits("treated"));
    }
    if controls.is_empty() {
        return Err(MatchingError::NoEligibleUnits("control"));
    }
    let cols = varying_columns(units);
    let reduced: Vec<Vec<f64>> = units.iter().map(|u| cols.iter().map(|&j| u.covariates[j]).collect()).collect();
    let inv = if cols.is_empty() { DMatrix::zeros(0, 0) } else { inverse_with_ridge(&covariance(&reduced))? };

    let logits = if cols.is_empty() { Err(GlmError::NoVariation) } else { propensity_logits(units, &cols) };
    let fallback = logits.is_err();
    if let Err(e) = &logits {
        log::warn!("propensity model failed ({e}); matching on Mahalanobis distance without caliper");
    }
    let logits = logits.unwrap_or_else(|_| vec![0.0; units.len()]);
    let logit_sd = stats::sd_sample(&logits);
    let within_caliper = |t: usize, c: usize, dist: f64| -> bool {
        match spec.caliper_mode {
            CaliperMode::PropensityLogitSd => fallback || (logits[t] - logits[c]).abs() <= spec.caliper * logit_sd + 1e-12,
            CaliperMode::Mahalanobis => dist <= spec.caliper,
        }
    };

    let mut order = treated.clone();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(units[a].id.cmp(&units[b].id)));
    let mut available = vec![true; units.len()];
    let mut r = rng::derived(spec.seed, "match:ties", 0);
    let mut pairs = Vec::new();
    let mut unmatched = 0;
    for t in order {
        let mut best = f64::INFINITY;
        let mut ties: Vec<usize> = Vec::new();
        for &c in &controls {
            if !available[c] {
                continue;
            }
            let dist = mahalanobis_with(&reduced[t], &reduced[c], &inv);
            if !within_caliper(t, c, dist) {
                continue;
            }
            if dist < best - 1e-12 {
                best = dist;
                ties.clear();
                ties.push(c);
            } else if (dist - best).abs() <= 1e-12 {
                ties.push(c);
            }
        }
        if ties.is_empty() {
            unmatched += 1;
            continue;
        }
        let c = if ties.len() == 1 { ties[0] } else { ties[r.random_range(0..ties.len())] };
        available[c] = false;
        pairs.push(MatchedPair {
            pair_id: pairs.len() + 1,
            treated_id: units[t].id.clone(),
            control_id: units[c].id.clone(),
            distance: best,
        });
    }
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.treated_id.as_str(), p.control_id.as_str()]).collect();
    assert_eq!(ids.len(), 2 * pairs.len(), "a respondent appears in two pairs");
    let balance = balance_table(units, &pairs);
    Ok(MatchedSample {
        pairs,
        n_treated: treated.len(),
        n_control: controls.len(),
        unmatched_treated: unmatched,
        propensity_fallback: fallback,
        balance,
    })
}

/// Standardized mean differences before and after matching. Both use the
/// pre-match pooled SD `sqrt((var_t + var_c) / 2)`, so the two columns are
/// on the same scale; a zero SD gives an SMD of 0.
pub fn balance_table(units: &[Unit], pairs: &[MatchedPair]) -> Vec<BalanceRow> {
    let p = units.first().map_or(0, |u| u.covariates.len());
    let by_id: BTreeMap<&str, &Unit> = units.iter().map(|u| (u.id.as_str(), u)).collect();
    (0..p)
        .map(|j| {
            let col = |pred: &dyn Fn(&Unit) -> bool| units.iter().filter(|u| pred(u)).map(|u| u.covariates[j]).collect::<Vec<_>>();
            let t = col(&|u| u.treated);
            let c = col(&|u| !u.treated);
            let sd = ((stats::variance_sample(&t) + stats::variance_sample(&c)) / 2.0).sqrt();
            let smd = |a: &[f64], b: &[f64]| {
                if sd > 0.0 && sd.is_finite() && !a.is_empty() && !b.is_empty() {
                    (stats::mean(a) - stats::mean(b)) / sd
                } else {
                    0.0
                }
            };
            let mt: Vec<f64> = pairs.iter().map(|p| by_id[p.treated_id.as_str()].covariates[j]).collect();
            let mc: Vec<f64> = pairs.iter().map(|p| by_id[p.control_id.as_str()].covariates[j]).collect();
            BalanceRow {
                covariate: COVARIATES.get(j).map_or_else(|| format!("x{j}"), |s| s.to_string()),
                smd_before: smd(&t, &c),
                smd_after: smd(&mt, &mc),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageEffect {
    pub n_pairs: usize,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub mean_diff: f64,
    pub diff_ci95: (f64, f64),
    /// `None` when the logistic fit is unavailable (no outcome variation or
    /// separation).
    pub odds_ratio: Option<f64>,
    pub or_ci95: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

/// Logistic regression of the outcome on treatment over matched units,
/// with cluster-robust covariance.
pub fn language_effect(sample: &MatchedSample, outcomes: &BTreeMap<String, bool>, cluster_by: ClusterBy) -> Result<LanguageEffect> {
    let n = sample.pairs.len();
    if n < 2 {
        return Err(MatchingError::TooFewPairs(n));
    }
    let outcome = |id: &str| outcomes.get(id).copied().ok_or_else(|| MatchingError::MissingOutcome(id.to_string()));
    let mut y = Vec::with_capacity(2 * n);
    let mut rows = Vec::with_capacity(2 * n);
    let mut clusters: Vec<String> = Vec::with_capacity(2 * n);
    for p in &sample.pairs {
        for (id, treat) in [(&p.treated_id, 1.0), (&p.control_id, 0.0)] {
            y.push(outcome(id)?);
            rows.push(if treat == 1.0 { vec![(0, 1.0), (1, 1.0)] } else { vec![(0, 1.0)] });
            clusters.push(match cluster_by {
                ClusterBy::Pair => format!("{:012}", p.pair_id),
                ClusterBy::Respondent => id.clone(),
            });
        }
    }
    let yt: Vec<f64> = y.iter().step_by(2).map(|b| f64::from(u8::from(*b))).collect();
    let yc: Vec<f64> = y.iter().skip(1).step_by(2).map(|b| f64::from(u8::from(*b))).collect();
    let (mt, mc) = (stats::mean(&yt), stats::mean(&yc));
    let diff = mt - mc;
    let se = (mt * (1.0 - mt) / n as f64 + mc * (1.0 - mc) / n as f64).sqrt();
    let z = stats::normal_quantile(0.975);
    let mut effect = LanguageEffect {
        n_pairs: n,
        mean_treated: mt,
        mean_control: mc,
        mean_diff: diff,
        diff_ci95: (diff - z * se, diff + z * se),
        odds_ratio: None,
        or_ci95: None,
        p_value: None,
        note: None,
    };
    let x = DesignMatrix::from_rows(rows, vec!["(Intercept)".into(), "treatment".into()]);
    let fit = glm::fit_logistic(&x, &y).and_then(|f| {
        let cov = glm::cluster_robust_cov(&x, &y, &f, &clusters)?;
        Ok(f.with_covariance(cov, glm::CovarianceKind::ClusterRobust))
    });
    match fit {
        Ok(f) => {
            let w = glm::wald_test(&f, 1).map_err(|e| MatchingError::Dimension(e.to_string()))?;
            effect.odds_ratio = Some(w.estimate.exp());
            effect.or_ci95 = Some(((w.estimate - z * w.se).exp(), (w.estimate + z * w.se).exp()));
            effect.p_value = Some(w.p_value);
        }
        Err(e) => effect.note = Some(e.to_string()),
    }
    Ok(effect)
}

/// One row of the sweep over (country, item, label) contexts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextEffect {
    pub country: String,
    pub item_id: String,
    pub label_id: String,
    pub classification: Option<Classification>,
    pub propensity_fallback: bool,
    pub unmatched_treated: usize,
    #[serde(flatten)]
    pub effect: LanguageEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextMatch {
    pub country: String,
    pub item_id: String,
    pub sample: MatchedSample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub matches: Vec<ContextMatch>,
    pub effects: Vec<ContextEffect>,
    /// Share of contexts with p < 0.05, by class.
    pub significant_share: BTreeMap<Classification, f64>,
    pub infeasible_contexts: usize,
    pub notice: Option<String>,
}

/// Matches within every (country, item) and estimates the language effect
/// for every label of that item.
pub fn language_effect_sweep(records: &[AnnotationRecord], verdicts: &[ConsistencyVerdict], spec: &MatchSpec) -> Sweep {
    let class_of: BTreeMap<(&str, &str), Classification> = verdicts
        .iter()
        .map(|v| ((v.item_id.as_str(), v.label_id.as_str()), v.classification))
        .collect();
    let mut groups: BTreeMap<(&str, &str), Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.country, &r.item_id)).or_default().push(r);
    }
    let groups: Vec<((&str, &str), Vec<&AnnotationRecord>)> = groups.into_iter().collect();
    let per_group = crate::par::map(&groups, |((country, item), recs)| {
        let labels: BTreeSet<&str> = recs.iter().map(|r| &*r.label_id).collect();
        let local = MatchSpec { seed: rng::derive_seed(spec.seed, &format!("match:{country}:{item}"), 0), ..spec.clone() };
        let units = units_from_records(recs, &local);
        let sample = match match_units(&units, &local) {
            Ok(s) => s,
            Err(_) => return (None, Vec::new(), labels.len()),
        };
        let mut effects = Vec::new();
        let mut infeasible = 0;
        for label in labels {
            let outcomes: BTreeMap<String, bool> = recs
                .iter()
                .filter(|r| &*r.label_id == label)
                .map(|r| (r.respondent_id.to_string(), r.annotated))
                .collect();
            match language_effect(&sample, &outcomes, spec.cluster_by) {
                Ok(effect) => effects.push(ContextEffect {
                    country: country.to_string(),
                    item_id: item.to_string(),
                    label_id: label.to_string(),
                    classification: class_of.get(&(*item, label)).copied(),
                    propensity_fallback: sample.propensity_fallback,
                    unmatched_treated: sample.unmatched_treated,
                    effect,
                }),
                Err(_) => infeasible += 1,
            }
        }
        let m = ContextMatch { country: country.to_string(), item_id: item.to_string(), sample };
        (Some(m), effects, infeasible)
    });
    let mut matches = Vec::new();
    let mut effects = Vec::new();
    let mut infeasible_contexts = 0;
    for (m, e, inf) in per_group {
        matches.extend(m);
        effects.extend(e);
        infeasible_contexts += inf;
    }
    let mut significant_share = BTreeMap::new();
    for class in [Classification::Consistent, Classification::Inconsistent] {
        let ps: Vec<f64> = effects
            .iter()
            .filter(|e| e.classification == Some(class))
            .filter_map(|e| e.effect.p_value)
            .collect();
        if !ps.is_empty() {
            significant_share.insert(class, ps.iter().filter(|p| **p < 0.05).count() as f64 / ps.len() as f64);
        }
    }
    let notice = effects.is_empty().then(|| "no feasible matching context".to_string());
    if let Some(n) = &notice {
        log::warn!("{n}");
    }
    Sweep { matches, effects, significant_share, infeasible_contexts, notice }
}

impl Sweep {
    pub fn write_matches_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["country", "item_id", "pair_id", "treated_id", "control_id", "distance"])?;
        for m in &self.matches {
            for p in &m.sample.pairs {
                wtr.write_record([
                    m.country.as_str(),
                    m.item_id.as_str(),
                    &p.pair_id.to_string(),
                    &p.treated_id,
                    &p.control_id,
                    &format!("{}", p.distance),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_balance_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["country", "item_id", "covariate", "smd_before", "smd_after"])?;
        for m in &self.matches {
            for b in &m.sample.balance {
                wtr.write_record([
                    m.country.as_str(),
                    m.item_id.as_str(),
                    &b.covariate,
                    &format!("{}", b.smd_before),
                    &format!("{}", b.smd_after),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_effects_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "country",
            "item_id",
            "label_id",
            "classification",
            "n_pairs",
            "mean_treated",
            "mean_control",
            "mean_diff",
            "diff_ci_low",
            "diff_ci_high",
            "odds_ratio",
            "or_ci_low",
            "or_ci_high",
            "p_value",
            "propensity_fallback",
            "note",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for e in &self.effects {
            let f = &e.effect;
            wtr.write_record([
                e.country.clone(),
                e.item_id.clone(),
                e.label_id.clone(),
                e.classification.map(|c| c.as_str().to_string()).unwrap_or_default(),
                f.n_pairs.to_string(),
                format!("{}", f.mean_treated),
                format!("{}", f.mean_control),
                format!("{}", f.mean_diff),
                format!("{}", f.diff_ci95.0),
                format!("{}", f.diff_ci95.1),
                opt(f.odds_ratio),
                opt(f.or_ci95.map(|c| c.0)),
                opt(f.or_ci95.map(|c| c.1)),
                opt(f.p_value),
                e.propensity_fallback.to_string(),
                f.note.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
