//! Poststratified subgroup estimates and consistency verdicts.
//!
//! A fit for one (item, label) pair yields posterior draws of the fixed
//! demographic effects and the country intercepts. Each draw is pushed
//! through every population cell, and cell probabilities are reweighted by
//! the population shares of the cells within each subgroup.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::bayes::{self, BayesError, FitInput, HierarchicalData, MrpModelSpec, PosteriorDraws};
use crate::dataset::{AgeGroup, AnnotationRecord, CellKey, Gender, PairKey, Strata};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MrpError {
    #[error("level `{0}` is not part of the model")]
    UnknownLevel(String),
    #[error("subgroup {0} has zero total weight")]
    ZeroWeightSubgroup(String),
    #[error("need at least 2 countries to classify, got {0}")]
    TooFewCountries(usize),
    #[error("no records for pair {0}")]
    EmptyPair(String),
    #[error(transparent)]
    Bayes(#[from] BayesError),
}

type Result<T> = std::result::Result<T, MrpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Hmc,
    Laplace,
}

impl Engine {
    pub fn parse(s: &str) -> Option<Engine> {
        match s {
            "hmc" => Some(Engine::Hmc),
            "laplace" => Some(Engine::Laplace),
            _ => None,
        }
    }
}

/// Factor levels of the per-pair model. The fixed design is an intercept
/// plus dummy columns for every non-reference gender and age level; each
/// country gets a random intercept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelFrame {
    pub genders: Vec<Gender>,
    pub ages: Vec<AgeGroup>,
    pub countries: Vec<Arc<str>>,
    pub fixed_names: Vec<String>,
}

impl ModelFrame {
    /// Levels are the union of those seen in the records and the strata,
    /// so every population cell can be predicted.
    pub fn new(records: &[AnnotationRecord], strata: &Strata) -> ModelFrame {
        let mut genders = BTreeSet::new();
        let mut ages = BTreeSet::new();
        let mut countries = BTreeSet::new();
        for r in records {
            genders.insert(r.gender);
            ages.insert(r.age_group);
            countries.insert(r.country.clone());
        }
        for c in &strata.cells {
            genders.insert(c.gender);
            ages.insert(c.age_group);
            countries.insert(c.country.clone());
        }
        ModelFrame::from_levels(genders.into_iter().collect(), ages.into_iter().collect(), countries.into_iter().collect())
    }

    pub fn from_levels(genders: Vec<Gender>, ages: Vec<AgeGroup>, countries: Vec<Arc<str>>) -> ModelFrame {
        let mut fixed_names = vec!["(Intercept)".to_string()];
        fixed_names.extend(genders.iter().skip(1).map(|g| format!("gender[{g}]")));
        fixed_names.extend(ages.iter().skip(1).map(|a| format!("age_group[{a}]")));
        ModelFrame { genders, ages, countries, fixed_names }
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn country_names(&self) -> Vec<String> {
        self.countries.iter().map(|c| c.to_string()).collect()
    }

    pub fn fixed_row(&self, gender: Gender, age: AgeGroup) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.n_fixed()];
        row[0] = 1.0;
        let gi = self
            .genders
            .iter()
            .position(|g| *g == gender)
            .ok_or_else(|| MrpError::UnknownLevel(gender.to_string()))?;
        let ai = self
            .ages
            .iter()
            .position(|a| *a == age)
            .ok_or_else(|| MrpError::UnknownLevel(age.to_string()))?;
        if gi > 0 {
            row[gi] = 1.0;
        }
        if ai > 0 {
            row[self.genders.len() - 1 + ai] = 1.0;
        }
        Ok(row)
    }

    pub fn country_index(&self, country: &str) -> Result<usize> {
        self.countries
            .iter()
            .position(|c| &**c == country)
            .ok_or_else(|| MrpError::UnknownLevel(country.to_string()))
    }

    /// Binomial aggregates of one pair's records.
    pub fn data(&self, records: &[&AnnotationRecord]) -> Result<HierarchicalData> {
        let mut x = DMatrix::zeros(records.len(), self.n_fixed());
        let mut y = Vec::with_capacity(records.len());
        let mut group = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let row = self.fixed_row(r.gender, r.age_group)?;
            for (j, v) in row.into_iter().enumerate() {
                x[(i, j)] = v;
            }
            y.push(r.annotated);
            group.push(self.country_index(&r.country)?);
        }
        Ok(HierarchicalData::new(&x, &y, &group, self.countries.len())?)
    }
}

/// Fits one pair's model with the chosen engine.
pub fn fit_pair(
    frame: &ModelFrame,
    spec: &MrpModelSpec,
    engine: Engine,
    pair: &PairKey,
    records: &[&AnnotationRecord],
) -> Result<PosteriorDraws> {
    if records.is_empty() {
        return Err(MrpError::EmptyPair(pair.to_string()));
    }
    let data = frame.data(records)?;
    let groups = frame.country_names();
    let empty = DMatrix::zeros(0, frame.n_fixed());
    let input = FitInput {
        item_id: &pair.item_id,
        label_id: &pair.label_id,
        x: &empty,
        y: &[],
        group_index: &[],
        fixed_names: &frame.fixed_names,
        group_names: &groups,
    };
    Ok(match engine {
        Engine::Hmc => bayes::sample_hmc_data(spec, &data, &input)?,
        Engine::Laplace => bayes::laplace_fit_data(spec, &data, &input)?,
    })
}

/// Fits every pair present in `records`, in pair order.
pub fn fit_all(
    records: &[AnnotationRecord],
    frame: &ModelFrame,
    spec: &MrpModelSpec,
    engine: Engine,
) -> Vec<(PairKey, Result<PosteriorDraws>)> {
    let groups: Vec<(PairKey, Vec<&AnnotationRecord>)> = crate::dataset::group_by_pair(records).into_iter().collect();
    crate::par::map(&groups, |(pair, recs)| (pair.clone(), fit_pair(frame, spec, engine, pair, recs)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellEstimate {
    pub item_id: String,
    pub label_id: String,
    pub country: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    /// Per-draw probabilities, kept for per-draw poststratification.
    #[serde(skip)]
    pub draws: Vec<f64>,
}

impl CellEstimate {
    pub fn key(&self) -> CellKey {
        CellKey { country: self.country.as_str().into(), gender: self.gender, age_group: self.age_group }
    }

    fn from_draws(item: &str, label: &str, key: &CellKey, draws: Vec<f64>) -> CellEstimate {
        let s = Summary::of(&draws);
        CellEstimate {
            item_id: item.to_string(),
            label_id: label.to_string(),
            country: key.country.to_string(),
            gender: key.gender,
            age_group: key.age_group,
            mean: s.mean,
            sd: s.sd,
            q05: s.q05,
            q95: s.q95,
            draws,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(draws: &[f64]) -> Summary {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        // Quantiles of a finite sample can land a hair outside the mean's
        // rounding; clamp so q05 <= mean <= q95 always holds.
        let mean = stats::mean(draws);
        let q05 = stats::quantile_sorted(&sorted, 0.05).min(mean);
        let q95 = stats::quantile_sorted(&sorted, 0.95).max(mean);
        let sd = if draws.len() > 1 { stats::sd_population(draws) } else { 0.0 };
        Summary { mean, sd, q05, q95 }
    }
}

/// Per-draw probability `logistic(beta . x_cell + u_country)` for one cell.
pub fn cell_probability(draws: &PosteriorDraws, frame: &ModelFrame, cell: &CellKey) -> Result<CellEstimate> {
    let x = frame.fixed_row(cell.gender, cell.age_group)?;
    let c = frame.country_index(&cell.country)?;
    if draws.n_fixed != frame.n_fixed() || draws.n_groups != frame.countries.len() {
        return Err(MrpError::Bayes(BayesError::Dimension("draws do not match the model frame".into())));
    }
    let p = draws.n_fixed;
    let probs = (0..draws.n_draws())
        .map(|s| {
            let d = draws.draw(s);
            let eta: f64 = x.iter().zip(&d[..p]).map(|(a, b)| a * b).sum::<f64>() + d[p + c];
            stats::logistic(eta)
        })
        .collect();
    Ok(CellEstimate::from_draws(&draws.item_id, &draws.label_id, cell, probs))
}

/// Cell estimates for every stratum.
pub fn cell_estimates(draws: &PosteriorDraws, frame: &ModelFrame, strata: &Strata) -> Result<Vec<CellEstimate>> {
    strata.cells.iter().map(|c| cell_probability(draws, frame, &c.key())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Country,
    Gender,
    AgeGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupEstimate {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    #[serde(skip)]
    pub draws: Vec<f64>,
}

fn subgroup_key(cell: &CellEstimate, group_by: &[GroupBy]) -> Vec<String> {
    group_by
        .iter()
        .map(|g| match g {
            GroupBy::Country => cell.country.clone(),
            GroupBy::Gender => cell.gender.to_string(),
            GroupBy::AgeGroup => cell.age_group.to_string(),
        })
        .collect()
}

/// Weighted average of cell estimates within each subgroup, computed per
/// posterior draw and then summarized.
pub fn poststratify(
    cells: &[CellEstimate],
    strata: &Strata,
    group_by: &[GroupBy],
) -> Result<BTreeMap<Vec<String>, SubgroupEstimate>> {
    let weights = strata.weight_map();
    let mut acc: BTreeMap<Vec<String>, (f64, Vec<f64>)> = BTreeMap::new();
    for cell in cells {
        let key = cell.key();
        let w = *weights.get(&key).ok_or_else(|| MrpError::UnknownLevel(key.to_string()))?;
        let entry = acc.entry(subgroup_key(cell, group_by)).or_insert_with(|| (0.0, vec![0.0; cell.draws.len()]));
        if entry.1.len() != cell.draws.len() {
            return Err(MrpError::Bayes(BayesError::Dimension("cells have different draw counts".into())));
        }
        entry.0 += w;
        for (a, p) in entry.1.iter_mut().zip(&cell.draws) {
            *a += w * p;
        }
    }
    acc.into_iter()
        .map(|(k, (total, mut sums))| {
            if total <= 0.0 {
                return Err(MrpError::ZeroWeightSubgroup(k.join("/")));
            }
            sums.iter_mut().for_each(|s| *s /= total);
            let s = Summary::of(&sums);
            Ok((k, SubgroupEstimate { mean: s.mean, sd: s.sd, q05: s.q05, q95: s.q95, draws: sums }))
        })
        .collect()
}

/// Point-estimate poststratification: weights applied to cell means only.
pub fn poststratify_point(
    cells: &[CellEstimate],
    strata: &Strata,
    group_by: &[GroupBy],
) -> Result<BTreeMap<Vec<String>, f64>> {
    let weights = strata.weight_map();
    let mut acc: BTreeMap<Vec<String>, (f64, f64)> = BTreeMap::new();
    for cell in cells {
        let key = cell.key();
        let w = *weights.get(&key).ok_or_else(|| MrpError::UnknownLevel(key.to_string()))?;
        let e = acc.entry(subgroup_key(cell, group_by)).or_default();
        e.0 += w;
        e.1 += w * cell.mean;
    }
    acc.into_iter()
        .map(|(k, (w, s))| if w > 0.0 { Ok((k, s / w)) } else { Err(MrpError::ZeroWeightSubgroup(k.join("/"))) })
        .collect()
}

/// Poststratified per-country estimates for one fitted pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEstimates {
    pub item_id: String,
    pub label_id: String,
    pub approximate: bool,
    pub countries: BTreeMap<String, SubgroupEstimate>,
}

impl PairEstimates {
    pub fn means(&self) -> BTreeMap<String, f64> {
        self.countries.iter().map(|(c, e)| (c.clone(), e.mean)).collect()
    }
}

pub fn country_estimates(draws: &PosteriorDraws, frame: &ModelFrame, strata: &Strata) -> Result<PairEstimates> {
    let cells = cell_estimates(draws, frame, strata)?;
    let countries = poststratify(&cells, strata, &[GroupBy::Country])?
        .into_iter()
        .map(|(mut k, v)| (k.remove(0), v))
        .collect();
    Ok(PairEstimates {
        item_id: draws.item_id.clone(),
        label_id: draws.label_id.clone(),
        approximate: draws.is_approximate(),
        countries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub sd_threshold: f64,
    pub majority_line: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { sd_threshold: 0.05, majority_line: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Consistent,
    Inconsistent,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Consistent => "consistent",
            Classification::Inconsistent => "inconsistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyVerdict {
    pub item_id: String,
    pub label_id: String,
    pub country_estimates: BTreeMap<String, f64>,
    pub cross_country_sd: f64,
    pub straddles_majority: bool,
    pub classification: Classification,
    pub min_country: String,
    pub max_country: String,
    /// Some country sits exactly on the majority line.
    pub tie_at_majority: bool,
}

impl ConsistencyVerdict {
    pub fn pair(&self) -> PairKey {
        PairKey::new(&self.item_id, &self.label_id)
    }

    pub fn is_inconsistent(&self) -> bool {
        self.classification == Classification::Inconsistent
    }
}

/// Inconsistent iff the population SD across countries exceeds the
/// threshold and some countries fall strictly on each side of the line.
pub fn classify_consistency(
    item_id: &str,
    label_id: &str,
    estimates: &BTreeMap<String, f64>,
    thresholds: &Thresholds,
) -> Result<ConsistencyVerdict> {
    if estimates.len() < 2 {
        return Err(MrpError::TooFewCountries(estimates.len()));
    }
    let values: Vec<f64> = estimates.values().copied().collect();
    let sd = stats::sd_population(&values);
    let (min_country, min) = estimates
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, v)| (c.clone(), *v))
        .unwrap_or_default();
    let (max_country, max) = estimates
        .iter()
        .rev()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, v)| (c.clone(), *v))
        .unwrap_or_default();
    let line = thresholds.majority_line;
    let straddles = min < line && max > line;
    let tie = values.contains(&line);
    if tie {
        log::warn!("{item_id}:{label_id} has a country estimate exactly on the majority line");
    }
    let classification = if sd > thresholds.sd_threshold && straddles {
        Classification::Inconsistent
    } else {
        Classification::Consistent
    };
    Ok(ConsistencyVerdict {
        item_id: item_id.to_string(),
        label_id: label_id.to_string(),
        country_estimates: estimates.clone(),
        cross_country_sd: sd,
        straddles_majority: straddles,
        classification,
        min_country,
        max_country,
        tie_at_majority: tie,
    })
}

pub fn classify_all(estimates: &[PairEstimates], thresholds: &Thresholds) -> Result<Vec<ConsistencyVerdict>> {
    estimates
        .iter()
        .map(|e| classify_consistency(&e.item_id, &e.label_id, &e.means(), thresholds))
        .collect()
}

/// Dense item x label table of cross-country SDs; `None` marks a pair with
/// no verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub items: Vec<String>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn consistency_heatmap(verdicts: &[ConsistencyVerdict]) -> Heatmap {
    let items: Vec<String> = verdicts.iter().map(|v| v.item_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<String> = verdicts.iter().map(|v| v.label_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut values = vec![vec![None; labels.len()]; items.len()];
    for v in verdicts {
        let i = items.binary_search(&v.item_id).unwrap_or_default();
        let j = labels.binary_search(&v.label_id).unwrap_or_default();
        values[i][j] = Some(v.cross_country_sd);
    }
    Heatmap { items, labels, values }
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["item_id".to_string()];
        header.extend(self.labels.iter().cloned());
        wtr.write_record(&header)?;
        for (item, row) in self.items.iter().zip(&self.values) {
            let mut rec = vec![item.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn write_verdicts_csv<W: Write>(w: W, verdicts: &[ConsistencyVerdict]) -> csv::Result<()> {
    let countries: BTreeSet<&String> = verdicts.iter().flat_map(|v| v.country_estimates.keys()).collect();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> =
        ["item_id", "label_id", "classification", "cross_country_sd", "min_country", "max_country"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend(countries.iter().map(|c| c.to_string()));
    wtr.write_record(&header)?;
    for v in verdicts {
        let mut rec = vec![
            v.item_id.clone(),
            v.label_id.clone(),
            v.classification.as_str().to_string(),
            format!("{}", v.cross_country_sd),
            v.min_country.clone(),
            v.max_country.clone(),
        ];
        rec.extend(countries.iter().map(|c| v.country_estimates.get(*c).map(|x| format!("{x}")).unwrap_or_default()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a verdicts table written by [`write_verdicts_csv`].
pub fn read_verdicts_csv<R: std::io::Read>(r: R) -> std::result::Result<Vec<ConsistencyVerdict>, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let mut est = BTreeMap::new();
        for (i, h) in headers.iter().enumerate().skip(6) {
            if let Ok(v) = rec.get(i).unwrap_or("").parse::<f64>() {
                est.insert(h.to_string(), v);
            }
        }
        let classification = if get(2) == "inconsistent" { Classification::Inconsistent } else { Classification::Consistent };
        let values: Vec<f64> = est.values().copied().collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push(ConsistencyVerdict {
            item_id: get(0),
            label_id: get(1),
            cross_country_sd: get(3).parse().unwrap_or(f64::NAN),
            straddles_majority: min < 0.5 && max > 0.5,
            classification,
            min_country: get(4),
            max_country: get(5),
            tie_at_majority: values.contains(&0.5),
            country_estimates: est,
        });
    }
    Ok(out)
}

pub fn write_estimates_csv<W: Write>(w: W, estimates: &[PairEstimates]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["item_id", "label_id", "country", "mean", "sd", "q05", "q95", "approximate"])?;
    for e in estimates {
        for (c, s) in &e.countries {
            wtr.write_record([
                e.item_id.as_str(),
                e.label_id.as_str(),
                c.as_str(),
                &format!("{}", s.mean),
                &format!("{}", s.sd),
                &format!("{}", s.q05),
                &format!("{}", s.q95),
                if e.approximate { "true" } else { "false" },
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads per-country estimates back (draws are not stored, so the
/// summaries carry an empty draw vector).
pub fn read_estimates_csv<R: std::io::Read>(r: R) -> std::result::Result<Vec<PairEstimates>, csv::Error> {
    #[derive(serde::Deserialize)]
    struct Row {
        item_id: String,
        label_id: String,
        country: String,
        mean: f64,
        sd: f64,
        q05: f64,
        q95: f64,
        approximate: bool,
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut map: BTreeMap<(String, String), PairEstimates> = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        let e = map.entry((row.item_id.clone(), row.label_id.clone())).or_insert_with(|| PairEstimates {
            item_id: row.item_id.clone(),
            label_id: row.label_id.clone(),
            approximate: row.approximate,
            countries: BTreeMap::new(),
        });
        e.countries.insert(
            row.country,
            SubgroupEstimate { mean: row.mean, sd: row.sd, q05: row.q05, q95: row.q95, draws: Vec::new() },
        );
    }
    Ok(map.into_values().collect())
}

/// Outcome of the full estimate-and-classify stage.
#[derive(Debug, Clone)]
pub struct MrpRun {
    pub frame: ModelFrame,
    pub estimates: Vec<PairEstimates>,
    /// Pairs whose fit failed, with the error.
    pub failures: Vec<(PairKey, MrpError)>,
    pub diagnostics: Vec<(PairKey, bayes::DiagnosticsReport)>,
    /// Per-parameter posterior summaries of every fitted pair.
    pub summaries: Vec<(PairKey, Vec<bayes::ParamSummary>)>,
    /// Raw draws, kept only by [`run_keeping_draws`].
    pub draws: Vec<(PairKey, bayes::PosteriorDraws)>,
}

/// Fits every pair and poststratifies to countries.
pub fn run(records: &[AnnotationRecord], strata: &Strata, spec: &MrpModelSpec, engine: Engine) -> MrpRun {
    run_inner(records, strata, spec, engine, false)
}

/// As [`run`], also returning the posterior draws of each pair.
pub fn run_keeping_draws(records: &[AnnotationRecord], strata: &Strata, spec: &MrpModelSpec, engine: Engine) -> MrpRun {
    run_inner(records, strata, spec, engine, true)
}

type Processed = (PairEstimates, Option<bayes::DiagnosticsReport>, Vec<bayes::ParamSummary>);

fn run_inner(records: &[AnnotationRecord], strata: &Strata, spec: &MrpModelSpec, engine: Engine, keep: bool) -> MrpRun {
    let frame = ModelFrame::new(records, strata);
    let fits = fit_all(records, &frame, spec, engine);
    let processed: Vec<(PairKey, Result<Processed>)> = crate::par::map(&fits, |(k, fit)| {
        let out = match fit {
            Ok(d) => {
                let diag = (engine == Engine::Hmc).then(|| d.diagnostics());
                country_estimates(d, &frame, strata).map(|e| (e, diag, d.summary()))
            }
            Err(e) => Err(e.clone()),
        };
        (k.clone(), out)
    });
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut diagnostics = Vec::new();
    let mut summaries = Vec::new();
    for (k, r) in processed {
        match r {
            Ok((e, d, s)) => {
                estimates.push(e);
                if let Some(d) = d {
                    diagnostics.push((k.clone(), d));
                }
                summaries.push((k, s));
            }
            Err(err) => failures.push((k, err)),
        }
    }
    let draws = if keep { fits.into_iter().filter_map(|(k, f)| f.ok().map(|d| (k, d))).collect() } else { Vec::new() };
    MrpRun { frame, estimates, failures, diagnostics, summaries, draws }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::Method;
    use crate::dataset::StrataCell;
    use approx::assert_abs_diff_eq;

    fn frame() -> ModelFrame {
        ModelFrame::from_levels(vec![Gender::Female, Gender::Male], vec![AgeGroup::Age18To24], vec!["KR".into(), "US".into()])
    }

    fn draws_from(rows: Vec<Vec<f64>>) -> PosteriorDraws {
        let dim = rows[0].len();
        PosteriorDraws {
            item_id: "g".into(),
            label_id: "l".into(),
            column_names: (0..dim).map(|j| format!("p{j}")).collect(),
            n_fixed: 2,
            n_groups: 2,
            chains: 1,
            draws_per_chain: rows.len(),
            draws: rows.into_iter().flatten().collect(),
            divergence_count: 0,
            chain_stats: Vec::new(),
            method: Method::Hmc,
        }
    }

    fn key(c: &str, g: Gender) -> CellKey {
        CellKey { country: c.into(), gender: g, age_group: AgeGroup::Age18To24 }
    }

    #[test]
    fn zero_coefficients_give_one_half() {
        let d = draws_from(vec![vec![0.0; 5]; 3]);
        let e = cell_probability(&d, &frame(), &key("US", Gender::Male)).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.sd, 0.0);
    }

    #[test]
    fn ln3_predictor_gives_three_quarters() {
        let d = draws_from(vec![vec![3f64.ln(), 0.0, 0.0, 0.0, 0.0]]);
        let e = cell_probability(&d, &frame(), &key("KR", Gender::Female)).unwrap();
        assert_abs_diff_eq!(e.mean, 0.75, epsilon = 1e-12);
        assert!(e.q05 <= e.mean && e.mean <= e.q95);
    }

    #[test]
    fn unknown_level_is_error() {
        let d = draws_from(vec![vec![0.0; 5]]);
        assert!(matches!(cell_probability(&d, &frame(), &key("JP", Gender::Male)), Err(MrpError::UnknownLevel(_))));
    }

    fn cell(c: &str, g: Gender, p: f64) -> CellEstimate {
        CellEstimate::from_draws("g", "l", &key(c, g), vec![p])
    }

    fn strata(ws: &[(&str, Gender, f64)]) -> Strata {
        Strata {
            cells: ws
                .iter()
                .map(|(c, g, w)| StrataCell { country: (*c).into(), gender: *g, age_group: AgeGroup::Age18To24, weight: *w })
                .collect(),
            empirical: false,
        }
    }

    #[test]
    fn weighted_mean_of_two_cells() {
        let cells = [cell("US", Gender::Female, 0.2), cell("US", Gender::Male, 0.6)];
        let st = strata(&[("US", Gender::Female, 0.25), ("US", Gender::Male, 0.75)]);
        let out = poststratify(&cells, &st, &[GroupBy::Country]).unwrap();
        assert_abs_diff_eq!(out[&vec!["US".to_string()]].mean, 0.5, epsilon = 1e-12);
        let point = poststratify_point(&cells, &st, &[GroupBy::Country]).unwrap();
        assert_abs_diff_eq!(point[&vec!["US".to_string()]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn uniform_weights_give_arithmetic_mean() {
        let cells = [cell("US", Gender::Female, 0.1), cell("US", Gender::Male, 0.4)];
        let st = strata(&[("US", Gender::Female, 1.0), ("US", Gender::Male, 1.0)]);
        let out = poststratify(&cells, &st, &[GroupBy::Country]).unwrap();
        assert_abs_diff_eq!(out[&vec!["US".to_string()]].mean, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_subgroup_is_error() {
        let cells = [cell("US", Gender::Female, 0.1)];
        let st = strata(&[("US", Gender::Female, 0.0)]);
        assert!(matches!(poststratify(&cells, &st, &[GroupBy::Country]), Err(MrpError::ZeroWeightSubgroup(_))));
    }

    fn est(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(c, v)| (c.to_string(), *v)).collect()
    }

    #[test]
    fn korea_us_example_is_inconsistent() {
        let v = classify_consistency("g", "l", &est(&[("KR", 0.39), ("US", 0.59)]), &Thresholds::default()).unwrap();
        assert_abs_diff_eq!(v.cross_country_sd, 0.10, epsilon = 1e-12);
        assert!(v.straddles_majority);
        assert_eq!(v.classification, Classification::Inconsistent);
        assert_eq!(v.min_country, "KR");
        assert_eq!(v.max_country, "US");
    }

    #[test]
    fn low_estimates_are_consistent() {
        let v = classify_consistency("g", "l", &est(&[("A", 0.18), ("B", 0.2), ("C", 0.2)]), &Thresholds::default()).unwrap();
        assert_eq!(v.classification, Classification::Consistent);
    }

    #[test]
    fn straddle_below_threshold_is_consistent() {
        let v = classify_consistency("g", "l", &est(&[("A", 0.49), ("B", 0.51)]), &Thresholds::default()).unwrap();
        assert!(v.straddles_majority);
        assert_eq!(v.classification, Classification::Consistent);
    }

    #[test]
    fn value_on_line_does_not_straddle() {
        let v = classify_consistency("g", "l", &est(&[("A", 0.5), ("B", 0.9)]), &Thresholds::default()).unwrap();
        assert!(!v.straddles_majority);
        assert!(v.tie_at_majority);
    }

    #[test]
    fn one_country_is_too_few() {
        assert_eq!(
            classify_consistency("g", "l", &est(&[("A", 0.5)]), &Thresholds::default()),
            Err(MrpError::TooFewCountries(1))
        );
    }

    fn verdict(item: &str, label: &str, sd: f64) -> ConsistencyVerdict {
        let mut v = classify_consistency(item, label, &est(&[("A", 0.1), ("B", 0.2)]), &Thresholds::default()).unwrap();
        v.cross_country_sd = sd;
        v
    }

    #[test]
    fn heatmap_dense_and_sparse() {
        let vs = [verdict("i1", "a", 0.1), verdict("i1", "b", 0.2), verdict("i2", "a", 0.3), verdict("i2", "b", 0.4)];
        let h = consistency_heatmap(&vs);
        assert_eq!(h.values, vec![vec![Some(0.1), Some(0.2)], vec![Some(0.3), Some(0.4)]]);
        let h = consistency_heatmap(&vs[..3]);
        assert_eq!(h.values[1][1], None);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("i2,0.3,\n"));
    }

    #[test]
    fn verdicts_round_trip() {
        let vs = vec![classify_consistency("g", "l", &est(&[("KR", 0.39), ("US", 0.59)]), &Thresholds::default()).unwrap()];
        let mut buf = Vec::new();
        write_verdicts_csv(&mut buf, &vs).unwrap();
        let back = read_verdicts_csv(&buf[..]).unwrap();
        assert_eq!(back, vs);
    }

    #[test]
    fn frame_rows_use_reference_levels() {
        let f = ModelFrame::from_levels(
            vec![Gender::Female, Gender::Male],
            vec![AgeGroup::Age18To24, AgeGroup::Age25To34, AgeGroup::Age35To44],
            vec!["US".into()],
        );
        assert_eq!(f.fixed_names, ["(Intercept)", "gender[male]", "age_group[25-34]", "age_group[35-44]"]);
        assert_eq!(f.fixed_row(Gender::Female, AgeGroup::Age18To24).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f.fixed_row(Gender::Male, AgeGroup::Age35To44).unwrap(), [1.0, 1.0, 0.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn estimates() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0..1.0f64, 2..8)
        }

        fn to_map(v: &[f64], names: &[String]) -> BTreeMap<String, f64> {
            names.iter().cloned().zip(v.iter().copied()).collect()
        }

        proptest! {
            #[test]
            fn inconsistent_implies_strict_straddle(v in estimates(), t in 0.0..0.3f64) {
                let names: Vec<String> = (0..v.len()).map(|i| format!("c{i}")).collect();
                let th = Thresholds { sd_threshold: t, majority_line: 0.5 };
                let verdict = classify_consistency("g", "l", &to_map(&v, &names), &th).unwrap();
                if verdict.is_inconsistent() {
                    let max = v.iter().copied().fold(f64::MIN, f64::max);
                    let min = v.iter().copied().fold(f64::MAX, f64::min);
                    prop_assert!(max > 0.5 && min < 0.5);
                }
            }

            #[test]
            fn raising_threshold_is_monotone(v in estimates(), t in 0.0..0.3f64, dt in 0.0..0.3f64) {
                let names: Vec<String> = (0..v.len()).map(|i| format!("c{i}")).collect();
                let m = to_map(&v, &names);
                let lo = classify_consistency("g", "l", &m, &Thresholds { sd_threshold: t, majority_line: 0.5 }).unwrap();
                let hi = classify_consistency("g", "l", &m, &Thresholds { sd_threshold: t + dt, majority_line: 0.5 }).unwrap();
                prop_assert!(!(lo.classification == Classification::Consistent && hi.is_inconsistent()));
            }

            #[test]
            fn country_relabeling_is_invariant(v in estimates()) {
                let a: Vec<String> = (0..v.len()).map(|i| format!("c{i}")).collect();
                let b: Vec<String> = (0..v.len()).map(|i| format!("z{}", v.len() - i)).collect();
                let va = classify_consistency("g", "l", &to_map(&v, &a), &Thresholds::default()).unwrap();
                let vb = classify_consistency("x", "y", &to_map(&v, &b), &Thresholds::default()).unwrap();
                prop_assert_eq!(va.classification, vb.classification);
                prop_assert!((va.cross_country_sd - vb.cross_country_sd).abs() < 1e-12);
            }

            #[test]
            fn empirical_weights_reproduce_plugin_mean(ps in proptest::collection::vec((0.0..1.0f64, 1u32..50), 1..6)) {
                let genders = [Gender::Female, Gender::Male, Gender::Other];
                let ages = AgeGroup::ALL;
                let mut cells = Vec::new();
                let mut st = Vec::new();
                let mut num = 0.0;
                let mut den = 0.0;
                for (i, (p, n)) in ps.iter().enumerate() {
                    let k = CellKey { country: "US".into(), gender: genders[i % 3], age_group: ages[i / 3] };
                    cells.push(CellEstimate::from_draws("g", "l", &k, vec![*p]));
                    st.push(StrataCell { country: "US".into(), gender: k.gender, age_group: k.age_group, weight: *n as f64 });
                    num += *p * *n as f64;
                    den += *n as f64;
                }
                let out = poststratify(&cells, &Strata { cells: st, empirical: true }, &[GroupBy::Country]).unwrap();
                prop_assert!((out[&vec!["US".to_string()]].mean - num / den).abs() < 1e-12);
            }
        }
    }
}
