//! Downstream value of heterogeneous annotator pools.
//!
//! A homogeneous regime trains a demographics-only logistic predictor on one
//! country; a heterogeneous regime trains on every other country and adds a
//! country covariate. Both are scored on a shared respondent-level test
//! split, per country and consistency class, and on held-out countries
//! absent from training.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{self, AgeGroup, AnnotationRecord, Gender, StrataCell};
use crate::glm::{self, DesignMatrix, GlmError, IrlsOptions};
use crate::mrp::{Classification, ConsistencyVerdict};
use crate::{par, rng, stats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluateError {
    #[error("no annotation records to evaluate")]
    EmptyRecords,
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("train pool has no respondents from {0}")]
    MissingCountry(String),
    #[error("heterogeneous train set needs at least 2 countries, got {0}")]
    TooFewCountries(usize),
    #[error("no consistency verdict for ({item}, {label})")]
    MissingVerdict { item: String, label: String },
    #[error(transparent)]
    Glm(#[from] GlmError),
}

type Result<T> = std::result::Result<T, EvaluateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Random,
    RepresentativeStratified,
    OversampleToMatch,
}

impl Sampling {
    pub fn parse(s: &str) -> Option<Sampling> {
        match s {
            "random" => Some(Sampling::Random),
            "representative_stratified" => Some(Sampling::RepresentativeStratified),
            "oversample_to_match" => Some(Sampling::OversampleToMatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub sampling: Sampling,
    pub homogeneous_country: String,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.3, seed: 0, sampling: Sampling::OversampleToMatch, homogeneous_country: "US".into() }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(EvaluateError::InvalidSpec(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

fn by_respondent(records: &[AnnotationRecord]) -> BTreeMap<&str, Vec<&AnnotationRecord>> {
    let mut m: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        m.entry(&r.respondent_id).or_default().push(r);
    }
    m
}

/// Respondent-level train/test split. The test count is
/// `round(test_fraction * respondents)`, spread over countries in
/// proportion to their respondent counts so the test set mirrors the
/// collected data.
pub fn split(records: &[AnnotationRecord], spec: &SplitSpec) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>)> {
    spec.validate()?;
    if records.is_empty() {
        return Err(EvaluateError::EmptyRecords);
    }
    let mut per_country: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, rows) in by_respondent(records) {
        per_country.entry(&rows[0].country).or_default().push(id);
    }
    let sizes: Vec<f64> = per_country.values().map(|v| v.len() as f64).collect();
    let n: f64 = sizes.iter().sum();
    let quotas = stats::allocate((spec.test_fraction * n).round() as usize, &sizes);
    let mut test_ids = BTreeSet::new();
    for ((country, ids), k) in per_country.iter().zip(quotas) {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng::derived(spec.seed, &format!("split:{country}"), 0));
        test_ids.extend(ids.into_iter().take(k));
    }
    let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| test_ids.contains(&*r.respondent_id));
    let train_ids: BTreeSet<&str> = train.iter().map(|r| &*r.respondent_id).collect();
    assert!(test.iter().all(|r| !train_ids.contains(&*r.respondent_id)), "respondent leaked across the split");
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSets {
    pub homogeneous: Vec<AnnotationRecord>,
    pub heterogeneous: Vec<AnnotationRecord>,
}

/// Splits the pool into the homogeneous country and everyone else, then
/// applies the sampling mode. Representative sampling draws respondents
/// with replacement so each stratum's count follows its weight; strata
/// default to the pool's empirical composition.
pub fn build_train_sets(pool: &[AnnotationRecord], strata: Option<&[StrataCell]>, spec: &SplitSpec) -> Result<TrainSets> {
    let home = spec.homogeneous_country.as_str();
    let (homogeneous, heterogeneous): (Vec<_>, Vec<_>) = pool.iter().cloned().partition(|r| &*r.country == home);
    if homogeneous.is_empty() {
        return Err(EvaluateError::MissingCountry(home.to_string()));
    }
    let others: BTreeSet<&str> = heterogeneous.iter().map(|r| &*r.country).collect();
    if others.len() < 2 {
        return Err(EvaluateError::TooFewCountries(others.len()));
    }
    let mut sets = TrainSets { homogeneous, heterogeneous };
    match spec.sampling {
        Sampling::Random => {}
        Sampling::OversampleToMatch => {
            let (small, target) = if sets.homogeneous.len() < sets.heterogeneous.len() {
                (&mut sets.homogeneous, sets.heterogeneous.len())
            } else {
                (&mut sets.heterogeneous, sets.homogeneous.len())
            };
            oversample(small, target, &mut rng::derived(spec.seed, "oversample", 0));
        }
        Sampling::RepresentativeStratified => {
            let owned;
            let cells = match strata {
                Some(c) => c,
                None => {
                    owned = dataset::build_strata_with(pool, None).map_err(|e| EvaluateError::InvalidSpec(e.to_string()))?.cells;
                    &owned
                }
            };
            sets.homogeneous = stratified_sample(&sets.homogeneous, cells, &mut rng::derived(spec.seed, "stratified", 0));
            sets.heterogeneous = stratified_sample(&sets.heterogeneous, cells, &mut rng::derived(spec.seed, "stratified", 1));
        }
    }
    Ok(sets)
}

/// Appends respondents drawn with replacement until `rows` has `target`
/// records; the last draw is truncated to hit the size exactly.
fn oversample(rows: &mut Vec<AnnotationRecord>, target: usize, r: &mut rng::Rng) {
    let groups: Vec<Vec<AnnotationRecord>> = by_respondent(rows).into_values().map(|v| v.into_iter().cloned().collect()).collect();
    while rows.len() < target {
        let g = &groups[r.random_range(0..groups.len())];
        let take = (target - rows.len()).min(g.len());
        rows.extend_from_slice(&g[..take]);
    }
}

fn stratified_sample(rows: &[AnnotationRecord], cells: &[StrataCell], r: &mut rng::Rng) -> Vec<AnnotationRecord> {
    let respondents = by_respondent(rows);
    let mut by_cell: BTreeMap<dataset::CellKey, Vec<&Vec<&AnnotationRecord>>> = BTreeMap::new();
    for rs in respondents.values() {
        by_cell.entry(rs[0].cell()).or_default().push(rs);
    }
    let weights: Vec<(&Vec<&Vec<&AnnotationRecord>>, f64)> = cells
        .iter()
        .filter_map(|c| by_cell.get(&c.key()).map(|v| (v, c.weight)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let covered: BTreeSet<dataset::CellKey> = cells.iter().map(|c| c.key()).collect();
    if by_cell.keys().any(|k| !covered.contains(k)) {
        log::warn!("some sampled cells have no stratum weight and are left out of representative sampling");
    }
    let counts = stats::allocate(respondents.len(), &weights.iter().map(|(_, w)| *w).collect::<Vec<_>>());
    let mut out = Vec::with_capacity(rows.len());
    for ((pool, _), k) in weights.iter().zip(counts) {
        for _ in 0..k {
            out.extend(pool[r.random_range(0..pool.len())].iter().map(|x| (*x).clone()));
        }
    }
    out
}

type Pair = (Arc<str>, Arc<str>);

/// Fitted annotation predictor. Country effects are sum-to-zero coded, so
/// the zero effect assigned to a country unseen in training is the average
/// training country.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Predictor {
    pub include_country: bool,
    pub intercept: f64,
    #[serde(skip)]
    pub pair_effects: BTreeMap<Pair, f64>,
    /// Pairs whose training outcomes never vary; predicted as constants.
    #[serde(skip)]
    pub saturated: BTreeMap<Pair, bool>,
    pub gender_effects: BTreeMap<Gender, f64>,
    pub age_effects: BTreeMap<AgeGroup, f64>,
    pub country_effects: BTreeMap<String, f64>,
}

impl Predictor {
    /// Predicted annotation probability.
    pub fn probability(&self, r: &AnnotationRecord) -> f64 {
        let pair = (r.item_id.clone(), r.label_id.clone());
        if let Some(&v) = self.saturated.get(&pair) {
            return if v { 1.0 } else { 0.0 };
        }
        let mut eta = self.intercept + self.pair_effects.get(&pair).copied().unwrap_or(0.0);
        eta += self.gender_effects.get(&r.gender).copied().unwrap_or(0.0);
        eta += self.age_effects.get(&r.age_group).copied().unwrap_or(0.0);
        if self.include_country {
            eta += self.country_effects.get(&*r.country).copied().unwrap_or(0.0);
        }
        stats::logistic(eta)
    }

    pub fn predict(&self, r: &AnnotationRecord) -> bool {
        self.probability(r) > 0.5
    }

    fn warn_unseen(&self, records: &[AnnotationRecord]) {
        if !self.include_country {
            return;
        }
        let unseen: BTreeSet<&str> = records.iter().map(|r| &*r.country).filter(|c| !self.country_effects.contains_key(*c)).collect();
        for c in unseen {
            log::warn!("country {c} was not in training; using the average country effect");
        }
    }
}

/// Logistic regression of `annotated` on item:label, gender and age group,
/// plus country when `include_country`. Rows are aggregated to binomial
/// counts over identical covariate patterns before fitting.
pub fn fit_predictor(train: &[AnnotationRecord], include_country: bool) -> Result<Predictor> {
    if train.is_empty() {
        return Err(EvaluateError::EmptyRecords);
    }
    let mut pair_counts: BTreeMap<Pair, (usize, usize)> = BTreeMap::new();
    for r in train {
        let e = pair_counts.entry((r.item_id.clone(), r.label_id.clone())).or_default();
        e.0 += usize::from(r.annotated);
        e.1 += 1;
    }
    let saturated: BTreeMap<Pair, bool> = pair_counts
        .iter()
        .filter(|(_, (s, n))| *s == 0 || s == n)
        .map(|(k, (s, _))| (k.clone(), *s > 0))
        .collect();
    let rows: Vec<&AnnotationRecord> = train
        .iter()
        .filter(|r| !saturated.contains_key(&(r.item_id.clone(), r.label_id.clone())))
        .collect();
    let mut predictor = Predictor {
        include_country,
        intercept: 0.0,
        pair_effects: BTreeMap::new(),
        saturated,
        gender_effects: BTreeMap::new(),
        age_effects: BTreeMap::new(),
        country_effects: BTreeMap::new(),
    };
    if rows.is_empty() {
        return Ok(predictor);
    }
    let pairs: Vec<Pair> = rows.iter().map(|r| (r.item_id.clone(), r.label_id.clone())).collect::<BTreeSet<_>>().into_iter().collect();
    let genders: Vec<Gender> = rows.iter().map(|r| r.gender).collect::<BTreeSet<_>>().into_iter().collect();
    let ages: Vec<AgeGroup> = rows.iter().map(|r| r.age_group).collect::<BTreeSet<_>>().into_iter().collect();
    let countries: Vec<Arc<str>> = if include_country {
        rows.iter().map(|r| r.country.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        Vec::new()
    };
    let mut cells: BTreeMap<(usize, usize, usize, usize), (f64, f64)> = BTreeMap::new();
    for r in &rows {
        let key = (
            pairs.binary_search(&(r.item_id.clone(), r.label_id.clone())).unwrap(),
            genders.binary_search(&r.gender).unwrap(),
            ages.binary_search(&r.age_group).unwrap(),
            if include_country { countries.binary_search(&r.country).unwrap() } else { 0 },
        );
        let e = cells.entry(key).or_default();
        e.0 += f64::from(u8::from(r.annotated));
        e.1 += 1.0;
    }
    let pair0 = 1;
    let gender0 = pair0 + pairs.len() - 1;
    let age0 = gender0 + genders.len() - 1;
    let country0 = age0 + ages.len() - 1;
    let n_country_cols = countries.len().saturating_sub(1);
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(pairs[1..].iter().map(|(i, l)| format!("pair[{i}:{l}]")));
    names.extend(genders[1..].iter().map(|g| format!("gender[{}]", g.as_str())));
    names.extend(ages[1..].iter().map(|a| format!("age_group[{}]", a.as_str())));
    names.extend(countries.iter().take(n_country_cols).map(|c| format!("country[{c}]")));
    let mut design_rows = Vec::with_capacity(cells.len());
    let mut successes = Vec::with_capacity(cells.len());
    let mut trials = Vec::with_capacity(cells.len());
    for (&(p, g, a, c), &(s, n)) in &cells {
        let mut row = vec![(0, 1.0)];
        if p > 0 {
            row.push((pair0 + p - 1, 1.0));
        }
        if g > 0 {
            row.push((gender0 + g - 1, 1.0));
        }
        if a > 0 {
            row.push((age0 + a - 1, 1.0));
        }
        if n_country_cols > 0 {
            if c < n_country_cols {
                row.push((country0 + c, 1.0));
            } else {
                row.extend((0..n_country_cols).map(|k| (country0 + k, -1.0)));
            }
        }
        design_rows.push(row);
        successes.push(s);
        trials.push(n);
    }
    let x = DesignMatrix::from_rows(design_rows, names);
    let fit = glm::fit_binomial(&x, &successes, &trials, &IrlsOptions::default())?;
    let b = fit.coefficients.as_slice();
    predictor.intercept = b[0];
    for (k, pair) in pairs.iter().enumerate() {
        predictor.pair_effects.insert(pair.clone(), if k == 0 { 0.0 } else { b[pair0 + k - 1] });
    }
    for (k, g) in genders.iter().enumerate() {
        predictor.gender_effects.insert(*g, if k == 0 { 0.0 } else { b[gender0 + k - 1] });
    }
    for (k, a) in ages.iter().enumerate() {
        predictor.age_effects.insert(*a, if k == 0 { 0.0 } else { b[age0 + k - 1] });
    }
    let country_sum: f64 = b[country0..country0 + n_country_cols].iter().sum();
    for (k, c) in countries.iter().enumerate() {
        let effect = if k < n_country_cols { b[country0 + k] } else { -country_sum };
        predictor.country_effects.insert(c.to_string(), effect);
    }
    Ok(predictor)
}

/// Confusion counts with the annotated label as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn support(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`; `None` when the denominator is 0.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| (2 * self.tp) as f64 / d as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.support();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Homogeneous,
    Heterogeneous,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Homogeneous => "homogeneous",
            Regime::Heterogeneous => "heterogeneous",
        }
    }
}

fn verdict_map(verdicts: &[ConsistencyVerdict]) -> BTreeMap<(&str, &str), Classification> {
    verdicts.iter().map(|v| ((v.item_id.as_str(), v.label_id.as_str()), v.classification)).collect()
}

/// Confusion counts per (country, class).
pub fn score(
    predictor: &Predictor,
    test: &[AnnotationRecord],
    verdicts: &[ConsistencyVerdict],
) -> Result<BTreeMap<(String, Classification), Counts>> {
    let classes = verdict_map(verdicts);
    predictor.warn_unseen(test);
    let mut out: BTreeMap<(String, Classification), Counts> = BTreeMap::new();
    for r in test {
        let class = *classes.get(&(&*r.item_id, &*r.label_id)).ok_or_else(|| EvaluateError::MissingVerdict {
            item: r.item_id.to_string(),
            label: r.label_id.to_string(),
        })?;
        out.entry((r.country.to_string(), class)).or_default().add(predictor.predict(r), r.annotated);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub country: String,
    pub consistency_class: String,
    pub regime: Regime,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub support: usize,
}

impl MetricRow {
    fn new(country: &str, class: &str, regime: Regime, c: &Counts) -> MetricRow {
        MetricRow {
            country: country.into(),
            consistency_class: class.into(),
            regime,
            f1: c.f1(),
            accuracy: c.accuracy(),
            support: c.support(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeComparison {
    pub consistency_class: String,
    pub homogeneous: MetricRow,
    pub heterogeneous: MetricRow,
    /// `(f1_het - f1_hom) / f1_hom`.
    pub relative_improvement: Option<f64>,
}

fn compare(class: &str, hom: &Counts, het: &Counts, country: &str) -> RegimeComparison {
    let homogeneous = MetricRow::new(country, class, Regime::Homogeneous, hom);
    let heterogeneous = MetricRow::new(country, class, Regime::Heterogeneous, het);
    let relative_improvement = match (homogeneous.f1, heterogeneous.f1) {
        (Some(a), Some(b)) if a > 0.0 => Some((b - a) / a),
        _ => None,
    };
    RegimeComparison { consistency_class: class.into(), homogeneous, heterogeneous, relative_improvement }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutOfSampleRow {
    pub country: String,
    pub f1_homogeneous: Option<f64>,
    pub f1_heterogeneous: Option<f64>,
    pub delta: Option<f64>,
}

/// F1 per regime on countries absent from both training sets.
pub fn out_of_sample_eval(hom: &Predictor, het: &Predictor, held_out: &[AnnotationRecord]) -> Vec<OutOfSampleRow> {
    het.warn_unseen(held_out);
    let mut counts: BTreeMap<&str, (Counts, Counts)> = BTreeMap::new();
    for r in held_out {
        let e = counts.entry(&r.country).or_default();
        e.0.add(hom.predict(r), r.annotated);
        e.1.add(het.predict(r), r.annotated);
    }
    counts
        .into_iter()
        .map(|(c, (a, b))| {
            let (fa, fb) = (a.f1(), b.f1());
            OutOfSampleRow {
                country: c.to_string(),
                f1_homogeneous: fa,
                f1_heterogeneous: fb,
                delta: fa.zip(fb).map(|(x, y)| y - x),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Pooled over test countries: one entry per class plus `all`.
    pub pooled: Vec<RegimeComparison>,
    pub out_of_sample: Vec<OutOfSampleRow>,
    pub train_rows: BTreeMap<Regime, usize>,
    pub test_rows: usize,
}

impl EvalReport {
    pub fn pooled_for(&self, class: &str) -> Option<&RegimeComparison> {
        self.pooled.iter().find(|p| p.consistency_class == class)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["country", "consistency_class", "regime", "f1", "accuracy", "support"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            wtr.write_record([
                r.country.clone(),
                r.consistency_class.clone(),
                r.regime.as_str().to_string(),
                opt(r.f1),
                opt(r.accuracy),
                r.support.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Split, build both regimes, fit, and score on the test split and on
/// `held_out` records.
pub fn evaluate(
    records: &[AnnotationRecord],
    held_out: &[AnnotationRecord],
    verdicts: &[ConsistencyVerdict],
    strata: Option<&[StrataCell]>,
    spec: &SplitSpec,
) -> Result<EvalReport> {
    let (pool, test) = split(records, spec)?;
    let sets = build_train_sets(&pool, strata, spec)?;
    let regimes = [(Regime::Homogeneous, &sets.homogeneous, false), (Regime::Heterogeneous, &sets.heterogeneous, true)];
    let fitted = par::map(&regimes, |(_, train, country)| fit_predictor(train, *country));
    let mut predictors = Vec::with_capacity(2);
    for f in fitted {
        predictors.push(f?);
    }
    let (hom, het) = (&predictors[0], &predictors[1]);
    let hom_counts = score(hom, &test, verdicts)?;
    let het_counts = score(het, &test, verdicts)?;

    let mut rows = Vec::new();
    for (regime, counts) in [(Regime::Homogeneous, &hom_counts), (Regime::Heterogeneous, &het_counts)] {
        for ((country, class), c) in counts {
            rows.push(MetricRow::new(country, class.as_str(), regime, c));
        }
    }
    rows.sort_by(|a, b| (&a.country, &a.consistency_class, a.regime).cmp(&(&b.country, &b.consistency_class, b.regime)));

    let pool_by = |counts: &BTreeMap<(String, Classification), Counts>, class: Option<Classification>| {
        let mut total = Counts::default();
        for ((_, c), n) in counts {
            if class.is_none_or(|k| k == *c) {
                total.merge(n);
            }
        }
        total
    };
    let mut pooled = Vec::new();
    for class in [Some(Classification::Consistent), Some(Classification::Inconsistent), None] {
        let name = class.map_or("all", Classification::as_str);
        pooled.push(compare(name, &pool_by(&hom_counts, class), &pool_by(&het_counts, class), "pooled"));
    }
    Ok(EvalReport {
        rows,
        pooled,
        out_of_sample: out_of_sample_eval(hom, het, held_out),
        train_rows: BTreeMap::from([(Regime::Homogeneous, sets.homogeneous.len()), (Regime::Heterogeneous, sets.heterogeneous.len())]),
        test_rows: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(id: &str, country: &str, item: &str, label: &str, gender: Gender, age: AgeGroup, annotated: bool) -> AnnotationRecord {
        AnnotationRecord {
            respondent_id: id.into(),
            country: country.into(),
            gender,
            age_group: age,
            survey_language: "en".into(),
            item_id: item.into(),
            label_id: label.into(),
            annotated,
            play_frequency: 3,
            english_play_frequency: 3,
            ambassador: false,
        }
    }

    fn respondents(n: usize, countries: &[&str]) -> Vec<AnnotationRecord> {
        let mut out = Vec::new();
        for i in 0..n {
            let c = countries[i % countries.len()];
            for l in 0..3 {
                let g = if i % 2 == 0 { Gender::Female } else { Gender::Male };
                out.push(rec(&format!("r{i:03}"), c, "item01", &format!("label{l:02}"), g, AgeGroup::ALL[i % 5], (i + l) % 3 == 0));
            }
        }
        out
    }

    #[test]
    fn f1_arithmetic() {
        let c = Counts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert_abs_diff_eq!(c.f1().unwrap(), 4.0 / 6.0, epsilon = 1e-15);
        let perfect = Counts { tp: 3, fp: 0, fn_: 0, tn: 5 };
        assert_eq!((perfect.f1(), perfect.accuracy()), (Some(1.0), Some(1.0)));
        let all_negative = Counts { tp: 0, fp: 0, fn_: 0, tn: 4 };
        assert_eq!(all_negative.f1(), None);
        let missed = Counts { tp: 0, fp: 0, fn_: 2, tn: 4 };
        assert_eq!(missed.f1(), Some(0.0));
        assert_eq!(Counts::default().accuracy(), None);
    }

    #[test]
    fn split_is_respondent_level_and_deterministic() {
        let recs = respondents(100, &["US"]);
        let spec = SplitSpec { seed: 9, ..SplitSpec::default() };
        let (train, test) = split(&recs, &spec).unwrap();
        let test_ids: BTreeSet<_> = test.iter().map(|r| r.respondent_id.clone()).collect();
        let train_ids: BTreeSet<_> = train.iter().map(|r| r.respondent_id.clone()).collect();
        assert_eq!(test_ids.len(), 30);
        assert!(test_ids.is_disjoint(&train_ids));
        assert_eq!(train.len() + test.len(), recs.len());
        assert_eq!(split(&recs, &spec).unwrap(), (train, test));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let recs = respondents(10, &["US"]);
        for f in [0.0, 1.0, -0.1] {
            let spec = SplitSpec { test_fraction: f, ..SplitSpec::default() };
            assert!(matches!(split(&recs, &spec), Err(EvaluateError::InvalidSpec(_))));
        }
    }

    #[test]
    fn train_sets_partition_by_country() {
        let recs = respondents(60, &["US", "DE", "JP", "KR"]);
        let spec = SplitSpec { sampling: Sampling::Random, ..SplitSpec::default() };
        let sets = build_train_sets(&recs, None, &spec).unwrap();
        assert!(sets.homogeneous.iter().all(|r| &*r.country == "US"));
        assert!(sets.heterogeneous.iter().all(|r| &*r.country != "US"));
        assert_eq!(sets.homogeneous.len() + sets.heterogeneous.len(), recs.len());

        let spec = SplitSpec { sampling: Sampling::OversampleToMatch, ..SplitSpec::default() };
        let sets = build_train_sets(&recs, None, &spec).unwrap();
        assert_eq!(sets.homogeneous.len(), sets.heterogeneous.len());
    }

    #[test]
    fn missing_home_country() {
        let recs = respondents(12, &["DE", "JP"]);
        assert_eq!(build_train_sets(&recs, None, &SplitSpec::default()), Err(EvaluateError::MissingCountry("US".into())));
        let recs = respondents(12, &["US", "JP"]);
        assert_eq!(build_train_sets(&recs, None, &SplitSpec::default()), Err(EvaluateError::TooFewCountries(1)));
    }

    #[test]
    fn representative_sampling_follows_weights() {
        let recs = respondents(200, &["US", "DE", "JP"]);
        let cells: Vec<StrataCell> = ["DE", "JP"]
            .iter()
            .flat_map(|c| {
                AgeGroup::ALL.iter().flat_map(move |a| {
                    [Gender::Female, Gender::Male].into_iter().map(move |g| StrataCell {
                        country: (*c).into(),
                        gender: g,
                        age_group: *a,
                        weight: if *c == "DE" { 3.0 } else { 1.0 },
                    })
                })
            })
            .collect();
        let spec = SplitSpec { sampling: Sampling::RepresentativeStratified, ..SplitSpec::default() };
        let sets = build_train_sets(&recs, Some(&cells), &spec).unwrap();
        let resp: BTreeMap<&str, &str> = sets.heterogeneous.iter().map(|r| (&*r.respondent_id, &*r.country)).collect();
        let per_country = |c: &str| sets.heterogeneous.iter().filter(|r| &*r.country == c).count() / 3;
        let total = per_country("DE") + per_country("JP");
        assert!(!resp.is_empty());
        // Cells present in this pool: half of the 10 gender x age cells per country.
        let present: Vec<f64> = cells
            .iter()
            .filter(|c| sets.heterogeneous.iter().any(|r| r.cell() == c.key()))
            .map(|c| c.weight)
            .collect();
        let expected = stats::allocate(total, &present);
        let de_expected: usize = cells
            .iter()
            .filter(|c| sets.heterogeneous.iter().any(|r| r.cell() == c.key()))
            .zip(&expected)
            .filter(|(c, _)| &*c.country == "DE")
            .map(|(_, k)| *k)
            .sum();
        assert_eq!(per_country("DE"), de_expected);
    }

    #[test]
    fn saturated_pair_predicts_constant() {
        let mut recs = respondents(40, &["US"]);
        for (i, r) in recs.iter_mut().enumerate() {
            if &*r.label_id == "label00" {
                r.annotated = true;
            } else {
                r.annotated = i % 3 == 0;
            }
        }
        let p = fit_predictor(&recs, false).unwrap();
        for g in [Gender::Female, Gender::Male, Gender::Other] {
            for a in AgeGroup::ALL {
                assert!(p.predict(&rec("x", "US", "item01", "label00", g, a, false)));
            }
        }
    }

    #[test]
    fn country_blind_predictor_ignores_country() {
        let recs = respondents(90, &["US", "DE", "JP"]);
        let p = fit_predictor(&recs, false).unwrap();
        let a = rec("x", "DE", "item01", "label01", Gender::Male, AgeGroup::ALL[2], true);
        let b = rec("x", "ZZ", "item01", "label01", Gender::Male, AgeGroup::ALL[2], true);
        assert_eq!(p.probability(&a).to_bits(), p.probability(&b).to_bits());
    }

    #[test]
    fn country_effects_sum_to_zero() {
        let mut recs = respondents(150, &["DE", "JP", "KR"]);
        for (i, r) in recs.iter_mut().enumerate() {
            r.annotated = (i * 7919) % 10 < if &*r.country == "DE" { 7 } else { 4 };
        }
        let p = fit_predictor(&recs, true).unwrap();
        let sum: f64 = p.country_effects.values().sum();
        assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-9);
        assert!(p.country_effects["DE"] > p.country_effects["JP"]);
    }

    #[test]
    fn empty_held_out_is_empty_report() {
        let recs = respondents(30, &["US", "DE", "JP"]);
        let p = fit_predictor(&recs, true).unwrap();
        assert!(out_of_sample_eval(&p, &p, &[]).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn split_disjoint_for_every_mode(seed in 0u64..1000, frac in 0.05..0.6f64, n in 20usize..80) {
                let recs = respondents(n, &["US", "DE", "JP", "KR"]);
                for sampling in [Sampling::Random, Sampling::OversampleToMatch, Sampling::RepresentativeStratified] {
                    let spec = SplitSpec { seed, test_fraction: frac, sampling, ..SplitSpec::default() };
                    let (train, test) = split(&recs, &spec).unwrap();
                    let test_ids: BTreeSet<_> = test.iter().map(|r| r.respondent_id.clone()).collect();
                    let sets = build_train_sets(&train, None, &spec).unwrap();
                    for r in sets.homogeneous.iter().chain(&sets.heterogeneous) {
                        prop_assert!(!test_ids.contains(&r.respondent_id));
                    }
                }
            }

            #[test]
            fn score_invariant_to_row_order(seed in 0u64..1000) {
                let recs = respondents(45, &["US", "DE", "JP"]);
                let p = fit_predictor(&recs, true).unwrap();
                let verdicts: Vec<ConsistencyVerdict> = (0..3)
                    .map(|l| {
                        let mut m = BTreeMap::new();
                        m.insert("US".to_string(), if l == 0 { 0.3 } else { 0.6 });
                        m.insert("DE".to_string(), 0.6);
                        crate::mrp::classify_consistency("item01", &format!("label{l:02}"), &m, &Default::default()).unwrap()
                    })
                    .collect();
                let mut shuffled = recs.clone();
                shuffled.shuffle(&mut rng::seeded(seed));
                prop_assert_eq!(score(&p, &recs, &verdicts).unwrap(), score(&p, &shuffled, &verdicts).unwrap());
            }
        }
    }
}
