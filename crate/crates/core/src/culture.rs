//! Cultural-distance analysis.
//!
//! Selects the Hofstede dimensions that explain annotation behaviour, turns
//! them into a Cultural Distance Index (Euclidean distance between country
//! profiles) and relates country-pair annotation similarity to that distance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{AnnotationRecord, Dimension, HofstedeTable};
use crate::glm::{self, CoefRow, DesignBuilder, GlmError, IrlsOptions};
use crate::mrp::{Classification, ConsistencyVerdict, PairEstimates};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CultureError {
    #[error("no usable Hofstede dimension: all are constant or collinear across countries")]
    CollinearDimensions,
    #[error("need at least 3 countries with distinct Hofstede profiles, got {0}")]
    TooFewCountries(usize),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("no Hofstede row for country {0}")]
    MissingCountry(String),
    #[error("need at least {needed} {what}, got {got}")]
    TooFewPairs { what: &'static str, needed: usize, got: usize },
    #[error("all CDI values are equal; slope undefined")]
    DegenerateX,
    #[error("item {item}: country {country} has no estimate for label {label}")]
    IncompleteRanking { item: String, label: String, country: String },
    #[error(transparent)]
    Glm(#[from] GlmError),
}

type Result<T> = std::result::Result<T, CultureError>;

/// Condition number above which a dimension is treated as collinear with
/// the intercept and the dimensions already kept.
pub const MAX_CONDITION: f64 = 1e10;

pub fn parse_dimensions<S: AsRef<str>>(names: &[S]) -> Result<Vec<Dimension>> {
    names
        .iter()
        .map(|n| Dimension::parse(n.as_ref()).ok_or_else(|| CultureError::UnknownDimension(n.as_ref().to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionSelection {
    /// Dimensions with p < alpha, ordered by decreasing |coefficient|.
    pub selected: Vec<Dimension>,
    /// Dimensions removed before fitting because of collinearity.
    pub dropped: Vec<Dimension>,
    pub alpha: f64,
    pub coefficients: Vec<CoefRow>,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 { f64::INFINITY } else { max / min }
}

/// Greedily keeps dimensions whose country-level design `[1, h_kept]`
/// stays well conditioned.
fn usable_dimensions(hofstede: &HofstedeTable, countries: &[&str]) -> Result<(Vec<Dimension>, Vec<Dimension>)> {
    let rows: Vec<[f64; 6]> = countries
        .iter()
        .map(|c| hofstede.get(c).map(|r| r.values).ok_or_else(|| CultureError::MissingCountry(c.to_string())))
        .collect::<Result<_>>()?;
    let mut kept: Vec<Dimension> = Vec::new();
    let mut dropped = Vec::new();
    for d in Dimension::ALL {
        let mut cols = kept.clone();
        cols.push(d);
        let m = DMatrix::from_fn(rows.len(), cols.len() + 1, |i, j| if j == 0 { 1.0 } else { rows[i][cols[j - 1].index()] });
        if rows.len() > cols.len() && condition_number(&m) <= MAX_CONDITION {
            kept.push(d);
        } else {
            dropped.push(d);
        }
    }
    if kept.is_empty() {
        return Err(CultureError::CollinearDimensions);
    }
    Ok((kept, dropped))
}

/// Pooled logistic regression of `annotated` on gender, age group, item and
/// label fixed effects and the Hofstede values of the respondent's country.
pub fn select_dimensions(records: &[AnnotationRecord], hofstede: &HofstedeTable, alpha: f64) -> Result<DimensionSelection> {
    let countries: BTreeSet<&str> = records.iter().map(|r| &*r.country).collect();
    let profiles: BTreeSet<Vec<u64>> = countries
        .iter()
        .map(|c| hofstede.get(c).map(|r| r.values.iter().map(|v| v.to_bits()).collect()))
        .collect::<Option<_>>()
        .ok_or_else(|| {
            let missing = countries.iter().find(|c| hofstede.get(c).is_none()).copied().unwrap_or_default();
            CultureError::MissingCountry(missing.to_string())
        })?;
    if countries.len() < 3 {
        return Err(CultureError::TooFewCountries(countries.len()));
    }
    let countries: Vec<&str> = countries.into_iter().collect();
    let (dims, dropped) = usable_dimensions(hofstede, &countries)?;
    if profiles.len() < 3 {
        return Err(CultureError::TooFewCountries(profiles.len()));
    }
    for d in &dropped {
        log::warn!("dropping Hofstede dimension {d}: collinear across the surveyed countries");
    }

    // Binomial aggregation over identical covariate patterns.
    let mut patterns: BTreeMap<(u8, u8, &str, &str, &str), (f64, f64)> = BTreeMap::new();
    for r in records {
        let e = patterns.entry((r.gender as u8, r.age_group.ordinal(), &r.item_id, &r.label_id, &r.country)).or_default();
        e.1 += 1.0;
        if r.annotated {
            e.0 += 1.0;
        }
    }
    let n = patterns.len();
    let keys: Vec<_> = patterns.keys().copied().collect();
    let genders: Vec<String> = keys.iter().map(|k| k.0.to_string()).collect();
    let ages: Vec<String> = keys.iter().map(|k| k.1.to_string()).collect();
    let items: Vec<&str> = keys.iter().map(|k| k.2).collect();
    let labels: Vec<&str> = keys.iter().map(|k| k.3).collect();
    let mut builder = DesignBuilder::new(n)
        .factor("gender", &genders)
        .factor("age_group", &ages)
        .factor("item", &items)
        .factor("label", &labels);
    for d in &dims {
        let values = keys.iter().map(|k| hofstede.get(k.4).map(|r| r.get(*d)).unwrap_or(f64::NAN)).collect();
        builder = builder.numeric(d.as_str(), values);
    }
    let x = builder.build()?;
    let successes: Vec<f64> = patterns.values().map(|v| v.0).collect();
    let trials: Vec<f64> = patterns.values().map(|v| v.1).collect();
    let fit = glm::fit_binomial(&x, &successes, &trials, &IrlsOptions::default())?;
    let table = glm::coefficient_table(&fit);
    let mut selected: Vec<(Dimension, f64)> = dims
        .iter()
        .filter_map(|d| table.iter().find(|row| row.name == d.as_str()).map(|row| (*d, row)))
        .filter(|(_, row)| row.p < alpha)
        .map(|(d, row)| (d, row.estimate.abs()))
        .collect();
    selected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(DimensionSelection { selected: selected.into_iter().map(|s| s.0).collect(), dropped, alpha, coefficients: table })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdiMatrix {
    pub countries: Vec<String>,
    pub distances: Vec<Vec<f64>>,
    pub dimensions_used: Vec<Dimension>,
}

impl CdiMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.countries.iter().position(|c| c == a)?;
        let j = self.countries.iter().position(|c| c == b)?;
        Some(self.distances[i][j])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["country_a", "country_b", "cdi"])?;
        for (i, a) in self.countries.iter().enumerate() {
            for (j, b) in self.countries.iter().enumerate() {
                wtr.write_record([a.as_str(), b.as_str(), &format!("{}", self.distances[i][j])])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Euclidean distance between country profiles over `dims`, for every
/// country in the table (in table order).
pub fn cdi(hofstede: &HofstedeTable, dims: &[Dimension]) -> Result<CdiMatrix> {
    if dims.is_empty() {
        return Err(CultureError::UnknownDimension("(none given)".into()));
    }
    let rows = &hofstede.rows;
    let distances = rows
        .iter()
        .map(|a| {
            rows.iter()
                .map(|b| dims.iter().map(|d| (a.get(*d) - b.get(*d)).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    Ok(CdiMatrix {
        countries: rows.iter().map(|r| r.country.to_string()).collect(),
        distances,
        dimensions_used: dims.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountryPairSimilarity {
    pub country_a: String,
    pub country_b: String,
    /// `None` when either vector has zero variance.
    pub pearson_inconsistent: Option<f64>,
    pub pearson_consistent: Option<f64>,
    pub n_inconsistent: usize,
    pub n_consistent: usize,
}

/// `(item, label) -> country -> estimate` from poststratified estimates.
pub type EstimateTable = BTreeMap<(String, String), BTreeMap<String, f64>>;

pub fn estimate_table(estimates: &[PairEstimates]) -> EstimateTable {
    estimates.iter().map(|e| ((e.item_id.clone(), e.label_id.clone()), e.means())).collect()
}

/// Per-country vectors of estimates over the inconsistent and consistent
/// pairs (global pair order), correlated for every distinct country pair.
pub fn pair_similarity(verdicts: &[ConsistencyVerdict], estimates: &EstimateTable) -> Result<Vec<CountryPairSimilarity>> {
    let mut classes: Vec<(&ConsistencyVerdict, &BTreeMap<String, f64>)> = verdicts
        .iter()
        .filter_map(|v| estimates.get(&(v.item_id.clone(), v.label_id.clone())).map(|e| (v, e)))
        .collect();
    classes.sort_by(|a, b| (&a.0.item_id, &a.0.label_id).cmp(&(&b.0.item_id, &b.0.label_id)));
    let n_inc = classes.iter().filter(|(v, _)| v.is_inconsistent()).count();
    let n_con = classes.len() - n_inc;
    if n_inc < 2 {
        return Err(CultureError::TooFewPairs { what: "inconsistent pairs", needed: 2, got: n_inc });
    }
    if n_con < 2 {
        return Err(CultureError::TooFewPairs { what: "consistent pairs", needed: 2, got: n_con });
    }
    let countries: BTreeSet<&String> = classes.iter().flat_map(|(_, e)| e.keys()).collect();
    let vector = |country: &str, inconsistent: bool| -> Vec<f64> {
        classes
            .iter()
            .filter(|(v, _)| v.is_inconsistent() == inconsistent)
            .map(|(_, e)| e.get(country).copied().unwrap_or(f64::NAN))
            .collect()
    };
    let vectors: BTreeMap<&String, (Vec<f64>, Vec<f64>)> =
        countries.iter().map(|c| (*c, (vector(c, true), vector(c, false)))).collect();
    let names: Vec<&String> = countries.into_iter().collect();
    let mut pairs = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            pairs.push((*a, *b));
        }
    }
    Ok(crate::par::map(&pairs, |(a, b)| {
        let (ia, ca) = &vectors[a];
        let (ib, cb) = &vectors[b];
        CountryPairSimilarity {
            country_a: a.to_string(),
            country_b: b.to_string(),
            pearson_inconsistent: finite_pearson(ia, ib),
            pearson_consistent: finite_pearson(ca, cb),
            n_inconsistent: ia.len(),
            n_consistent: ca.len(),
        }
    }))
}

fn finite_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    stats::pearson(a, b)
}

pub fn write_similarity_csv<W: Write>(w: W, sims: &[CountryPairSimilarity], cdi: &CdiMatrix) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "country_a",
        "country_b",
        "cdi",
        "pearson_inconsistent",
        "pearson_consistent",
        "n_inconsistent",
        "n_consistent",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for s in sims {
        wtr.write_record([
            s.country_a.clone(),
            s.country_b.clone(),
            opt(cdi.get(&s.country_a, &s.country_b)),
            opt(s.pearson_inconsistent),
            opt(s.pearson_consistent),
            s.n_inconsistent.to_string(),
            s.n_consistent.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub spearman: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trend {
    pub inconsistent: LineFit,
    pub consistent: Option<LineFit>,
}

/// Ordinary least squares line and Spearman correlation of `ys` on `xs`.
pub fn trend_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() < 2 {
        return Err(CultureError::TooFewPairs { what: "country pairs", needed: 2, got: xs.len() });
    }
    let (intercept, slope) = stats::ols_line(xs, ys).ok_or(CultureError::DegenerateX)?;
    Ok(LineFit { slope, intercept, spearman: stats::spearman(xs, ys), n_pairs: xs.len() })
}

/// Similarity-on-CDI trend over distinct country pairs, unweighted,
/// separately for inconsistent and consistent vectors. Pairs with a null
/// correlation are skipped.
pub fn cdi_similarity_trend(cdi: &CdiMatrix, sims: &[CountryPairSimilarity]) -> Result<Trend> {
    if sims.len() < 3 {
        return Err(CultureError::TooFewPairs { what: "country pairs", needed: 3, got: sims.len() });
    }
    let collect = |pick: fn(&CountryPairSimilarity) -> Option<f64>| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in sims {
            if let (Some(x), Some(y)) = (cdi.get(&s.country_a, &s.country_b), pick(s)) {
                xs.push(x);
                ys.push(y);
            }
        }
        (xs, ys)
    };
    let (xi, yi) = collect(|s| s.pearson_inconsistent);
    let (xc, yc) = collect(|s| s.pearson_consistent);
    Ok(Trend { inconsistent: trend_line(&xi, &yi)?, consistent: trend_line(&xc, &yc).ok() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankCorrelation {
    pub item_id: String,
    pub country_a: String,
    pub country_b: String,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRankDiff {
    pub item_id: String,
    pub label_id: String,
    pub classification: Option<Classification>,
    /// Median over country pairs of the absolute rank difference.
    pub median_rank_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankAnalysis {
    pub correlations: Vec<RankCorrelation>,
    pub label_diffs: Vec<LabelRankDiff>,
    /// Median rank difference across all labels and country pairs, by class.
    pub median_rank_diff_by_class: BTreeMap<Classification, f64>,
    pub min_spearman: Option<f64>,
    /// Most frequent Spearman value after rounding to two decimals.
    pub mode_spearman: Option<f64>,
}

/// Ranks labels within each item by estimate (rank 1 = most annotated,
/// average ranks for ties) and compares rankings across countries.
pub fn label_rank_analysis(estimates: &EstimateTable, verdicts: &[ConsistencyVerdict]) -> Result<RankAnalysis> {
    let class_of: BTreeMap<(&str, &str), Classification> = verdicts
        .iter()
        .map(|v| ((v.item_id.as_str(), v.label_id.as_str()), v.classification))
        .collect();
    let mut by_item: BTreeMap<&str, Vec<(&str, &BTreeMap<String, f64>)>> = BTreeMap::new();
    for ((item, label), e) in estimates {
        by_item.entry(item.as_str()).or_default().push((label.as_str(), e));
    }
    let mut correlations = Vec::new();
    let mut label_diffs = Vec::new();
    let mut class_diffs: BTreeMap<Classification, Vec<f64>> = BTreeMap::new();
    for (item, labels) in by_item {
        let countries: BTreeSet<&String> = labels.iter().flat_map(|(_, e)| e.keys()).collect();
        let mut ranks: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
        for c in &countries {
            let values: Vec<f64> = labels
                .iter()
                .map(|(label, e)| {
                    e.get(*c).map(|v| -v).ok_or_else(|| CultureError::IncompleteRanking {
                        item: item.to_string(),
                        label: label.to_string(),
                        country: c.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            ranks.insert(c, stats::average_ranks(&values));
        }
        let names: Vec<&String> = countries.into_iter().collect();
        let mut per_label: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                let (ra, rb) = (&ranks[a], &ranks[b]);
                correlations.push(RankCorrelation {
                    item_id: item.to_string(),
                    country_a: a.to_string(),
                    country_b: b.to_string(),
                    spearman: stats::pearson(ra, rb),
                });
                for (k, d) in per_label.iter_mut().enumerate() {
                    d.push((ra[k] - rb[k]).abs());
                }
            }
        }
        for ((label, _), diffs) in labels.iter().zip(per_label) {
            let classification = class_of.get(&(item, *label)).copied();
            if let Some(c) = classification {
                class_diffs.entry(c).or_default().extend(&diffs);
            }
            label_diffs.push(LabelRankDiff {
                item_id: item.to_string(),
                label_id: label.to_string(),
                classification,
                median_rank_diff: if diffs.is_empty() { 0.0 } else { stats::median(&diffs) },
            });
        }
    }
    let values: Vec<f64> = correlations.iter().filter_map(|c| c.spearman).collect();
    let min_spearman = values.iter().copied().reduce(f64::min);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in &values {
        *counts.entry((v * 100.0).round() as i64).or_default() += 1;
    }
    let mode_spearman = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(k, _)| *k as f64 / 100.0);
    Ok(RankAnalysis {
        correlations,
        label_diffs,
        median_rank_diff_by_class: class_diffs.into_iter().map(|(c, d)| (c, stats::median(&d))).collect(),
        min_spearman,
        mode_spearman,
    })
}

impl RankAnalysis {
    /// Long-form table: one `spearman` row per (item, country pair) and one
    /// `rank_diff` row per (item, label).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["kind", "item_id", "label_id", "country_a", "country_b", "classification", "value"])?;
        for c in &self.correlations {
            let value = c.spearman.map(|v| format!("{v}")).unwrap_or_default();
            wtr.write_record(["spearman", &c.item_id, "", &c.country_a, &c.country_b, "", &value])?;
        }
        for d in &self.label_diffs {
            let class = d.classification.map(|c| c.as_str()).unwrap_or("");
            wtr.write_record(["rank_diff", &d.item_id, &d.label_id, "", "", class, &format!("{}", d.median_rank_diff)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::HofstedeRow;
    use crate::mrp::{classify_consistency, Thresholds};
    use approx::assert_abs_diff_eq;

    const UL: [Dimension; 2] = [Dimension::Uncertainty, Dimension::LongTermOrientation];

    #[test]
    fn bundled_anchor_distances() {
        let m = cdi(&HofstedeTable::bundled(), &UL).unwrap();
        assert_abs_diff_eq!(m.get("KR", "NG").unwrap(), 0.9203, epsilon = 5e-5);
        assert_abs_diff_eq!(m.get("AR", "MX").unwrap(), 0.0566, epsilon = 5e-5);
        assert_eq!(m.get("US", "US"), Some(0.0));
    }

    #[test]
    fn empty_dimension_list_rejected() {
        assert!(cdi(&HofstedeTable::bundled(), &[]).is_err());
        assert_eq!(parse_dimensions(&["grit"]), Err(CultureError::UnknownDimension("grit".into())));
    }

    fn table(rows: &[(&str, [f64; 6])]) -> HofstedeTable {
        HofstedeTable { rows: rows.iter().map(|(c, v)| HofstedeRow { country: (*c).into(), values: *v }).collect() }
    }

    #[test]
    fn constant_dimensions_are_collinear() {
        let t = table(&[("A", [0.5; 6]), ("B", [0.5; 6]), ("C", [0.5; 6])]);
        assert_eq!(usable_dimensions(&t, &["A", "B", "C"]), Err(CultureError::CollinearDimensions));
    }

    fn sims(pairs: &[(&str, &str, f64)]) -> Vec<CountryPairSimilarity> {
        pairs
            .iter()
            .map(|(a, b, s)| CountryPairSimilarity {
                country_a: a.to_string(),
                country_b: b.to_string(),
                pearson_inconsistent: Some(*s),
                pearson_consistent: Some(*s),
                n_inconsistent: 2,
                n_consistent: 2,
            })
            .collect()
    }

    #[test]
    fn flat_similarity_has_zero_slope() {
        let t = table(&[("A", [0.0; 6]), ("B", [0.3; 6]), ("C", [0.9; 6])]);
        let m = cdi(&t, &UL).unwrap();
        let tr = cdi_similarity_trend(&m, &sims(&[("A", "B", 0.7), ("A", "C", 0.7), ("B", "C", 0.7)])).unwrap();
        assert_abs_diff_eq!(tr.inconsistent.slope, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_cdi_is_degenerate() {
        let t = table(&[("A", [0.0; 6]), ("B", [0.0; 6]), ("C", [0.0; 6])]);
        let m = cdi(&t, &UL).unwrap();
        assert_eq!(
            cdi_similarity_trend(&m, &sims(&[("A", "B", 0.1), ("A", "C", 0.5), ("B", "C", 0.7)])),
            Err(CultureError::DegenerateX)
        );
    }

    #[test]
    fn two_points_interpolate() {
        let f = trend_line(&[0.1, 0.5], &[0.9, 0.7]).unwrap();
        assert_abs_diff_eq!(f.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.spearman.unwrap(), -1.0, epsilon = 1e-12);
    }

    fn estimates(rows: &[(&str, &str, &[(&str, f64)])]) -> EstimateTable {
        rows.iter()
            .map(|(i, l, e)| ((i.to_string(), l.to_string()), e.iter().map(|(c, v)| (c.to_string(), *v)).collect()))
            .collect()
    }

    fn verdicts(table: &EstimateTable) -> Vec<ConsistencyVerdict> {
        table
            .iter()
            .map(|((i, l), e)| classify_consistency(i, l, e, &Thresholds::default()).unwrap())
            .collect()
    }

    #[test]
    fn similarity_vectors_follow_partition() {
        let t = estimates(&[
            ("g", "a", &[("KR", 0.2), ("US", 0.8), ("DE", 0.3)]),
            ("g", "b", &[("KR", 0.7), ("US", 0.3), ("DE", 0.6)]),
            ("g", "c", &[("KR", 0.1), ("US", 0.12), ("DE", 0.11)]),
            ("g", "d", &[("KR", 0.9), ("US", 0.88), ("DE", 0.91)]),
        ]);
        let v = verdicts(&t);
        let s = pair_similarity(&v, &t).unwrap();
        assert_eq!(s.len(), 3);
        let de_kr = s.iter().find(|p| p.country_a == "DE" && p.country_b == "KR").unwrap();
        assert_abs_diff_eq!(de_kr.pearson_inconsistent.unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(de_kr.n_inconsistent, 2);
        assert_eq!(de_kr.n_consistent, 2);
        let kr_us = s.iter().find(|p| p.country_a == "KR" && p.country_b == "US").unwrap();
        assert_abs_diff_eq!(kr_us.pearson_inconsistent.unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn similarity_needs_both_classes() {
        let t = estimates(&[("g", "a", &[("KR", 0.2), ("US", 0.3)]), ("g", "b", &[("KR", 0.2), ("US", 0.3)])]);
        assert!(matches!(pair_similarity(&verdicts(&t), &t), Err(CultureError::TooFewPairs { .. })));
    }

    #[test]
    fn rank_oracle_example() {
        // Estimates whose descending order gives ranks [1,2,3,4] and [2,1,3,4].
        let t = estimates(&[
            ("g", "a", &[("A", 0.9), ("B", 0.8)]),
            ("g", "b", &[("A", 0.8), ("B", 0.9)]),
            ("g", "c", &[("A", 0.3), ("B", 0.3)]),
            ("g", "d", &[("A", 0.1), ("B", 0.1)]),
        ]);
        let r = label_rank_analysis(&t, &verdicts(&t)).unwrap();
        assert_abs_diff_eq!(r.correlations[0].spearman.unwrap(), 0.8, epsilon = 1e-12);
        let diffs: Vec<f64> = r.label_diffs.iter().map(|d| d.median_rank_diff).collect();
        assert_eq!(diffs, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reversed_ranking_is_minus_one() {
        let t = estimates(&[
            ("g", "a", &[("A", 0.9), ("B", 0.1)]),
            ("g", "b", &[("A", 0.7), ("B", 0.3)]),
            ("g", "c", &[("A", 0.5), ("B", 0.5)]),
            ("g", "d", &[("A", 0.3), ("B", 0.7)]),
            ("g", "e", &[("A", 0.1), ("B", 0.9)]),
        ]);
        let r = label_rank_analysis(&t, &verdicts(&t)).unwrap();
        assert_abs_diff_eq!(r.min_spearman.unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_label_estimate_is_incomplete() {
        let t = estimates(&[("g", "a", &[("A", 0.9), ("B", 0.1)]), ("g", "b", &[("A", 0.7)])]);
        assert!(matches!(label_rank_analysis(&t, &[]), Err(CultureError::IncompleteRanking { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn profile() -> impl Strategy<Value = [f64; 6]> {
            proptest::array::uniform6(0.0..1.0f64)
        }

        proptest! {
            #[test]
            fn cdi_is_a_metric_and_shift_invariant(a in profile(), b in profile(), c in profile(), shift in -0.5..0.5f64, d in 0usize..6) {
                let t = table(&[("A", a), ("B", b), ("C", c)]);
                let m = cdi(&t, &Dimension::ALL).unwrap();
                for i in 0..3 {
                    prop_assert_eq!(m.distances[i][i], 0.0);
                    for j in 0..3 {
                        prop_assert!((m.distances[i][j] - m.distances[j][i]).abs() < 1e-15);
                        for k in 0..3 {
                            prop_assert!(m.distances[i][k] <= m.distances[i][j] + m.distances[j][k] + 1e-12);
                        }
                    }
                }
                let mut shifted = t.clone();
                for r in shifted.rows.iter_mut() {
                    r.values[d] += shift;
                }
                let ms = cdi(&shifted, &Dimension::ALL).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((m.distances[i][j] - ms.distances[i][j]).abs() < 1e-12);
                    }
                }
                let perm = table(&[("C", c), ("A", a), ("B", b)]);
                let mp = cdi(&perm, &Dimension::ALL).unwrap();
                prop_assert_eq!(mp.get("A", "B"), m.get("A", "B"));
            }

            #[test]
            fn trend_slope_ignores_pair_order(ys in proptest::collection::vec(-1.0..1.0f64, 6), seed in 0u64..1000) {
                let t = table(&[("A", [0.1; 6]), ("B", [0.4; 6]), ("C", [0.5; 6]), ("D", [0.95; 6])]);
                let m = cdi(&t, &UL).unwrap();
                let names = ["A", "B", "C", "D"];
                let mut pairs = Vec::new();
                let mut k = 0;
                for i in 0..4 {
                    for j in i + 1..4 {
                        pairs.push((names[i], names[j], ys[k]));
                        k += 1;
                    }
                }
                let a = cdi_similarity_trend(&m, &sims(&pairs)).unwrap();
                use rand::seq::SliceRandom;
                pairs.shuffle(&mut crate::rng::seeded(seed));
                let b = cdi_similarity_trend(&m, &sims(&pairs)).unwrap();
                prop_assert!((a.inconsistent.slope - b.inconsistent.slope).abs() < 1e-10);
            }

            #[test]
            fn rank_self_and_reverse(values in proptest::collection::btree_set(0u32..1000, 3..10)) {
                let v: Vec<f64> = values.iter().map(|x| *x as f64 / 1000.0).collect();
                let rev: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
                let ra = stats::average_ranks(&v);
                prop_assert!((stats::spearman(&v, &v).unwrap() - 1.0).abs() < 1e-12);
                prop_assert!((stats::spearman(&v, &rev).unwrap() + 1.0).abs() < 1e-12);
                prop_assert_eq!(ra.len(), v.len());
            }
        }
    }
}
