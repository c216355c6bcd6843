//! Synthetic annotation surveys with a ground-truth manifest.
//!
//! Annotation probabilities are built additively on the probability scale:
//! a base rate per (item, label), per-country offsets for planted
//! inconsistent pairs, optional country-wide and culture-driven offsets,
//! per-(country, item, label) noise, demographic offsets and, for
//! ambassadors surveyed in English, a language shift. The result is
//! clamped to `[0.01, 0.99]`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AgeGroup, AnnotationRecord, Dimension, Gender, HofstedeRow, HofstedeTable, StrataCell};
use crate::rng;
use crate::stats;

pub const P_MIN: f64 = 0.01;
pub const P_MAX: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),
}

type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySpec {
    pub code: String,
    /// Survey language for non-ambassadors.
    pub language: String,
    /// Hofstede-like position, six values in `[0, 1]`.
    pub hofstede: [f64; 6],
    pub sample_share: f64,
    pub population_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemographicCell {
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub item_id: String,
    pub label_id: String,
    /// Offsets added to the pair's base rate, per country code.
    pub country_offsets: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShift {
    pub country: String,
    pub label_id: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub countries: Vec<CountrySpec>,
    /// Countries generated for out-of-sample evaluation only.
    pub held_out: Vec<CountrySpec>,
    pub items: usize,
    pub labels: usize,
    /// Respondents across `countries`.
    pub respondents: usize,
    /// Respondents per held-out country.
    pub held_out_respondents: usize,
    /// Sampling weights of demographic cells.
    pub demographic_skew: Vec<DemographicCell>,
    /// Population shares of demographic cells, used for the strata table.
    pub population_demographics: Vec<DemographicCell>,
    /// Additive offsets indexed female, male, other.
    pub gender_offsets: [f64; 3],
    pub age_offsets: [f64; 5],
    /// `items * labels` base rates, item-major.
    pub base_rates: Vec<f64>,
    pub planted_inconsistent: Vec<PlantedPair>,
    /// Offsets applied to every pair of a country.
    pub country_offsets: BTreeMap<String, f64>,
    /// Offset per unit of (centered) Hofstede value, by dimension index.
    pub dimension_effects: [f64; 6],
    pub language_shift: Vec<LanguageShift>,
    pub ambassador_rate: f64,
    /// Log-odds change in ambassador probability per age-group step.
    pub ambassador_age_slope: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

pub fn item_id(i: usize) -> String {
    format!("item{:02}", i + 1)
}

pub fn label_id(j: usize) -> String {
    format!("label{:02}", j + 1)
}

fn survey_language(code: &str) -> &'static str {
    match code {
        "AR" | "CL" | "CO" | "MX" => "es",
        "BR" => "pt",
        "DE" => "de",
        "GR" => "el",
        "JP" => "ja",
        "KR" => "ko",
        "PL" => "pl",
        "IN" => "hi",
        "SA" => "ar",
        _ => "en",
    }
}

/// Country spec from the bundled Hofstede fixture.
pub fn bundled_country(code: &str, sample_share: f64) -> CountrySpec {
    let table = HofstedeTable::bundled();
    let row = table.get(code).unwrap_or_else(|| panic!("no bundled Hofstede row for {code}"));
    CountrySpec {
        code: code.to_string(),
        language: survey_language(code).to_string(),
        hofstede: row.values,
        sample_share,
        population_share: 1.0,
    }
}

/// The fourteen analyzed countries.
pub const PAPER_COUNTRIES: [&str; 14] = ["AR", "BR", "CL", "CO", "DE", "GR", "JP", "KR", "MX", "NG", "PL", "SG", "US", "ZA"];
pub const HELD_OUT_COUNTRIES: [&str; 2] = ["IN", "SA"];

fn demographics(genders: &[Gender], weights: impl Fn(Gender, AgeGroup) -> f64) -> Vec<DemographicCell> {
    let mut out = Vec::new();
    for &g in genders {
        for a in AgeGroup::ALL {
            out.push(DemographicCell { gender: g, age_group: a, weight: weights(g, a) });
        }
    }
    out
}

/// Sample skewed towards young men; population closer to balanced.
fn default_skew() -> Vec<DemographicCell> {
    let age_w = [0.30, 0.30, 0.20, 0.13, 0.07];
    demographics(&[Gender::Female, Gender::Male], |g, a| {
        let gw = if g == Gender::Male { 0.7 } else { 0.3 };
        gw * age_w[a.ordinal() as usize]
    })
}

fn default_population() -> Vec<DemographicCell> {
    let age_w = [0.22, 0.26, 0.22, 0.17, 0.13];
    demographics(&[Gender::Female, Gender::Male], |g, a| {
        let gw = if g == Gender::Male { 0.55 } else { 0.45 };
        gw * age_w[a.ordinal() as usize]
    })
}

/// Knobs for [`plant_inconsistent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantingPlan {
    pub count: usize,
    /// Minimum distance of a planted country probability from 0.5.
    pub gap: (f64, f64),
    /// Extra spread proportional to distance from the crossing point.
    pub amplitude: (f64, f64),
}

impl Default for PlantingPlan {
    fn default() -> Self {
        PlantingPlan { count: 55, gap: (0.18, 0.28), amplitude: (0.0, 0.1) }
    }
}

/// Chooses `plan.count` pairs and, for each, a random direction in the
/// (uncertainty, long-term orientation) plane. Countries are projected on
/// that direction and a 0.5 crossing is placed so that `anchor` ends up on
/// the minority side. Offsets are relative to a 0.5 base rate.
pub fn plant_inconsistent(
    countries: &[CountrySpec],
    held_out: &[CountrySpec],
    items: usize,
    labels: usize,
    anchor: &str,
    plan: &PlantingPlan,
    rng: &mut rng::Rng,
) -> Vec<PlantedPair> {
    let n_pairs = items * labels;
    let count = plan.count.min(n_pairs);
    let mut chosen = rand::seq::index::sample(rng, n_pairs, count).into_vec();
    chosen.sort_unstable();
    let ui = Dimension::Uncertainty.index();
    let li = Dimension::LongTermOrientation.index();
    let n = countries.len();
    let anchor_idx = countries.iter().position(|c| c.code == anchor).unwrap_or(0);
    let max_minority = (n / 3).max(1);
    chosen
        .into_iter()
        .map(|k| {
            let (proj, thr) = loop {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let (dx, dy) = (phi.cos(), phi.sin());
                let proj = |c: &CountrySpec| dx * c.hofstede[ui] + dy * c.hofstede[li];
                let s: Vec<f64> = countries.iter().map(proj).collect();
                let mut sorted = s.clone();
                sorted.sort_by(f64::total_cmp);
                let r = sorted.iter().position(|v| *v == s[anchor_idx]).unwrap_or(0);
                let thr = if r < max_minority && r + 1 < n {
                    0.5 * (sorted[r] + sorted[r + 1])
                } else if r >= n.saturating_sub(max_minority) && r > 0 {
                    0.5 * (sorted[r - 1] + sorted[r])
                } else {
                    continue;
                };
                break ((dx, dy), thr);
            };
            let s_of = |c: &CountrySpec| proj.0 * c.hofstede[ui] + proj.1 * c.hofstede[li];
            let s_all: Vec<f64> = countries.iter().map(s_of).collect();
            let range = s_all.iter().copied().fold(f64::MIN, f64::max) - s_all.iter().copied().fold(f64::MAX, f64::min);
            let flip = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let gap = rng.random_range(plan.gap.0..=plan.gap.1);
            let amp = rng.random_range(plan.amplitude.0..=plan.amplitude.1);
            let country_offsets = countries
                .iter()
                .chain(held_out)
                .map(|c| {
                    let d = s_of(c) - thr;
                    let side = flip * if d >= 0.0 { 1.0 } else { -1.0 };
                    let p = (0.5 + side * (gap + amp * d.abs() / range.max(1e-12))).clamp(0.12, 0.88);
                    (c.code.clone(), p - 0.5)
                })
                .collect();
            PlantedPair { item_id: item_id(k / labels), label_id: label_id(k % labels), country_offsets }
        })
        .collect()
}

impl SynthConfig {
    /// Scale of the original survey: 14 countries, 10 items x 28 labels,
    /// about 5,000 respondents with a US plurality, 55 planted
    /// inconsistent pairs.
    pub fn paper_scale(seed: u64) -> SynthConfig {
        let countries: Vec<CountrySpec> = PAPER_COUNTRIES
            .iter()
            .map(|c| bundled_country(c, if *c == "US" { 2.0 } else { 1.0 }))
            .collect();
        Self::build(countries, 10, 28, 5400, &PlantingPlan::default(), seed)
    }

    /// Two items, six countries; fast enough for end-to-end runs in tests.
    pub fn smoke(seed: u64) -> SynthConfig {
        let countries: Vec<CountrySpec> = ["DE", "JP", "KR", "MX", "NG", "US"]
            .iter()
            .map(|c| bundled_country(c, if *c == "US" { 2.0 } else { 1.0 }))
            .collect();
        let plan = PlantingPlan { count: 5, ..PlantingPlan::default() };
        Self::build(countries, 2, 10, 1400, &plan, seed)
    }

    fn build(countries: Vec<CountrySpec>, items: usize, labels: usize, respondents: usize, plan: &PlantingPlan, seed: u64) -> SynthConfig {
        let mut r = rng::derived(seed, "synth:plan", 0);
        let held_out: Vec<CountrySpec> = Vec::new();
        let planted = plant_inconsistent(&countries, &held_out, items, labels, "US", plan, &mut r);
        let planted_keys: BTreeSet<(String, String)> =
            planted.iter().map(|p| (p.item_id.clone(), p.label_id.clone())).collect();
        let base_rates = (0..items * labels)
            .map(|k| {
                if planted_keys.contains(&(item_id(k / labels), label_id(k % labels))) {
                    0.5
                } else {
                    r.random_range(0.05..0.85)
                }
            })
            .collect();
        let non_english: Vec<&CountrySpec> = countries.iter().filter(|c| c.language != "en").collect();
        let mut language_shift = Vec::new();
        for j in rand::seq::index::sample(&mut r, labels, (labels / 5).max(1)).into_vec() {
            for c in &non_english {
                if r.random::<f64>() < 0.4 {
                    language_shift.push(LanguageShift { country: c.code.clone(), label_id: label_id(j), shift: 0.15 });
                }
            }
        }
        SynthConfig {
            countries,
            held_out,
            items,
            labels,
            respondents,
            held_out_respondents: 0,
            demographic_skew: default_skew(),
            population_demographics: default_population(),
            gender_offsets: [0.02, -0.02, 0.0],
            age_offsets: [0.03, 0.015, 0.0, -0.015, -0.03],
            base_rates,
            planted_inconsistent: planted,
            country_offsets: BTreeMap::new(),
            dimension_effects: [0.0; 6],
            language_shift,
            ambassador_rate: 0.08,
            ambassador_age_slope: 0.0,
            noise_sd: 0.01,
            seed,
        }
    }

    /// Adds held-out countries (India and Saudi Arabia by default) that
    /// follow the same planted structure but are excluded from analysis.
    pub fn with_held_out(mut self, codes: &[&str], respondents_each: usize) -> SynthConfig {
        self.held_out = codes.iter().map(|c| bundled_country(c, 0.0)).collect();
        self.held_out_respondents = respondents_each;
        let analysis = self.countries.clone();
        let mut r = rng::derived(self.seed, "synth:plan", 0);
        let plan = PlantingPlan { count: self.planted_inconsistent.len(), ..PlantingPlan::default() };
        // Replanting with the same stream reproduces the analysis-country
        // offsets and extends them to the held-out countries.
        self.planted_inconsistent =
            plant_inconsistent(&analysis, &self.held_out, self.items, self.labels, "US", &plan, &mut r);
        self
    }

    /// One item, one label, three countries; sampling concentrates 80% of
    /// respondents in young men while strong age offsets make that cell
    /// unrepresentative.
    pub fn skew_demo(seed: u64) -> SynthConfig {
        let countries: Vec<CountrySpec> = ["DE", "JP", "US"].iter().map(|c| bundled_country(c, 1.0)).collect();
        let mut skew = demographics(&[Gender::Female, Gender::Male], |_, _| 0.2 / 9.0);
        for c in skew.iter_mut() {
            if c.gender == Gender::Male && c.age_group == AgeGroup::Age18To24 {
                c.weight = 0.8;
            }
        }
        SynthConfig {
            countries,
            held_out: Vec::new(),
            items: 1,
            labels: 1,
            respondents: 12000,
            held_out_respondents: 0,
            demographic_skew: skew,
            population_demographics: demographics(&[Gender::Female, Gender::Male], |_, _| 0.1),
            gender_offsets: [0.0; 3],
            age_offsets: [0.25, 0.1, 0.0, -0.1, -0.25],
            base_rates: vec![0.4],
            planted_inconsistent: Vec::new(),
            country_offsets: BTreeMap::new(),
            dimension_effects: [0.0; 6],
            language_shift: Vec::new(),
            ambassador_rate: 0.0,
            ambassador_age_slope: 0.0,
            noise_sd: 0.0,
            seed,
        }
    }

    /// One non-English country where older respondents are both more likely
    /// to be ambassadors and more likely to annotate; ambassadors carry a
    /// language shift of `effect`.
    pub fn confounded_language(seed: u64, respondents: usize, effect: f64) -> SynthConfig {
        let countries = vec![bundled_country("DE", 1.0)];
        SynthConfig {
            countries,
            held_out: Vec::new(),
            items: 1,
            labels: 1,
            respondents,
            held_out_respondents: 0,
            demographic_skew: demographics(&[Gender::Female, Gender::Male], |_, _| 0.1),
            population_demographics: demographics(&[Gender::Female, Gender::Male], |_, _| 0.1),
            gender_offsets: [0.0; 3],
            age_offsets: [-0.15, -0.075, 0.0, 0.075, 0.15],
            base_rates: vec![0.4],
            planted_inconsistent: Vec::new(),
            country_offsets: BTreeMap::new(),
            dimension_effects: [0.0; 6],
            language_shift: vec![LanguageShift { country: "DE".into(), label_id: label_id(0), shift: effect }],
            ambassador_rate: 0.1,
            ambassador_age_slope: 0.8,
            noise_sd: 0.0,
            seed,
        }
    }

    pub fn with_noise_sd(mut self, sd: f64) -> SynthConfig {
        self.noise_sd = sd;
        self
    }

    pub fn with_respondents(mut self, n: usize) -> SynthConfig {
        self.respondents = n;
        self
    }

    fn all_countries(&self) -> impl Iterator<Item = &CountrySpec> {
        self.countries.iter().chain(&self.held_out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InfeasibleConfig(m.to_string()));
        if self.countries.is_empty() || self.items == 0 || self.labels == 0 || self.respondents == 0 {
            return bad("countries, items, labels and respondents must be positive");
        }
        if self.base_rates.len() != self.items * self.labels {
            return bad("base_rates must have items * labels entries");
        }
        if self.demographic_skew.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return bad("demographic skew weights must sum to a positive number");
        }
        if self.population_demographics.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return bad("population weights must sum to a positive number");
        }
        if !(0.0..1.0).contains(&self.ambassador_rate) {
            return bad("ambassador_rate must lie in [0, 1)");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative");
        }
        Ok(())
    }
}

/// True probability for one population cell of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub item_id: String,
    pub label_id: String,
    pub country: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub probability: f64,
}

/// Population-weighted true probability for one country and pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryTruth {
    pub item_id: String,
    pub label_id: String,
    pub country: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub item_id: String,
    pub label_id: String,
    pub inconsistent: bool,
    pub planted: bool,
    pub cross_country_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub countries: Vec<String>,
    pub held_out: Vec<String>,
    pub items: Vec<String>,
    pub labels: Vec<String>,
    pub cell_probabilities: Vec<TruthCell>,
    pub country_probabilities: Vec<CountryTruth>,
    pub classifications: Vec<PairTruth>,
    pub language_effects: Vec<LanguageShift>,
    /// OLS slope of inconsistent-pair similarity on the (uncertainty,
    /// long-term orientation) distance, over distinct analysis-country pairs.
    pub culture_slope: Option<f64>,
    pub sd_threshold: f64,
    pub majority_line: f64,
}

impl Manifest {
    pub fn country_probability(&self, item: &str, label: &str, country: &str) -> Option<f64> {
        self.country_probabilities
            .iter()
            .find(|t| t.item_id == item && t.label_id == label && t.country == country)
            .map(|t| t.probability)
    }

    /// `(item, label) -> country -> probability` for analysis countries.
    pub fn country_table(&self) -> BTreeMap<(String, String), BTreeMap<String, f64>> {
        let analysis: BTreeSet<&String> = self.countries.iter().collect();
        let mut out: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
        for t in &self.country_probabilities {
            if analysis.contains(&t.country) {
                out.entry((t.item_id.clone(), t.label_id.clone())).or_default().insert(t.country.clone(), t.probability);
            }
        }
        out
    }

    pub fn is_inconsistent(&self, item: &str, label: &str) -> Option<bool> {
        self.classifications.iter().find(|p| p.item_id == item && p.label_id == label).map(|p| p.inconsistent)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub records: Vec<AnnotationRecord>,
    pub strata: Vec<StrataCell>,
    pub hofstede: HofstedeTable,
    pub manifest: Manifest,
}

impl SynthOutput {
    /// Records from analysis countries only.
    pub fn analysis_records(&self) -> Vec<AnnotationRecord> {
        let held: BTreeSet<&str> = self.manifest.held_out.iter().map(String::as_str).collect();
        self.records.iter().filter(|r| !held.contains(&*r.country)).cloned().collect()
    }

    pub fn held_out_records(&self) -> Vec<AnnotationRecord> {
        let held: BTreeSet<&str> = self.manifest.held_out.iter().map(String::as_str).collect();
        self.records.iter().filter(|r| held.contains(&*r.country)).cloned().collect()
    }

    /// Population strata restricted to analysis countries.
    pub fn analysis_strata(&self) -> Vec<StrataCell> {
        let held: BTreeSet<&str> = self.manifest.held_out.iter().map(String::as_str).collect();
        self.strata.iter().filter(|c| !held.contains(&*c.country)).cloned().collect()
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(P_MIN, P_MAX)
}

fn ambassador_probability(config: &SynthConfig, country: &CountrySpec, age: AgeGroup) -> f64 {
    if country.language == "en" || config.ambassador_rate <= 0.0 {
        return 0.0;
    }
    let eta = stats::logit(config.ambassador_rate) + config.ambassador_age_slope * (f64::from(age.ordinal()) - 2.0);
    stats::logistic(eta)
}

/// Draws a dataset and computes its manifest.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let items: Vec<String> = (0..config.items).map(item_id).collect();
    let labels: Vec<String> = (0..config.labels).map(label_id).collect();
    let n_pairs = config.items * config.labels;
    let all: Vec<&CountrySpec> = config.all_countries().collect();

    // Country-level probability before demographic offsets.
    let centers: Vec<f64> = (0..6)
        .map(|d| stats::mean(&config.countries.iter().map(|c| c.hofstede[d]).collect::<Vec<_>>()))
        .collect();
    let planted: BTreeMap<(String, String), &PlantedPair> = config
        .planted_inconsistent
        .iter()
        .map(|p| ((p.item_id.clone(), p.label_id.clone()), p))
        .collect();
    let mut noise_rng = rng::derived(config.seed, "synth:noise", 0);
    let noise = Normal::new(0.0, config.noise_sd.max(0.0)).map_err(|e| SynthError::InfeasibleConfig(e.to_string()))?;
    let mut country_p = vec![vec![0.0; n_pairs]; all.len()];
    for (ci, c) in all.iter().enumerate() {
        let culture: f64 = (0..6).map(|d| config.dimension_effects[d] * (c.hofstede[d] - centers[d])).sum();
        let offset = config.country_offsets.get(&c.code).copied().unwrap_or(0.0);
        for k in 0..n_pairs {
            let key = (items[k / config.labels].clone(), labels[k % config.labels].clone());
            let planted_off = planted.get(&key).and_then(|p| p.country_offsets.get(&c.code)).copied().unwrap_or(0.0);
            let eps = if config.noise_sd > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            country_p[ci][k] = config.base_rates[k] + planted_off + offset + culture + eps;
        }
    }
    let shift_of: BTreeMap<(&str, &str), f64> = config
        .language_shift
        .iter()
        .map(|s| ((s.country.as_str(), s.label_id.as_str()), s.shift))
        .collect();
    let cell_p = |ci: usize, k: usize, g: Gender, a: AgeGroup, ambassador: bool| {
        let mut p = country_p[ci][k] + config.gender_offsets[g as usize] + config.age_offsets[a.ordinal() as usize];
        if ambassador {
            p += shift_of.get(&(all[ci].code.as_str(), labels[k % config.labels].as_str())).copied().unwrap_or(0.0);
        }
        clamp(p)
    };

    // Manifest: marginal cell probabilities (ambassador status integrated
    // out) and population-weighted country truths.
    let pop_total: f64 = config.population_demographics.iter().map(|d| d.weight).sum();
    let mut cell_probabilities = Vec::new();
    let mut country_probabilities = Vec::new();
    for (ci, c) in all.iter().enumerate() {
        for k in 0..n_pairs {
            let mut acc = 0.0;
            for d in &config.population_demographics {
                let pi = ambassador_probability(config, c, d.age_group);
                let p = (1.0 - pi) * cell_p(ci, k, d.gender, d.age_group, false) + pi * cell_p(ci, k, d.gender, d.age_group, true);
                acc += d.weight * p;
                cell_probabilities.push(TruthCell {
                    item_id: items[k / config.labels].clone(),
                    label_id: labels[k % config.labels].clone(),
                    country: c.code.clone(),
                    gender: d.gender,
                    age_group: d.age_group,
                    probability: p,
                });
            }
            country_probabilities.push(CountryTruth {
                item_id: items[k / config.labels].clone(),
                label_id: labels[k % config.labels].clone(),
                country: c.code.clone(),
                probability: acc / pop_total,
            });
        }
    }

    let n_analysis = config.countries.len();
    let mut classifications = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let values: Vec<f64> = (0..n_analysis).map(|ci| country_probabilities[ci * n_pairs + k].probability).collect();
        let (item, label) = (items[k / config.labels].clone(), labels[k % config.labels].clone());
        let is_planted = planted.contains_key(&(item.clone(), label.clone()));
        let (sd, inconsistent) = truth_verdict(&values, 0.05, 0.5);
        if is_planted {
            let max = values.iter().copied().fold(f64::MIN, f64::max);
            let min = values.iter().copied().fold(f64::MAX, f64::min);
            if !(min < 0.5 && max > 0.5 && max - min > 0.15) {
                return Err(SynthError::InfeasibleConfig(format!(
                    "planted pair {item}:{label} no longer straddles 0.5 with a gap above 0.15 after clamping"
                )));
            }
        }
        classifications.push(PairTruth { item_id: item, label_id: label, inconsistent, planted: is_planted, cross_country_sd: sd });
    }

    let culture_slope = truth_culture_slope(config, &country_probabilities, &classifications, n_pairs);

    // Respondents.
    let mut r = rng::derived(config.seed, "synth:sample", 0);
    let shares: Vec<f64> = config.countries.iter().map(|c| c.sample_share).collect();
    let mut per_country = stats::allocate(config.respondents, &shares);
    per_country.extend(std::iter::repeat_n(config.held_out_respondents, config.held_out.len()));
    let demo = WeightedIndex::new(config.demographic_skew.iter().map(|d| d.weight))
        .map_err(|e| SynthError::InfeasibleConfig(e.to_string()))?;
    let item_arcs: Vec<Arc<str>> = items.iter().map(|s| Arc::from(s.as_str())).collect();
    let label_arcs: Vec<Arc<str>> = labels.iter().map(|s| Arc::from(s.as_str())).collect();
    let en: Arc<str> = Arc::from("en");
    let total_resp: usize = per_country.iter().sum();
    let width = total_resp.to_string().len().max(5);
    let mut records = Vec::with_capacity(total_resp * n_pairs);
    let mut rid = 0usize;
    for (ci, c) in all.iter().enumerate() {
        let country: Arc<str> = Arc::from(c.code.as_str());
        let local: Arc<str> = Arc::from(c.language.as_str());
        for _ in 0..per_country[ci] {
            rid += 1;
            let id: Arc<str> = Arc::from(format!("r{rid:0width$}").as_str());
            let d = config.demographic_skew[demo.sample(&mut r)];
            let ambassador = r.random::<f64>() < ambassador_probability(config, c, d.age_group);
            let play_frequency: u8 = r.random_range(0..=5);
            let english_play_frequency: u8 = if ambassador { r.random_range(4..=5) } else { r.random_range(2..=5) };
            let language = if ambassador { en.clone() } else { local.clone() };
            for k in 0..n_pairs {
                let p = cell_p(ci, k, d.gender, d.age_group, ambassador);
                records.push(AnnotationRecord {
                    respondent_id: id.clone(),
                    country: country.clone(),
                    gender: d.gender,
                    age_group: d.age_group,
                    survey_language: language.clone(),
                    item_id: item_arcs[k / config.labels].clone(),
                    label_id: label_arcs[k % config.labels].clone(),
                    annotated: r.random::<f64>() < p,
                    play_frequency,
                    english_play_frequency,
                    ambassador,
                });
            }
        }
    }

    let mut strata = Vec::new();
    for c in &all {
        let country: Arc<str> = Arc::from(c.code.as_str());
        for d in &config.population_demographics {
            strata.push(StrataCell {
                country: country.clone(),
                gender: d.gender,
                age_group: d.age_group,
                weight: c.population_share * d.weight / pop_total,
            });
        }
    }
    let hofstede = HofstedeTable {
        rows: all.iter().map(|c| HofstedeRow { country: Arc::from(c.code.as_str()), values: c.hofstede }).collect(),
    };
    let manifest = Manifest {
        seed: config.seed,
        countries: config.countries.iter().map(|c| c.code.clone()).collect(),
        held_out: config.held_out.iter().map(|c| c.code.clone()).collect(),
        items,
        labels,
        cell_probabilities,
        country_probabilities,
        classifications,
        language_effects: config.language_shift.clone(),
        culture_slope,
        sd_threshold: 0.05,
        majority_line: 0.5,
    };
    Ok(SynthOutput { records, strata, hofstede, manifest })
}

/// Population SD and the inconsistency rule, computed directly from true
/// probabilities.
fn truth_verdict(values: &[f64], sd_threshold: f64, line: f64) -> (f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let above = values.iter().any(|v| *v > line);
    let below = values.iter().any(|v| *v < line);
    (sd, values.len() >= 2 && sd > sd_threshold && above && below)
}

fn truth_culture_slope(
    config: &SynthConfig,
    truths: &[CountryTruth],
    classes: &[PairTruth],
    n_pairs: usize,
) -> Option<f64> {
    let inconsistent: Vec<usize> = (0..n_pairs).filter(|k| classes[*k].inconsistent).collect();
    if inconsistent.len() < 2 || config.countries.len() < 3 {
        return None;
    }
    let ui = Dimension::Uncertainty.index();
    let li = Dimension::LongTermOrientation.index();
    let vec_of = |ci: usize| inconsistent.iter().map(|k| truths[ci * n_pairs + k].probability).collect::<Vec<f64>>();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for a in 0..config.countries.len() {
        for b in a + 1..config.countries.len() {
            let (ha, hb) = (&config.countries[a].hofstede, &config.countries[b].hofstede);
            xs.push(((ha[ui] - hb[ui]).powi(2) + (ha[li] - hb[li]).powi(2)).sqrt());
            ys.push(stats::pearson(&vec_of(a), &vec_of(b))?);
        }
    }
    stats::ols_line(&xs, &ys).map(|(_, slope)| slope)
}
