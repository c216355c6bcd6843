//! Stage implementations shared by the individual subcommands and `audit`.
//!
//! Every stage writes its tables into the output directory and returns the
//! JSON body of its report; `audit` nests those bodies under one key per
//! stage, so its summary is the union of the standalone reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::Result;
use serde_json::{json, Value};

use labelaudit::bayes::MrpModelSpec;
use labelaudit::culture::{self, CultureError};
use labelaudit::dataset::{self, AnnotationRecord, ColumnMapping, FilterPolicy, FilterReport, HofstedeTable, Strata};
use labelaudit::evaluate::{self, EvaluateError, Sampling, SplitSpec};
use labelaudit::matching::{self, ClusterBy, MatchSpec};
use labelaudit::mrp::{self, ConsistencyVerdict, Engine, PairEstimates, Thresholds};
use labelaudit::rng;

use crate::output::{OutDir, Provenance};

/// Bad user input: exits with status 2.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

pub struct InputPaths<'a> {
    pub annotations: &'a Path,
    pub strata: Option<&'a Path>,
    pub hofstede: Option<&'a Path>,
    pub held_out: &'a [String],
    pub min_subgroup_size: usize,
}

pub struct Inputs {
    pub records: Vec<AnnotationRecord>,
    pub held_out: Vec<AnnotationRecord>,
    pub strata: Strata,
    pub hofstede: HofstedeTable,
    pub filter: FilterReport,
    pub rejected_rows: usize,
}

pub fn load_hofstede(path: Option<&Path>, prov: &mut Provenance) -> Result<HofstedeTable> {
    match path {
        Some(p) => {
            prov.add_file("hofstede", p)?;
            Ok(dataset::load_hofstede(p)?)
        }
        None => {
            prov.add_note("hofstede", "bundled");
            Ok(HofstedeTable::bundled())
        }
    }
}

/// Loads annotations, splits off held-out countries, applies the privacy
/// filter and builds strata.
pub fn load_inputs(paths: &InputPaths, prov: &mut Provenance) -> Result<Inputs> {
    prov.add_file("annotations", paths.annotations)?;
    let loaded = dataset::load_annotations(paths.annotations, &ColumnMapping::default())?;
    if !loaded.ledger.is_empty() {
        log::warn!("{} annotation rows rejected; run `validate` for details", loaded.ledger.len());
    }
    let policy = FilterPolicy::default().with_min_subgroup_size(paths.min_subgroup_size);
    let held: std::collections::BTreeSet<&str> = paths.held_out.iter().map(String::as_str).collect();
    let (held_rows, rows): (Vec<_>, Vec<_>) = loaded.records.into_iter().partition(|r| held.contains(&*r.country));
    let (records, filter) = dataset::apply_filters(&rows, &policy)?;
    let held_out = if held_rows.is_empty() { Vec::new() } else { dataset::apply_filters(&held_rows, &policy)?.0 };
    let strata = match paths.strata {
        Some(p) => {
            prov.add_file("strata", p)?;
            dataset::build_strata(&records, Some(p))?
        }
        None => dataset::build_strata(&records, None)?,
    };
    if strata.empirical {
        log::warn!("no population strata given; poststratifying to the sample composition");
    }
    let hofstede = load_hofstede(paths.hofstede, prov)?;
    Ok(Inputs { records, held_out, strata, hofstede, filter, rejected_rows: loaded.ledger.len() })
}

pub fn read_estimates(path: &Path, prov: &mut Provenance) -> Result<Vec<PairEstimates>> {
    prov.add_file("estimates", path)?;
    let f = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    mrp::read_estimates_csv(f).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn read_verdicts(path: &Path, prov: &mut Provenance) -> Result<Vec<ConsistencyVerdict>> {
    prov.add_file("verdicts", path)?;
    let f = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    mrp::read_verdicts_csv(f).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub struct MrpOptions {
    pub engine: Engine,
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub save_draws: bool,
}

pub fn mrp_stage(inputs: &Inputs, opts: &MrpOptions, seed: u64, out: &OutDir, prov: &Provenance) -> Result<(Vec<PairEstimates>, Value)> {
    let spec = MrpModelSpec {
        chains: opts.chains,
        warmup: opts.warmup,
        draws_per_chain: opts.draws,
        seed: rng::derive_seed(seed, "mrp", 0),
        ..MrpModelSpec::default()
    };
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    let run = if opts.save_draws {
        mrp::run_keeping_draws(&inputs.records, &inputs.strata, &spec, opts.engine)
    } else {
        mrp::run(&inputs.records, &inputs.strata, &spec, opts.engine)
    };
    if run.estimates.is_empty() {
        let first = run.failures.first().map(|(k, e)| format!("{k}: {e}")).unwrap_or_default();
        anyhow::bail!("every (item, label) fit failed; first error: {first}");
    }
    out.csv("estimates.csv", prov, |w| mrp::write_estimates_csv(w, &run.estimates))?;
    out.csv("diagnostics.csv", prov, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["item_id", "label_id", "parameter", "rhat", "ess", "degenerate"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for (k, d) in &run.diagnostics {
            for p in &d.params {
                wtr.write_record([k.item_id.to_string(), k.label_id.to_string(), p.name.clone(), opt(p.rhat), opt(p.ess), p.degenerate.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    })?;
    let posterior: serde_json::Map<String, Value> =
        run.summaries.iter().map(|(k, s)| (k.to_string(), json!(s))).collect();
    out.json("posterior.json", prov, &json!({ "pairs": posterior }))?;
    if !run.draws.is_empty() {
        std::fs::create_dir_all(out.path("draws"))?;
        for (k, d) in &run.draws {
            let name = format!("draws/{}__{}.csv", k.item_id, k.label_id);
            out.csv(&name, prov, |w| d.write_csv(w))?;
        }
    }
    let convergence: Vec<String> = run
        .diagnostics
        .iter()
        .filter(|(_, d)| d.convergence_failure)
        .map(|(k, _)| k.to_string())
        .collect();
    if !convergence.is_empty() {
        log::warn!("{} pairs flagged by convergence diagnostics (R-hat > 1.01)", convergence.len());
    }
    let body = json!({
        "engine": opts.engine,
        "approximate": opts.engine == Engine::Laplace,
        "chains": spec.chains,
        "warmup": spec.warmup,
        "draws_per_chain": spec.draws_per_chain,
        "records": inputs.records.len(),
        "countries": run.frame.country_names(),
        "strata_empirical": inputs.strata.empirical,
        "pairs_fitted": run.estimates.len(),
        "failures": run.failures.iter().map(|(k, e)| json!({"pair": k.to_string(), "error": e.to_string()})).collect::<Vec<_>>(),
        "convergence_flagged": convergence,
    });
    Ok((run.estimates, body))
}

pub fn classify_stage(
    estimates: &[PairEstimates],
    thresholds: &Thresholds,
    out: &OutDir,
    prov: &Provenance,
) -> Result<(Vec<ConsistencyVerdict>, Value)> {
    if !(thresholds.sd_threshold > 0.0) || !(thresholds.majority_line > 0.0 && thresholds.majority_line < 1.0) {
        return Err(invalid("sd-threshold must be positive and majority-line must lie in (0, 1)"));
    }
    let verdicts = mrp::classify_all(estimates, thresholds)?;
    out.csv("verdicts.csv", prov, |w| mrp::write_verdicts_csv(w, &verdicts))?;
    let heatmap = mrp::consistency_heatmap(&verdicts);
    out.csv("heatmap.csv", prov, |w| heatmap.write_csv(w))?;
    let inconsistent: Vec<String> = verdicts.iter().filter(|v| v.is_inconsistent()).map(|v| v.pair().to_string()).collect();
    let ties: Vec<String> = verdicts.iter().filter(|v| v.tie_at_majority).map(|v| v.pair().to_string()).collect();
    let body = json!({
        "thresholds": thresholds,
        "approximate": estimates.iter().any(|e| e.approximate),
        "pairs": verdicts.len(),
        "inconsistent": inconsistent.len(),
        "inconsistent_pairs": inconsistent,
        "ties_at_majority": ties,
    });
    Ok((verdicts, body))
}

pub struct CultureOptions {
    pub alpha: f64,
    pub dimensions: Option<Vec<String>>,
}

fn culture_error(e: CultureError) -> anyhow::Error {
    match e {
        CultureError::MissingCountry(_) | CultureError::UnknownDimension(_) => invalid(e.to_string()),
        other => other.into(),
    }
}

pub fn culture_stage(
    records: &[AnnotationRecord],
    hofstede: &HofstedeTable,
    estimates: &[PairEstimates],
    verdicts: &[ConsistencyVerdict],
    opts: &CultureOptions,
    out: &OutDir,
    prov: &Provenance,
) -> Result<Value> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    let mut notices = Vec::new();
    let (selection, dims) = match &opts.dimensions {
        Some(names) => (None, culture::parse_dimensions(names).map_err(culture_error)?),
        None => {
            let sel = culture::select_dimensions(records, hofstede, opts.alpha).map_err(culture_error)?;
            let dims = sel.selected.clone();
            (Some(sel), dims)
        }
    };
    let table = culture::estimate_table(estimates);
    let countries: Vec<std::sync::Arc<str>> = {
        let set: std::collections::BTreeSet<&str> = table.values().flat_map(|m| m.keys().map(String::as_str)).collect();
        set.into_iter().map(Into::into).collect()
    };
    let hof = hofstede.restricted_to(&countries);
    let mut trend = None;
    let mut dimensions_used = Vec::new();
    if dims.is_empty() {
        notices.push("no dimension reached significance; CDI trend skipped".to_string());
    } else {
        let cdi = culture::cdi(&hof, &dims).map_err(culture_error)?;
        dimensions_used = cdi.dimensions_used.clone();
        out.csv("cdi.csv", prov, |w| cdi.write_csv(w))?;
        let sims = culture::pair_similarity(verdicts, &table).map_err(culture_error)?;
        out.csv("similarity.csv", prov, |w| culture::write_similarity_csv(w, &sims, &cdi))?;
        match culture::cdi_similarity_trend(&cdi, &sims) {
            Ok(t) => {
                out.json("trend.json", prov, &json!({ "dimensions": cdi.dimensions_used, "trend": t }))?;
                trend = Some(t)
            }
            Err(e) => notices.push(format!("trend skipped: {e}")),
        }
    }
    let ranks = match culture::label_rank_analysis(&table, verdicts) {
        Ok(r) => {
            out.csv("rank_analysis.csv", prov, |w| r.write_csv(w))?;
            Some(r)
        }
        Err(e) => {
            notices.push(format!("rank analysis skipped: {e}"));
            None
        }
    };
    for n in &notices {
        log::warn!("{n}");
    }
    Ok(json!({
        "alpha": opts.alpha,
        "selection": selection,
        "dimensions_used": dimensions_used,
        "trend": trend,
        "ranks": ranks.as_ref().map(|r| json!({
            "min_spearman": r.min_spearman,
            "mode_spearman": r.mode_spearman,
            "median_rank_diff_by_class": r.median_rank_diff_by_class,
        })),
        "notices": notices,
    }))
}

pub struct MatchOptions {
    pub caliper: f64,
    pub eligibility: u8,
    pub cluster_by: ClusterBy,
}

pub fn match_stage(
    records: &[AnnotationRecord],
    verdicts: &[ConsistencyVerdict],
    opts: &MatchOptions,
    seed: u64,
    out: &OutDir,
    prov: &Provenance,
) -> Result<Value> {
    let spec = MatchSpec {
        caliper: opts.caliper,
        eligibility_threshold: opts.eligibility,
        cluster_by: opts.cluster_by,
        seed: rng::derive_seed(seed, "match", 0),
        ..MatchSpec::default()
    };
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    let sweep = matching::language_effect_sweep(records, verdicts, &spec);
    out.csv("matches.csv", prov, |w| sweep.write_matches_csv(w))?;
    out.csv("balance.csv", prov, |w| sweep.write_balance_csv(w))?;
    out.csv("effects.csv", prov, |w| sweep.write_effects_csv(w))?;
    let fallback = sweep.matches.iter().filter(|m| m.sample.propensity_fallback).count();
    let pairs: usize = sweep.matches.iter().map(|m| m.sample.pairs.len()).sum();
    Ok(json!({
        "spec": spec,
        "matched_contexts": sweep.matches.len(),
        "matched_pairs": pairs,
        "propensity_fallback_contexts": fallback,
        "effects": sweep.effects.len(),
        "infeasible_contexts": sweep.infeasible_contexts,
        "significant_share": sweep.significant_share,
        "notice": sweep.notice,
    }))
}

pub struct EvalOptions {
    pub test_fraction: f64,
    pub homogeneous_country: String,
    pub sampling: Sampling,
}

pub fn evaluate_stage(
    inputs_records: &[AnnotationRecord],
    held_out: &[AnnotationRecord],
    strata: &Strata,
    verdicts: &[ConsistencyVerdict],
    opts: &EvalOptions,
    seed: u64,
    out: &OutDir,
    prov: &Provenance,
) -> Result<Value> {
    let spec = SplitSpec {
        test_fraction: opts.test_fraction,
        seed: rng::derive_seed(seed, "evaluate", 0),
        sampling: opts.sampling,
        homogeneous_country: opts.homogeneous_country.clone(),
    };
    let population = (!strata.empirical).then_some(strata.cells.as_slice());
    let report = evaluate::evaluate(inputs_records, held_out, verdicts, population, &spec).map_err(|e| match e {
        EvaluateError::InvalidSpec(_) | EvaluateError::MissingCountry(_) | EvaluateError::TooFewCountries(_) | EvaluateError::MissingVerdict { .. } => {
            invalid(e.to_string())
        }
        other => other.into(),
    })?;
    out.csv("eval.csv", prov, |w| report.write_csv(w))?;
    Ok(json!({
        "spec": spec,
        "pooled": report.pooled,
        "out_of_sample": report.out_of_sample,
        "train_rows": report.train_rows,
        "test_rows": report.test_rows,
    }))
}

pub fn validate_report(paths: &InputPaths, prov: &mut Provenance) -> Result<(Value, bool)> {
    prov.add_file("annotations", paths.annotations)?;
    let loaded = dataset::load_annotations(paths.annotations, &ColumnMapping::default())?;
    let mut problems = Vec::new();
    if !loaded.ledger.is_empty() {
        problems.push(format!("{} rows rejected", loaded.ledger.len()));
    }
    let per_country = dataset::respondents_by_country(&loaded.records);
    let filtered = dataset::apply_filters(&loaded.records, &FilterPolicy::default().with_min_subgroup_size(paths.min_subgroup_size));
    let filter = match &filtered {
        Ok((_, f)) => Some(f.clone()),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    let mut strata_check = Value::Null;
    if let (Some(p), Ok((records, _))) = (paths.strata, &filtered) {
        prov.add_file("strata", p)?;
        strata_check = match dataset::build_strata(records, Some(p)) {
            Ok(s) => json!({"cells": s.cells.len(), "ok": true}),
            Err(e) => {
                problems.push(e.to_string());
                json!({"ok": false, "error": e.to_string()})
            }
        };
    }
    let hofstede = load_hofstede(paths.hofstede, prov)?;
    if let Err(e) = hofstede.check_coverage(&loaded.records) {
        problems.push(e.to_string());
    }
    let ok = problems.is_empty();
    let body = json!({
        "records": loaded.records.len(),
        "respondents_by_country": per_country.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        "rejected_rows": loaded.ledger.len(),
        "rejected_samples": loaded.ledger.iter().take(20).collect::<Vec<_>>(),
        "age_warnings": loaded.age_warnings,
        "filter": filter,
        "strata": strata_check,
        "problems": problems,
        "ok": ok,
    });
    Ok((body, ok))
}
