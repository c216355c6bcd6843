//! `labelaudit` command-line front end.

mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use labelaudit::dataset::{self, DatasetError};
use labelaudit::evaluate::Sampling;
use labelaudit::matching::ClusterBy;
use labelaudit::mrp::{Engine, Thresholds};
use labelaudit::synth::{self, SynthConfig};
use labelaudit::{par, Error as CoreError};

use output::{OutDir, Provenance};
use pipeline::*;

#[derive(Parser, Debug)]
#[command(name = "labelaudit", version, about = "Audit annotated label datasets for cross-demographic consistency")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Output directory for artifacts.
    #[arg(long, global = true, env = "LABELAUDIT_OUT", default_value = "labelaudit-out")]
    out: PathBuf,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, env = "LABELAUDIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Maximum worker threads (0 = all cores).
    #[arg(long, global = true, env = "LABELAUDIT_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    #[arg(long, env = "LABELAUDIT_ANNOTATIONS")]
    annotations: PathBuf,
    /// Population strata CSV; without it the sample composition is used.
    #[arg(long, env = "LABELAUDIT_STRATA")]
    strata: Option<PathBuf>,
    /// Hofstede table CSV; defaults to the bundled fixture.
    #[arg(long, env = "LABELAUDIT_HOFSTEDE")]
    hofstede: Option<PathBuf>,
    /// Countries kept out of every analysis except out-of-sample evaluation.
    #[arg(long, env = "LABELAUDIT_HELD_OUT", value_delimiter = ',')]
    held_out: Vec<String>,
    /// Minimum distinct respondents per (country, gender, age group) cell.
    #[arg(long, env = "LABELAUDIT_MIN_SUBGROUP_SIZE", default_value_t = 6)]
    min_subgroup_size: usize,
}

impl InputArgs {
    fn paths(&self) -> InputPaths<'_> {
        InputPaths {
            annotations: &self.annotations,
            strata: self.strata.as_deref(),
            hofstede: self.hofstede.as_deref(),
            held_out: &self.held_out,
            min_subgroup_size: self.min_subgroup_size,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum EngineArg {
    Hmc,
    Laplace,
}

#[derive(Args, Debug, Clone)]
struct MrpArgs {
    #[arg(long, env = "LABELAUDIT_ENGINE", value_enum, default_value = "hmc")]
    engine: EngineArg,
    #[arg(long, env = "LABELAUDIT_CHAINS", default_value_t = 4)]
    chains: usize,
    #[arg(long, env = "LABELAUDIT_WARMUP", default_value_t = 1000)]
    warmup: usize,
    #[arg(long, env = "LABELAUDIT_DRAWS", default_value_t = 1000)]
    draws: usize,
    /// Also write every pair's posterior draws under draws/.
    #[arg(long)]
    save_draws: bool,
}

impl MrpArgs {
    fn options(&self) -> MrpOptions {
        MrpOptions {
            engine: match self.engine {
                EngineArg::Hmc => Engine::Hmc,
                EngineArg::Laplace => Engine::Laplace,
            },
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            save_draws: self.save_draws,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ClassifyArgs {
    #[arg(long, env = "LABELAUDIT_SD_THRESHOLD", default_value_t = 0.05)]
    sd_threshold: f64,
    #[arg(long, env = "LABELAUDIT_MAJORITY_LINE", default_value_t = 0.5)]
    majority_line: f64,
}

impl ClassifyArgs {
    fn thresholds(&self) -> Thresholds {
        Thresholds { sd_threshold: self.sd_threshold, majority_line: self.majority_line }
    }
}

#[derive(Args, Debug, Clone)]
struct CultureArgs {
    #[arg(long, env = "LABELAUDIT_ALPHA", default_value_t = 0.05)]
    alpha: f64,
    /// Fix the CDI dimensions instead of selecting them by regression.
    #[arg(long, env = "LABELAUDIT_DIMENSIONS", value_delimiter = ',')]
    dimensions: Option<Vec<String>>,
}

impl CultureArgs {
    fn options(&self) -> CultureOptions {
        CultureOptions { alpha: self.alpha, dimensions: self.dimensions.clone() }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ClusterArg {
    Pair,
    Respondent,
}

#[derive(Args, Debug, Clone)]
struct MatchArgs {
    /// Caliper in standard deviations of the propensity logit.
    #[arg(long, env = "LABELAUDIT_CALIPER", default_value_t = 0.2)]
    caliper: f64,
    /// Minimum English play frequency (0..5) for both arms.
    #[arg(long, env = "LABELAUDIT_ELIGIBILITY", default_value_t = 4)]
    eligibility: u8,
    #[arg(long, env = "LABELAUDIT_CLUSTER_BY", value_enum, default_value = "pair")]
    cluster_by: ClusterArg,
}

impl MatchArgs {
    fn options(&self) -> MatchOptions {
        MatchOptions {
            caliper: self.caliper,
            eligibility: self.eligibility,
            cluster_by: match self.cluster_by {
                ClusterArg::Pair => ClusterBy::Pair,
                ClusterArg::Respondent => ClusterBy::Respondent,
            },
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SamplingArg {
    Random,
    RepresentativeStratified,
    OversampleToMatch,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[arg(long, env = "LABELAUDIT_TEST_FRACTION", default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, env = "LABELAUDIT_HOMOGENEOUS_COUNTRY", default_value = "US")]
    homogeneous_country: String,
    #[arg(long, env = "LABELAUDIT_SAMPLING", value_enum, default_value = "oversample-to-match")]
    sampling: SamplingArg,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            test_fraction: self.test_fraction,
            homogeneous_country: self.homogeneous_country.clone(),
            sampling: match self.sampling {
                SamplingArg::Random => Sampling::Random,
                SamplingArg::RepresentativeStratified => Sampling::RepresentativeStratified,
                SamplingArg::OversampleToMatch => Sampling::OversampleToMatch,
            },
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Preset {
    /// 14 countries, 10 items x 28 labels, about 5,400 respondents.
    Paper,
    /// 6 countries, 2 items x 10 labels.
    Smoke,
    /// Demographically skewed sample for poststratification checks.
    Skew,
    /// One country with age-confounded English-surveyed bilinguals.
    Confounded,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check input files and report rejected rows and coverage.
    Validate {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Fit the hierarchical model per (item, label) and poststratify.
    Mrp {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        mrp: MrpArgs,
    },
    /// Classify pairs as consistent or inconsistent from estimates.
    Classify {
        /// estimates.csv written by `mrp`.
        #[arg(long, env = "LABELAUDIT_ESTIMATES")]
        estimates: PathBuf,
        #[command(flatten)]
        classify: ClassifyArgs,
    },
    /// Cultural distance, similarity trend and label-rank analysis.
    Culture {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, env = "LABELAUDIT_ESTIMATES")]
        estimates: PathBuf,
        #[arg(long, env = "LABELAUDIT_VERDICTS")]
        verdicts: PathBuf,
        #[command(flatten)]
        culture: CultureArgs,
    },
    /// Matched estimates of survey-language effects.
    Match {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, env = "LABELAUDIT_VERDICTS")]
        verdicts: Option<PathBuf>,
        #[command(flatten)]
        matching: MatchArgs,
    },
    /// Compare homogeneous and heterogeneous training pools.
    Evaluate {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, env = "LABELAUDIT_VERDICTS")]
        verdicts: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate a synthetic dataset with a ground-truth manifest.
    Synth {
        #[arg(long, value_enum, default_value = "smoke")]
        preset: Preset,
        /// Add held-out countries (e.g. IN,SA) absent from the analysis set.
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        #[arg(long, default_value_t = 360)]
        held_out_respondents: usize,
        /// Override the preset's respondent count.
        #[arg(long)]
        respondents: Option<usize>,
    },
    /// Run mrp, classify, culture, match and evaluate in sequence.
    Audit {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        mrp: MrpArgs,
        #[command(flatten)]
        classify: ClassifyArgs,
        #[command(flatten)]
        culture: CultureArgs,
        #[command(flatten)]
        matching: MatchArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Mrp { .. } => "mrp",
            Command::Classify { .. } => "classify",
            Command::Culture { .. } => "culture",
            Command::Match { .. } => "match",
            Command::Evaluate { .. } => "evaluate",
            Command::Synth { .. } => "synth",
            Command::Audit { .. } => "audit",
        }
    }
}

/// Exit status for a failed run: 2 for bad input, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ValidationError>() {
            return 2;
        }
        if cause.is::<DatasetError>() || matches!(cause.downcast_ref::<CoreError>(), Some(CoreError::Dataset(_))) {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out = OutDir::create(&cli.out)?;
    let mut prov = Provenance::new(cli.command.name(), seed);
    match &cli.command {
        Command::Validate { input } => {
            let (body, ok) = validate_report(&input.paths(), &mut prov)?;
            out.json("validation.json", &prov, &body)?;
            if !ok {
                return Err(invalid(format!("validation failed; see {}", out.path("validation.json").display())));
            }
        }
        Command::Mrp { input, mrp } => {
            let inputs = load_inputs(&input.paths(), &mut prov)?;
            let (_, body) = mrp_stage(&inputs, &mrp.options(), seed, &out, &prov)?;
            out.json("mrp.json", &prov, &body)?;
        }
        Command::Classify { estimates, classify } => {
            let est = read_estimates(estimates, &mut prov)?;
            let (_, body) = classify_stage(&est, &classify.thresholds(), &out, &prov)?;
            out.json("classify.json", &prov, &body)?;
        }
        Command::Culture { input, estimates, verdicts, culture } => {
            let inputs = load_inputs(&input.paths(), &mut prov)?;
            let est = read_estimates(estimates, &mut prov)?;
            let v = read_verdicts(verdicts, &mut prov)?;
            let body = culture_stage(&inputs.records, &inputs.hofstede, &est, &v, &culture.options(), &out, &prov)?;
            out.json("culture.json", &prov, &body)?;
        }
        Command::Match { input, verdicts, matching } => {
            let inputs = load_inputs(&input.paths(), &mut prov)?;
            let v = match verdicts {
                Some(p) => read_verdicts(p, &mut prov)?,
                None => Vec::new(),
            };
            let body = match_stage(&inputs.records, &v, &matching.options(), seed, &out, &prov)?;
            out.json("match.json", &prov, &body)?;
        }
        Command::Evaluate { input, verdicts, eval } => {
            let inputs = load_inputs(&input.paths(), &mut prov)?;
            let v = read_verdicts(verdicts, &mut prov)?;
            let body = evaluate_stage(&inputs.records, &inputs.held_out, &inputs.strata, &v, &eval.options(), seed, &out, &prov)?;
            out.json("evaluate.json", &prov, &body)?;
        }
        Command::Synth { preset, held_out, held_out_respondents, respondents } => {
            let mut config = match preset {
                Preset::Paper => SynthConfig::paper_scale(seed),
                Preset::Smoke => SynthConfig::smoke(seed),
                Preset::Skew => SynthConfig::skew_demo(seed),
                Preset::Confounded => SynthConfig::confounded_language(seed, 4000, 0.2),
            };
            if let Some(n) = respondents {
                config = config.with_respondents(*n);
            }
            if !held_out.is_empty() {
                let codes: Vec<&str> = held_out.iter().map(String::as_str).collect();
                config = config.with_held_out(&codes, *held_out_respondents);
            }
            let generated = synth::generate(&config).map_err(|e| invalid(e.to_string()))?;
            prov.add_note("preset", &format!("{preset:?}").to_lowercase());
            out.csv("annotations.csv", &prov, |w| dataset::write_annotations(w, &generated.records))?;
            out.csv("strata.csv", &prov, |w| dataset::write_strata(w, &generated.strata))?;
            out.csv("hofstede.csv", &prov, |w| dataset::write_hofstede(w, &generated.hofstede))?;
            out.json("manifest.json", &prov, &serde_json::to_value(&generated.manifest)?)?;
            out.json("config.json", &prov, &serde_json::to_value(&config)?)?;
        }
        Command::Audit { input, mrp, classify, culture, matching, eval } => {
            let inputs = load_inputs(&input.paths(), &mut prov)?;
            let (estimates, mrp_body) = mrp_stage(&inputs, &mrp.options(), seed, &out, &prov)?;
            let (verdicts, classify_body) = classify_stage(&estimates, &classify.thresholds(), &out, &prov)?;
            let culture_body = culture_stage(&inputs.records, &inputs.hofstede, &estimates, &verdicts, &culture.options(), &out, &prov)?;
            let match_body = match_stage(&inputs.records, &verdicts, &matching.options(), seed, &out, &prov)?;
            let eval_body =
                evaluate_stage(&inputs.records, &inputs.held_out, &inputs.strata, &verdicts, &eval.options(), seed, &out, &prov)?;
            let body: Value = json!({
                "input": {
                    "records": inputs.records.len(),
                    "held_out_records": inputs.held_out.len(),
                    "rejected_rows": inputs.rejected_rows,
                    "filter": inputs.filter,
                },
                "mrp": mrp_body,
                "classify": classify_body,
                "culture": culture_body,
                "match": match_body,
                "evaluate": eval_body,
            });
            out.json("summary.json", &prov, &body)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let jobs = cli.jobs;
    match par::with_jobs(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
