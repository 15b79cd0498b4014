//! Command-line front end: simulate bandit data-collection runs, estimate
//! policy values from saved logs, run replication experiments and dataset
//! suites from config files, and self-check the estimator math against
//! brute-force oracles.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures (unreadable data, estimation errors such as missing
//! overlap, failed self-checks).

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use banditope::agents::collect;
use banditope::diagnostics::{
    brute_force_score_moments, closed_form_a_term, closed_form_conditional_mean,
    closed_form_conditional_variance, closed_form_covariance, power_moment, random_simplex,
    FrozenSetup,
};
use banditope::estimators::{run_estimator, EstimatorKind, TargetSpec, WeightFamily};
use banditope::harness::{
    run_dataset_suite, run_experiment, with_jobs, write_report_csv, write_suite_csv,
    ExperimentConfig, HarnessError,
};
use banditope::logfile::{load_log, save_log};
use banditope::outcome_models::ModelSpec;
use banditope::types::{ContextSpace, PolicyTable};
use rand::Rng as _;

#[derive(Parser)]
#[command(
    name = "banditope",
    version,
    about = "Off-policy evaluation on adaptively collected bandit data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one data-collection run and save the log to a file.
    Collect(CollectArgs),
    /// Estimate target-policy values from a saved log.
    Estimate(EstimateArgs),
    /// Run a replication experiment described by a config file.
    Experiment(ExperimentArgs),
    /// Run the experiment template over classification CSV datasets.
    Suite(SuiteArgs),
    /// Self-check estimator identities against brute-force oracles.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CollectArgs {
    /// Experiment config file (env/agent/horizon keys are used).
    #[arg(long)]
    config: PathBuf,
    /// RNG seed for this run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Log file produced by `collect`.
    #[arg(long)]
    log: PathBuf,
    /// Estimator to run (repeatable): dm, ipw, dr, nc_stablevar, nc_minvar,
    /// ctx_stablevar, ctx_minvar.
    #[arg(long = "estimator", value_parser = parse_estimator_kind, default_values = ["dr"])]
    estimators: Vec<EstimatorKind>,
    /// Target policy: "uniform", "fixed:<arm>", or "region:a,b,c,d".
    #[arg(long)]
    policy: String,
    /// Baseline policy; when given, the target is the contrast
    /// (policy value minus baseline value).
    #[arg(long)]
    baseline: Option<String>,
    /// Confidence level for the interval.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Outcome model for the direct method: tabular or ridge
    /// (default: tabular on discrete context spaces, ridge otherwise).
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    ridge_lambda: f64,
    /// Reference value for the studentized statistic.
    #[arg(long)]
    reference: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct SuiteArgs {
    /// Experiment template config; its env settings are replaced per dataset.
    #[arg(long)]
    config: PathBuf,
    /// Dataset CSV files or directories of them (directories expand to their
    /// *.csv entries in sorted order).
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Random frozen setups for the moment-identity checks.
    #[arg(long, default_value_t = 100)]
    setups: usize,
    /// Random simplex pairs for the power-moment chain check.
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure::Runtime(message.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Collect(args) => cmd_collect(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn parse_estimator_kind(s: &str) -> Result<EstimatorKind, String> {
    s.parse()
}

/// Config errors are the caller's to fix: exit 1.
fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    ExperimentConfig::from_toml_file(path).map_err(|e| usage(e.to_string()))
}

fn config_side(e: HarnessError) -> Failure {
    usage(e.to_string())
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    match out {
        Some(path) => File::create(path)
            .map(|f| Box::new(f) as Box<dyn Write>)
            .map_err(|e| runtime(format!("cannot create {}: {e}", path.display()))),
        None => Ok(Box::new(std::io::stdout())),
    }
}

fn parse_policy(spec: &str, k: usize) -> Result<PolicyTable, Failure> {
    let bad_spec = |detail: String| {
        usage(format!(
            "bad policy spec {spec:?}: {detail} (expected \"uniform\", \"fixed:<arm>\", or \"region:a,b,c,d\")"
        ))
    };
    if spec == "uniform" {
        return PolicyTable::uniform(k).map_err(|e| bad_spec(e.to_string()));
    }
    if let Some(arm) = spec.strip_prefix("fixed:") {
        let arm: usize = arm.parse().map_err(|_| bad_spec(format!("bad arm {arm:?}")))?;
        return PolicyTable::fixed_arm(k, arm).map_err(|e| bad_spec(e.to_string()));
    }
    if let Some(arms) = spec.strip_prefix("region:") {
        let parsed: Result<Vec<usize>, _> = arms.split(',').map(str::parse).collect();
        let parsed = parsed.map_err(|_| bad_spec(format!("bad arm list {arms:?}")))?;
        let arms: [usize; 4] = parsed
            .try_into()
            .map_err(|_| bad_spec("a region policy takes exactly 4 arms".into()))?;
        return PolicyTable::region(k, arms).map_err(|e| bad_spec(e.to_string()));
    }
    Err(bad_spec("unknown form".into()))
}

// ── collect ─────────────────────────────────────────────────────────────────

fn cmd_collect(args: CollectArgs) -> Result<(), Failure> {
    let config = load_config(&args.config)?;
    let env = config.build_env().map_err(config_side)?;
    let agent = config.agent_config();
    let model = config.model_spec(&env).map_err(config_side)?;
    let floor = config.floor_schedule().map_err(config_side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let log = collect(&env, &agent, model, config.t, config.batch_size, &floor, &mut rng)
        .map_err(|e| runtime(e.to_string()))?;
    save_log(&log, &args.out).map_err(|e| runtime(e.to_string()))?;
    Ok(())
}

// ── estimate ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EstimateRecord {
    estimator: String,
    phi: Option<String>,
    family: String,
    policy: String,
    point: f64,
    variance: f64,
    ci_lo: f64,
    ci_hi: f64,
    tstat: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), Failure> {
    if !args.log.exists() {
        return Err(usage(format!("log file not found: {}", args.log.display())));
    }
    let log = load_log(&args.log).map_err(|e| runtime(e.to_string()))?;
    let policy = parse_policy(&args.policy, log.k)?;
    let (target, policy_label) = match &args.baseline {
        Some(baseline) => (
            TargetSpec::Contrast(policy, parse_policy(baseline, log.k)?),
            format!("{} - {}", args.policy, baseline),
        ),
        None => (TargetSpec::Policy(policy), args.policy.clone()),
    };
    let model = match args.model.as_deref() {
        Some("tabular") => ModelSpec::Tabular,
        Some("ridge") => ModelSpec::Ridge { lambda: args.ridge_lambda },
        Some(other) => return Err(usage(format!("unknown model {other:?}"))),
        None => match log.space {
            ContextSpace::Discrete { .. } => ModelSpec::Tabular,
            ContextSpace::Continuous { .. } => ModelSpec::Ridge { lambda: args.ridge_lambda },
        },
    };

    let mut records = Vec::with_capacity(args.estimators.len());
    for &kind in &args.estimators {
        let est = run_estimator(kind, &log, target.as_target(), model)
            .map_err(|e| runtime(format!("{kind}: {e}")))?;
        let (ci_lo, ci_hi) =
            est.confidence_interval(args.level).map_err(|e| usage(e.to_string()))?;
        let mut notes = Vec::new();
        if est.flags.variance_unreliable {
            notes.push("direct method: the variance estimate is not calibrated".to_owned());
        }
        if est.flags.contextual_on_continuous {
            notes.push(
                "contextual weights on a continuous context space: the interval has no \
                 theoretical calibration guarantee"
                    .to_owned(),
            );
        }
        records.push(EstimateRecord {
            estimator: kind.name().to_owned(),
            phi: match est.scheme.family {
                WeightFamily::Uniform => None,
                _ => Some(format!("{:?}", est.scheme.phi).to_lowercase()),
            },
            family: format!("{:?}", est.scheme.family).to_lowercase(),
            policy: policy_label.clone(),
            point: est.point,
            variance: est.variance,
            ci_lo,
            ci_hi,
            tstat: args.reference.map(|r| est.t_statistic(r)),
            notes,
        });
    }

    let mut out = open_out(&args.out)?;
    match args.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &records)
                .map_err(|e| runtime(e.to_string()))?;
            writeln!(out).map_err(|e| runtime(e.to_string()))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "estimator", "phi", "family", "policy", "point", "variance", "ci_lo", "ci_hi",
                "tstat", "notes",
            ])
            .map_err(|e| runtime(e.to_string()))?;
            for r in &records {
                w.write_record([
                    r.estimator.clone(),
                    r.phi.clone().unwrap_or_default(),
                    r.family.clone(),
                    r.policy.clone(),
                    r.point.to_string(),
                    r.variance.to_string(),
                    r.ci_lo.to_string(),
                    r.ci_hi.to_string(),
                    r.tstat.map(|t| t.to_string()).unwrap_or_default(),
                    r.notes.join("; "),
                ])
                .map_err(|e| runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| runtime(e.to_string()))?;
        }
    }
    Ok(())
}

// ── experiment ──────────────────────────────────────────────────────────────

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    let report = with_jobs(args.jobs, || run_experiment(&config))
        .map_err(|e| runtime(e.to_string()))?;
    let mut out = open_out(&args.out)?;
    match args.format {
        Format::Csv => write_report_csv(&report, &mut out).map_err(|e| runtime(e.to_string())),
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &report).map_err(|e| runtime(e.to_string()))?;
            writeln!(out).map_err(|e| runtime(e.to_string()))
        }
    }
}

// ── suite ───────────────────────────────────────────────────────────────────

fn expand_datasets(data: &[PathBuf]) -> Result<Vec<String>, Failure> {
    let mut paths = Vec::new();
    for entry in data {
        if entry.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(entry)
                .map_err(|e| usage(format!("cannot read {}: {e}", entry.display())))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(usage(format!("no .csv files in {}", entry.display())));
            }
            paths.extend(found.into_iter().map(|p| p.to_string_lossy().into_owned()));
        } else {
            paths.push(entry.to_string_lossy().into_owned());
        }
    }
    Ok(paths)
}

fn cmd_suite(args: SuiteArgs) -> Result<(), Failure> {
    let mut template = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        template.master_seed = seed;
    }
    let paths = expand_datasets(&args.data)?;
    let report = with_jobs(args.jobs, || run_dataset_suite(&paths, &template))
        .map_err(|e| runtime(e.to_string()))?;
    let mut out = open_out(&args.out)?;
    match args.format {
        Format::Csv => write_suite_csv(&report, &mut out).map_err(|e| runtime(e.to_string())),
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &report).map_err(|e| runtime(e.to_string()))?;
            writeln!(out).map_err(|e| runtime(e.to_string()))
        }
    }
}

// ── diagnose ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DiagnoseReport {
    setups_checked: usize,
    max_mean_error: f64,
    max_variance_error: f64,
    max_covariance_error: f64,
    min_a_term: f64,
    pairs_checked: usize,
    power_chain_violations: usize,
    ok: bool,
}

/// Re-derives the estimator's moment identities by brute-force enumeration
/// on random frozen setups, and checks the power-moment chain that bounds
/// the variance proxy. Any violation is a runtime failure (exit 2).
fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut report = DiagnoseReport {
        setups_checked: args.setups,
        max_mean_error: 0.0,
        max_variance_error: 0.0,
        max_covariance_error: 0.0,
        min_a_term: f64::INFINITY,
        pairs_checked: args.pairs,
        power_chain_violations: 0,
        ok: true,
    };

    for _ in 0..args.setups {
        let num_contexts = rng.gen_range(2..=3);
        let k = rng.gen_range(2..=3);
        let setup = FrozenSetup::random(num_contexts, k, &mut rng);
        let rows = (0..num_contexts).map(|_| random_simplex(k, &mut rng)).collect();
        let policy = PolicyTable::from_table(rows).expect("simplex rows");
        let moments =
            brute_force_score_moments(&setup, &policy).map_err(|e| runtime(e.to_string()))?;
        for x in 0..num_contexts {
            let mean_err = (moments.mean[x] - closed_form_conditional_mean(&setup, &policy, x)).abs();
            let var_err =
                (moments.variance[x] - closed_form_conditional_variance(&setup, &policy, x)).abs();
            report.max_mean_error = report.max_mean_error.max(mean_err);
            report.max_variance_error = report.max_variance_error.max(var_err);
            report.min_a_term = report.min_a_term.min(closed_form_a_term(&setup, &policy, x));
            for w1 in 0..k {
                for w2 in 0..k {
                    let cov_err = (moments.covariance[x][w1][w2]
                        - closed_form_covariance(&setup, x, w1, w2))
                    .abs();
                    report.max_covariance_error = report.max_covariance_error.max(cov_err);
                }
            }
        }
    }

    for _ in 0..args.pairs {
        let k = rng.gen_range(2..=5);
        let pi = random_simplex(k, &mut rng);
        let e = random_simplex(k, &mut rng);
        let s1 = power_moment(&pi, &e, 1);
        let s2 = power_moment(&pi, &e, 2);
        let s3 = power_moment(&pi, &e, 3);
        if !(1.0 <= s1 && s1 <= s2 && s2 <= s3) {
            report.power_chain_violations += 1;
        }
    }

    report.ok = report.max_mean_error <= 1e-12
        && report.max_variance_error <= 1e-12
        && report.max_covariance_error <= 1e-12
        && report.min_a_term >= 0.0
        && report.power_chain_violations == 0;

    let mut out = open_out(&args.out)?;
    match args.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &report).map_err(|e| runtime(e.to_string()))?;
            writeln!(out).map_err(|e| runtime(e.to_string()))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "setups_checked",
                "max_mean_error",
                "max_variance_error",
                "max_covariance_error",
                "min_a_term",
                "pairs_checked",
                "power_chain_violations",
                "ok",
            ])
            .map_err(|e| runtime(e.to_string()))?;
            w.write_record([
                report.setups_checked.to_string(),
                report.max_mean_error.to_string(),
                report.max_variance_error.to_string(),
                report.max_covariance_error.to_string(),
                report.min_a_term.to_string(),
                report.pairs_checked.to_string(),
                report.power_chain_violations.to_string(),
                report.ok.to_string(),
            ])
            .map_err(|e| runtime(e.to_string()))?;
            w.flush().map_err(|e| runtime(e.to_string()))?;
        }
    }
    if !report.ok {
        return Err(runtime("diagnostic self-checks failed"));
    }
    Ok(())
}
