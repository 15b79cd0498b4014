//! Replication harness: run many collect → estimate cycles from a single
//! declarative config, aggregate the results against the analytic truth,
//! and write plot-ready CSV or JSON reports.
//!
//! Determinism contract: every replication draws from its own RNG stream
//! keyed by the replication index, results are reduced in replication order,
//! and nothing depends on thread scheduling — the same config and master
//! seed produce byte-identical reports at any parallelism level.

use std::io;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{collect, AgentConfig, AgentKind, FloorSchedule};
use crate::diagnostics::target_truth;
use crate::envs::{ClassificationEnv, Env, EnvError, SyntheticEnv};
use crate::estimators::{run_estimator, EstimatorKind, TargetSpec};
use crate::outcome_models::ModelSpec;
use crate::types::{BanditLog, ContextSpace, PolicyTable};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn bad(message: impl Into<String>) -> HarnessError {
    HarnessError::BadConfig(message.into())
}

// ── configuration ───────────────────────────────────────────────────────────

/// One experiment, as read from a flat TOML file. Unknown keys are errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::name")]
    pub name: String,
    /// "example1", "region_signal", "region_nosignal", or "classification".
    pub env: String,
    /// CSV path; required when env = "classification".
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "defaults::label_column")]
    pub label_column: String,
    #[serde(default = "defaults::yes")]
    pub standardize: bool,
    /// Reward noise standard deviation override.
    #[serde(default)]
    pub noise_sd: Option<f64>,
    /// "tabular" or "linear".
    #[serde(default = "defaults::agent")]
    pub agent: String,
    #[serde(default = "defaults::num_draws")]
    pub num_draws: usize,
    #[serde(default = "defaults::one")]
    pub lin_lambda: f64,
    #[serde(default = "defaults::one")]
    pub lin_sigma2: f64,
    /// "tabular" or "ridge"; defaults to tabular on discrete context spaces
    /// and ridge otherwise.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "defaults::one")]
    pub ridge_lambda: f64,
    pub t: usize,
    pub batch_size: usize,
    /// "paper_faithful", "assumption_faithful", "classification", or
    /// "custom" (with floor_coefficient/floor_exponent).
    #[serde(default = "defaults::floor")]
    pub floor: String,
    #[serde(default)]
    pub floor_coefficient: Option<f64>,
    #[serde(default)]
    pub floor_exponent: Option<f64>,
    #[serde(default = "defaults::estimators")]
    pub estimators: Vec<EstimatorKind>,
    /// "contrast", "best_contextual", "best_fixed", "uniform", or
    /// "fixed:<arm>".
    #[serde(default = "defaults::target")]
    pub target: String,
    #[serde(default = "defaults::replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "defaults::level")]
    pub level: f64,
    /// Sample sizes at which every estimator is evaluated on the log prefix;
    /// defaults to just t.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

mod defaults {
    use super::EstimatorKind;

    pub fn name() -> String {
        "experiment".into()
    }
    pub fn label_column() -> String {
        "label".into()
    }
    pub fn yes() -> bool {
        true
    }
    pub fn agent() -> String {
        "tabular".into()
    }
    pub fn num_draws() -> usize {
        2000
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn floor() -> String {
        "paper_faithful".into()
    }
    pub fn estimators() -> Vec<EstimatorKind> {
        EstimatorKind::ALL.to_vec()
    }
    pub fn target() -> String {
        "contrast".into()
    }
    pub fn replications() -> usize {
        100
    }
    pub fn level() -> f64 {
        0.95
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let mut config: ExperimentConfig = toml::from_str(text)?;
        if config.checkpoints.is_empty() {
            config.checkpoints = vec![config.t];
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.t == 0 || self.batch_size == 0 {
            return Err(bad("t and batch_size must be positive"));
        }
        if self.replications == 0 {
            return Err(bad("replications must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(bad(format!("level must be inside (0, 1), got {}", self.level)));
        }
        if self.estimators.is_empty() {
            return Err(bad("estimators must not be empty"));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("checkpoints must be strictly increasing"));
        }
        if self.checkpoints.first().is_some_and(|&c| c == 0) {
            return Err(bad("checkpoints must be at least 1"));
        }
        if self.checkpoints.last().is_some_and(|&c| c > self.t) {
            return Err(bad("checkpoints cannot exceed t"));
        }
        if self.env == "classification" && self.dataset.is_none() {
            return Err(bad("env = \"classification\" needs a dataset path"));
        }
        self.floor_schedule()?;
        // Surface unknown names now rather than at run time.
        match self.env.as_str() {
            "example1" | "region_signal" | "region_nosignal" | "classification" => {}
            other => return Err(bad(format!("unknown env {other:?}"))),
        }
        match self.agent.as_str() {
            "tabular" | "linear" => {}
            other => return Err(bad(format!("unknown agent {other:?}"))),
        }
        if let Some(model) = &self.model {
            if model != "tabular" && model != "ridge" {
                return Err(bad(format!("unknown model {model:?}")));
            }
        }
        Ok(())
    }

    pub fn build_env(&self) -> Result<Env, HarnessError> {
        let env = match self.env.as_str() {
            "example1" => Env::Synthetic(SyntheticEnv::example1()),
            "region_signal" => Env::Synthetic(SyntheticEnv::region_signal()),
            "region_nosignal" => Env::Synthetic(SyntheticEnv::region_no_signal()),
            "classification" => {
                let path = self.dataset.as_ref().ok_or_else(|| bad("missing dataset"))?;
                let env = ClassificationEnv::from_csv(
                    Path::new(path),
                    &self.label_column,
                    self.standardize,
                    self.noise_sd.unwrap_or(0.1),
                )?;
                return Ok(Env::Classification(env));
            }
            other => return Err(bad(format!("unknown env {other:?}"))),
        };
        Ok(match (env, self.noise_sd) {
            (Env::Synthetic(s), Some(sd)) => Env::Synthetic(s.with_noise(sd)),
            (env, _) => env,
        })
    }

    pub fn agent_config(&self) -> AgentConfig {
        match self.agent.as_str() {
            "linear" => AgentConfig {
                kind: AgentKind::LinTs { lambda: self.lin_lambda, sigma2: self.lin_sigma2 },
                num_draws: self.num_draws,
            },
            _ => AgentConfig::tabular(self.num_draws),
        }
    }

    pub fn model_spec(&self, env: &Env) -> Result<ModelSpec, HarnessError> {
        match self.model.as_deref() {
            Some("tabular") => match env.space() {
                ContextSpace::Discrete { .. } => Ok(ModelSpec::Tabular),
                ContextSpace::Continuous { .. } => {
                    Err(bad("a tabular model needs a discrete context space"))
                }
            },
            Some("ridge") => Ok(ModelSpec::Ridge { lambda: self.ridge_lambda }),
            Some(other) => Err(bad(format!("unknown model {other:?}"))),
            None => Ok(match env.space() {
                ContextSpace::Discrete { .. } => ModelSpec::Tabular,
                ContextSpace::Continuous { .. } => ModelSpec::Ridge { lambda: self.ridge_lambda },
            }),
        }
    }

    pub fn floor_schedule(&self) -> Result<FloorSchedule, HarnessError> {
        match self.floor.as_str() {
            "paper_faithful" => Ok(FloorSchedule::paper_faithful()),
            "assumption_faithful" => Ok(FloorSchedule::assumption_faithful()),
            "classification" => Ok(FloorSchedule::classification(self.guess_k())),
            "custom" => {
                let (c, a) = self
                    .floor_coefficient
                    .zip(self.floor_exponent)
                    .ok_or_else(|| bad("custom floor needs floor_coefficient and floor_exponent"))?;
                FloorSchedule::new(c, a).map_err(|e| bad(e.to_string()))
            }
            other => Err(bad(format!("unknown floor schedule {other:?}"))),
        }
    }

    /// Arm count for the classification floor preset before the dataset is
    /// loaded; refined in [`run_experiment`] once the env exists.
    fn guess_k(&self) -> usize {
        2
    }

    pub fn target_spec(&self, env: &Env) -> Result<TargetSpec, HarnessError> {
        let k = env.k();
        match self.target.as_str() {
            "contrast" => Ok(TargetSpec::Contrast(
                env.best_contextual_policy(),
                env.best_fixed_arm_policy(),
            )),
            "best_contextual" => Ok(TargetSpec::Policy(env.best_contextual_policy())),
            "best_fixed" => Ok(TargetSpec::Policy(env.best_fixed_arm_policy())),
            "uniform" => {
                PolicyTable::uniform(k).map(TargetSpec::Policy).map_err(|e| bad(e.to_string()))
            }
            other => match other.strip_prefix("fixed:") {
                Some(arm) => {
                    let arm: usize =
                        arm.parse().map_err(|_| bad(format!("bad arm in target {other:?}")))?;
                    PolicyTable::fixed_arm(k, arm).map(TargetSpec::Policy).map_err(|e| bad(e.to_string()))
                }
                None => Err(bad(format!("unknown target {other:?}"))),
            },
        }
    }
}

// ── reports ─────────────────────────────────────────────────────────────────

/// One estimate from one replication at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub rep: usize,
    pub checkpoint: usize,
    pub estimator: EstimatorKind,
    pub point: f64,
    pub variance: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Studentized statistic against the analytic truth, when one exists.
    pub tstat: Option<f64>,
}

/// Aggregated metrics for one (estimator, checkpoint) cell. `bias`, `rmse`,
/// and `coverage` need an analytic truth; `se` is the population standard
/// deviation of the points around their own mean, so that
/// rmse² = bias² + se² holds as an identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub estimator: EstimatorKind,
    pub checkpoint: usize,
    pub replications_used: usize,
    pub mean_point: f64,
    pub se: f64,
    pub mean_radius: f64,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub name: String,
    pub truth: Option<f64>,
    pub level: f64,
    pub rows: Vec<RepRow>,
    pub aggregates: Vec<AggRow>,
    pub failures: Vec<RepFailure>,
}

/// Recomputes the aggregate table from per-replication rows: group by
/// (checkpoint, estimator) in first-appearance order, reduce in row order.
pub fn aggregate_rows(rows: &[RepRow], truth: Option<f64>) -> Vec<AggRow> {
    let mut order: Vec<(usize, EstimatorKind)> = Vec::new();
    for row in rows {
        if !order.contains(&(row.checkpoint, row.estimator)) {
            order.push((row.checkpoint, row.estimator));
        }
    }
    order
        .into_iter()
        .map(|(checkpoint, estimator)| {
            let cell: Vec<&RepRow> = rows
                .iter()
                .filter(|r| r.checkpoint == checkpoint && r.estimator == estimator)
                .collect();
            let n = cell.len() as f64;
            let mean_point = cell.iter().map(|r| r.point).sum::<f64>() / n;
            let se = (cell.iter().map(|r| (r.point - mean_point) * (r.point - mean_point)).sum::<f64>()
                / n)
                .sqrt();
            let mean_radius =
                cell.iter().map(|r| (r.ci_hi - r.ci_lo) / 2.0).sum::<f64>() / n;
            let (bias, rmse, coverage) = match truth {
                Some(truth) => {
                    let bias = mean_point - truth;
                    let covered = cell
                        .iter()
                        .filter(|r| r.ci_lo <= truth && truth <= r.ci_hi)
                        .count();
                    (
                        Some(bias),
                        Some((bias * bias + se * se).sqrt()),
                        Some(covered as f64 / n),
                    )
                }
                None => (None, None, None),
            };
            AggRow {
                estimator,
                checkpoint,
                replications_used: cell.len(),
                mean_point,
                se,
                mean_radius,
                bias,
                rmse,
                coverage,
            }
        })
        .collect()
}

// ── running experiments ─────────────────────────────────────────────────────

/// Runs `f` on a dedicated thread pool of the given width; `None` uses the
/// global pool. Results do not depend on the width.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool construction only fails on exotic platforms")
            .install(f),
    }
}

/// Runs the configured experiment: per replication, collect one log to the
/// full horizon, then evaluate every estimator on every checkpoint prefix.
/// Per-replication failures are recorded in the report, not fatal.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReplicationReport, HarnessError> {
    let env = config.build_env()?;
    let agent = config.agent_config();
    let model = config.model_spec(&env)?;
    let floor = match config.floor.as_str() {
        // The preset needs the real arm count, available once the env is built.
        "classification" => FloorSchedule::classification(env.k()),
        _ => config.floor_schedule()?,
    };
    let target = config.target_spec(&env)?;
    let truth = target_truth(&env, &target).ok();

    let outcomes: Vec<Result<Vec<RepRow>, RepFailure>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let fail = |error: String| RepFailure { rep, error };
            let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
            rng.set_stream(rep as u64 + 1);
            let log = collect(
                &env,
                &agent,
                model,
                config.t,
                config.batch_size,
                &floor,
                &mut rng,
            )
            .map_err(|e| fail(e.to_string()))?;
            let mut rows = Vec::with_capacity(config.checkpoints.len() * config.estimators.len());
            for &checkpoint in &config.checkpoints {
                let prefix: BanditLog;
                let at = if checkpoint == config.t {
                    &log
                } else {
                    prefix = log.prefix(checkpoint);
                    &prefix
                };
                for &estimator in &config.estimators {
                    let est = run_estimator(estimator, at, target.as_target(), model)
                        .map_err(|e| fail(format!("{estimator} at {checkpoint}: {e}")))?;
                    let (ci_lo, ci_hi) = est
                        .confidence_interval(config.level)
                        .map_err(|e| fail(e.to_string()))?;
                    rows.push(RepRow {
                        rep,
                        checkpoint,
                        estimator,
                        point: est.point,
                        variance: est.variance,
                        ci_lo,
                        ci_hi,
                        tstat: truth.map(|t| est.t_statistic(t)),
                    });
                }
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(mut r) => rows.append(&mut r),
            Err(f) => failures.push(f),
        }
    }
    let aggregates = aggregate_rows(&rows, truth);
    Ok(ReplicationReport {
        name: config.name.clone(),
        truth,
        level: config.level,
        rows,
        aggregates,
        failures,
    })
}

// ── dataset suite ───────────────────────────────────────────────────────────

/// Per-(dataset, estimator) normalized metrics: bias and SE scaled by the
/// plain doubly robust estimator's RMSE on the same dataset, plus RMSE
/// ratios against DR and against the non-contextual counterpart (for the
/// contextual schemes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRow {
    pub dataset: String,
    pub truth: f64,
    pub estimator: EstimatorKind,
    pub bias_over_rmse_dr: f64,
    pub se_over_rmse_dr: f64,
    pub rmse_over_rmse_dr: f64,
    pub rmse_over_noncontextual: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub dataset: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub failures: Vec<SuiteFailure>,
}

/// Runs the template experiment on each dataset and normalizes the final
/// checkpoint's aggregates. Datasets that fail to load or run are recorded
/// and skipped.
pub fn run_dataset_suite(
    paths: &[String],
    template: &ExperimentConfig,
) -> Result<SuiteReport, HarnessError> {
    if !template.estimators.contains(&EstimatorKind::Dr) {
        return Err(bad("the dataset suite needs the dr estimator as its normalizer"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        let name = Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.clone());
        let mut config = template.clone();
        config.env = "classification".into();
        config.dataset = Some(path.clone());
        config.name = name.clone();
        let outcome = (|| -> Result<Vec<SuiteRow>, String> {
            let report = run_experiment(&config).map_err(|e| e.to_string())?;
            let truth = report.truth.ok_or("dataset target has no analytic truth")?;
            let last = *config.checkpoints.last().expect("validated non-empty");
            let at_last: Vec<&AggRow> =
                report.aggregates.iter().filter(|a| a.checkpoint == last).collect();
            let rmse_of = |kind: EstimatorKind| -> Option<f64> {
                at_last.iter().find(|a| a.estimator == kind).and_then(|a| a.rmse)
            };
            let rmse_dr = rmse_of(EstimatorKind::Dr)
                .filter(|r| *r > 0.0)
                .ok_or("dr produced no usable rmse")?;
            at_last
                .iter()
                .map(|agg| {
                    let rmse = agg.rmse.ok_or("missing rmse")?;
                    let counterpart = match agg.estimator {
                        EstimatorKind::Contextual(phi) => {
                            rmse_of(EstimatorKind::NonContextual(phi)).map(|nc| rmse / nc)
                        }
                        _ => None,
                    };
                    Ok(SuiteRow {
                        dataset: name.clone(),
                        truth,
                        estimator: agg.estimator,
                        bias_over_rmse_dr: agg.bias.ok_or("missing bias")? / rmse_dr,
                        se_over_rmse_dr: agg.se / rmse_dr,
                        rmse_over_rmse_dr: rmse / rmse_dr,
                        rmse_over_noncontextual: counterpart,
                    })
                })
                .collect()
        })();
        match outcome {
            Ok(mut r) => rows.append(&mut r),
            Err(error) => failures.push(SuiteFailure { dataset: name, error }),
        }
    }
    Ok(SuiteReport { rows, failures })
}

// ── writers ─────────────────────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes a replication report as one CSV with a `kind` column: a `meta`
/// row (name, truth, level), `rep` rows, `agg` rows, and `failure` rows.
/// Columns are fixed; floats use shortest round-trip formatting, so
/// re-parsing reproduces them exactly.
pub fn write_report_csv<W: io::Write>(
    report: &ReplicationReport,
    writer: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "kind",
        "name",
        "rep",
        "checkpoint",
        "estimator",
        "point",
        "variance",
        "ci_lo",
        "ci_hi",
        "tstat",
        "replications_used",
        "mean_point",
        "se",
        "mean_radius",
        "bias",
        "rmse",
        "coverage",
        "truth",
        "level",
        "error",
    ])?;
    let blank = String::new();
    w.write_record([
        "meta",
        &report.name,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &blank,
        &fmt_opt(report.truth),
        &report.level.to_string(),
        &blank,
    ])?;
    for r in &report.rows {
        w.write_record([
            "rep",
            &report.name,
            &r.rep.to_string(),
            &r.checkpoint.to_string(),
            r.estimator.name(),
            &r.point.to_string(),
            &r.variance.to_string(),
            &r.ci_lo.to_string(),
            &r.ci_hi.to_string(),
            &fmt_opt(r.tstat),
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
        ])?;
    }
    for a in &report.aggregates {
        w.write_record([
            "agg",
            &report.name,
            &blank,
            &a.checkpoint.to_string(),
            a.estimator.name(),
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &a.replications_used.to_string(),
            &a.mean_point.to_string(),
            &a.se.to_string(),
            &a.mean_radius.to_string(),
            &fmt_opt(a.bias),
            &fmt_opt(a.rmse),
            &fmt_opt(a.coverage),
            &blank,
            &blank,
            &blank,
        ])?;
    }
    for f in &report.failures {
        w.write_record([
            "failure",
            &report.name,
            &f.rep.to_string(),
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &f.error,
        ])?;
    }
    w.flush().map_err(io::Error::from)?;
    Ok(())
}

/// Writes a suite report as CSV, one row per (dataset, estimator) plus
/// `failure` rows.
pub fn write_suite_csv<W: io::Write>(report: &SuiteReport, writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "kind",
        "dataset",
        "estimator",
        "truth",
        "bias_over_rmse_dr",
        "se_over_rmse_dr",
        "rmse_over_rmse_dr",
        "rmse_over_noncontextual",
        "error",
    ])?;
    let blank = String::new();
    for r in &report.rows {
        w.write_record([
            "suite",
            &r.dataset,
            r.estimator.name(),
            &r.truth.to_string(),
            &r.bias_over_rmse_dr.to_string(),
            &r.se_over_rmse_dr.to_string(),
            &r.rmse_over_rmse_dr.to_string(),
            &fmt_opt(r.rmse_over_noncontextual),
            &blank,
        ])?;
    }
    for f in &report.failures {
        w.write_record([
            "failure",
            &f.dataset,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &blank,
            &f.error,
        ])?;
    }
    w.flush().map_err(io::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
            env = "example1"
            t = 200
            batch_size = 50
            num_draws = 100
            estimators = ["dr", "nc_stablevar"]
            target = "fixed:0"
            replications = 3
            master_seed = 9
            checkpoints = [100, 200]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::from_toml_str(
            "env = \"example1\"\nt = 10\nbatch_size = 5\nbogus_key = 1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus_key"));

        for (snippet, needle) in [
            ("checkpoints = [50, 20]", "strictly increasing"),
            ("checkpoints = [500]", "cannot exceed"),
            ("level = 1.5", "level"),
            ("replications = 0", "replications"),
            ("env = \"mars\"", "unknown env"),
            ("agent = \"oracle\"", "unknown agent"),
            ("estimators = []", "estimators"),
            ("target = \"bogus\"", "unknown target"),
            ("floor = \"custom\"", "floor_coefficient"),
        ] {
            let base = if snippet.starts_with("env =") { "" } else { "env = \"example1\"\n" };
            let text = format!("{base}t = 100\nbatch_size = 50\n{snippet}\n");
            let config = ExperimentConfig::from_toml_str(&text);
            let message = match config {
                Err(e) => e.to_string(),
                Ok(c) => match c.target_spec(&c.build_env().unwrap()) {
                    Err(e) => e.to_string(),
                    Ok(_) => panic!("{snippet} should fail"),
                },
            };
            assert!(message.contains(needle), "{message:?} should mention {needle:?}");
        }

        assert!(ExperimentConfig::from_toml_str("env = \"classification\"\nt = 10\nbatch_size = 5\n")
            .unwrap_err()
            .to_string()
            .contains("dataset"));
    }

    #[test]
    fn report_has_one_row_per_rep_checkpoint_estimator() {
        let report = run_experiment(&tiny_config()).unwrap();
        assert_eq!(report.rows.len(), 3 * 2 * 2);
        assert_eq!(report.aggregates.len(), 2 * 2);
        assert!(report.failures.is_empty());
        assert_abs_diff_eq!(report.truth.unwrap(), 0.6, epsilon = 1e-15);
        // Single replication, single checkpoint: exactly one row per estimator.
        let mut single = tiny_config();
        single.replications = 1;
        single.checkpoints = vec![200];
        let report = run_experiment(&single).unwrap();
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn rmse_decomposes_into_bias_and_se() {
        let report = run_experiment(&tiny_config()).unwrap();
        for agg in &report.aggregates {
            let (bias, rmse) = (agg.bias.unwrap(), agg.rmse.unwrap());
            assert_abs_diff_eq!(rmse * rmse, bias * bias + agg.se * agg.se, epsilon = 1e-9);
        }
    }

    #[test]
    fn reports_are_deterministic_across_runs_and_job_counts() {
        let config = tiny_config();
        let to_bytes = |report: &ReplicationReport| {
            let mut csv = Vec::new();
            write_report_csv(report, &mut csv).unwrap();
            let json = serde_json::to_vec_pretty(report).unwrap();
            (csv, json)
        };
        let base = to_bytes(&run_experiment(&config).unwrap());
        let again = to_bytes(&run_experiment(&config).unwrap());
        assert_eq!(base, again);
        let one_job = with_jobs(Some(1), || to_bytes(&run_experiment(&config).unwrap()));
        let four_jobs = with_jobs(Some(4), || to_bytes(&run_experiment(&config).unwrap()));
        assert_eq!(base, one_job);
        assert_eq!(base, four_jobs);
    }

    #[test]
    fn aggregates_recompute_exactly_from_csv_rows() {
        let report = run_experiment(&tiny_config()).unwrap();
        let mut bytes = Vec::new();
        write_report_csv(&report, &mut bytes).unwrap();

        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let mut truth: Option<f64> = None;
        let mut rows: Vec<RepRow> = Vec::new();
        for record in reader.records() {
            let record = record.unwrap();
            match &record[0] {
                "meta" => {
                    truth = Some(record[17].parse().unwrap());
                }
                "rep" => rows.push(RepRow {
                    rep: record[2].parse().unwrap(),
                    checkpoint: record[3].parse().unwrap(),
                    estimator: record[4].parse().unwrap(),
                    point: record[5].parse().unwrap(),
                    variance: record[6].parse().unwrap(),
                    ci_lo: record[7].parse().unwrap(),
                    ci_hi: record[8].parse().unwrap(),
                    tstat: Some(record[9].parse().unwrap()),
                }),
                _ => {}
            }
        }
        assert_eq!(rows, report.rows);
        let recomputed = aggregate_rows(&rows, truth);
        assert_eq!(recomputed.len(), report.aggregates.len());
        for (a, b) in recomputed.iter().zip(&report.aggregates) {
            assert_eq!(a, b, "aggregates must match bit for bit after a CSV round trip");
        }
    }

    #[test]
    fn per_replication_failures_are_recorded_not_fatal() {
        // A linear agent cannot run on a featureless discrete space; every
        // replication fails, and the report says so instead of erroring.
        let mut config = tiny_config();
        config.agent = "linear".into();
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.failures.len(), 3);
        assert!(report.rows.is_empty());
        assert!(report.aggregates.is_empty());
    }

    #[test]
    fn suite_normalizes_against_dr() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut text = String::from("f1,f2,label\n");
        for i in 0..40 {
            let (x, y, label) = if i % 2 == 0 {
                (1.0 + 0.01 * i as f64, 1.0, "a")
            } else {
                (-1.0 - 0.01 * i as f64, -1.0, "b")
            };
            text.push_str(&format!("{x},{y},{label}\n"));
        }
        std::fs::write(&path, text).unwrap();

        let template = ExperimentConfig::from_toml_str(
            r#"
            env = "classification"
            dataset = "placeholder"
            agent = "linear"
            t = 80
            batch_size = 20
            num_draws = 100
            floor = "classification"
            estimators = ["dr", "nc_minvar", "ctx_minvar"]
            target = "best_fixed"
            replications = 4
            master_seed = 2
            "#,
        )
        .unwrap();
        let paths = vec![
            path.to_string_lossy().into_owned(),
            dir.path().join("missing.csv").to_string_lossy().into_owned(),
        ];
        let report = run_dataset_suite(&paths, &template).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].dataset, "missing");
        assert_eq!(report.rows.len(), 3);

        // Balanced two-class data: the majority-arm value is exactly 1/2.
        assert_abs_diff_eq!(report.rows[0].truth, 0.5, epsilon = 1e-15);
        // DR normalized against itself lies on the unit circle.
        let dr = report.rows.iter().find(|r| r.estimator == EstimatorKind::Dr).unwrap();
        let norm = dr.bias_over_rmse_dr.powi(2) + dr.se_over_rmse_dr.powi(2);
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dr.rmse_over_rmse_dr, 1.0, epsilon = 1e-12);
        // The contextual scheme carries its pairwise normalization.
        let ctx = report
            .rows
            .iter()
            .find(|r| r.estimator == EstimatorKind::Contextual(crate::estimators::Phi::MinVar))
            .unwrap();
        assert!(ctx.rmse_over_noncontextual.unwrap() > 0.0);

        let mut csv = Vec::new();
        write_suite_csv(&report, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.contains("suite,toy,dr"));
        assert!(text.contains("failure,missing"));
    }
}
