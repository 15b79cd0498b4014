//! Off-policy evaluation for adaptively collected contextual-bandit data.
//!
//! The crate simulates batched Thompson-sampling data collection with
//! propensity floors, then estimates the value of counterfactual policies
//! from a single logged run via direct-method, inverse-propensity, doubly
//! robust, and variance-stabilized weighted estimators, with confidence
//! intervals that stay calibrated despite the adaptivity of the logging
//! policy.

pub mod agents;
pub mod diagnostics;
pub mod envs;
pub mod estimators;
pub mod harness;
mod linalg;
pub mod logfile;
mod normal;
pub mod outcome_models;
pub mod types;

pub use agents::{
    apply_floor, collect, AgentConfig, AgentError, AgentKind, FloorSchedule, LinTsState,
    TabularTsState,
};
pub use diagnostics::{
    brute_force_score_moments, coverage_experiment, inverse_propensity_dispersion, ks_statistic,
    power_moment, random_simplex, target_truth, CoverageConfig, CoverageReport, DiagnosticsError,
    FrozenSetup, ScoreMoments, MAX_ATOMS,
};
pub use estimators::{
    contextual_weights, dr_score, estimate_contrast, estimate_dm, estimate_dr, estimate_ipw,
    estimate_weighted, ipw_score, noncontextual_weights, oracle_noncontextual_weights,
    run_estimator, ContextualWeights, EstimateFlags, EstimatorError, EstimatorKind, Phi, Target,
    TargetSpec, WeightFamily, WeightScheme, WeightedEstimate, PROXY_FLOOR,
};
pub use envs::{
    region_probabilities, true_contrast_value, true_policy_value, ClassificationEnv, Env,
    EnvError, SyntheticEnv, SyntheticKind, EXAMPLE1_CONTEXT_PROBS,
};
pub use harness::{
    aggregate_rows, run_dataset_suite, run_experiment, with_jobs, write_report_csv,
    write_suite_csv, AggRow, ExperimentConfig, HarnessError, RepFailure, RepRow,
    ReplicationReport, SuiteFailure, SuiteReport, SuiteRow,
};
pub use logfile::{load_log, read_log, save_log, write_log, LogfileError};
pub use outcome_models::{
    fit_on_steps, refit_prefix, ModelError, ModelSpec, OutcomeModel, PerArmRidgeModel,
    TabularMeanModel, PREDICTION_BOUND,
};
pub use types::{
    region_of, BanditLog, Context, ContextSpace, CoreError, LoggedStep, PolicyTable,
    PropensitySnapshot,
};
