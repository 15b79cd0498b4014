//! Data-generating environments: synthetic bandit worlds with known reward
//! structure, and classification datasets recast as contextual bandits.
//!
//! Environments are immutable; all randomness enters through caller-supplied
//! RNGs, so replications can run on independent deterministic streams.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal::std_normal_cdf;
use crate::types::{check_simplex, region_of, Context, ContextSpace, PolicyTable, SIMPLEX_TOL_CONSTRUCT};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse dataset: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column {name:?} not found; available columns: {available:?}")]
    MissingLabelColumn { name: String, available: Vec<String> },
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    NonNumericCell { row: usize, column: String, value: String },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("dataset has a single class {0:?}; a bandit needs at least two arms")]
    SingleClass(String),
    #[error("mean table must be non-empty and rectangular")]
    BadMeanTable,
    #[error("invalid context distribution: {0}")]
    BadContextDistribution(#[from] crate::types::CoreError),
    #[error("no analytic value: {0}")]
    NoAnalyticValue(String),
    #[error("policy has {policy_k} arms but environment has {env_k}")]
    ArmCountMismatch { policy_k: usize, env_k: usize },
    #[error("noise level must be finite and non-negative, got {0}")]
    BadNoise(f64),
}

// ── synthetic environments ──────────────────────────────────────────────────

/// Which synthetic world to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Five contexts with probabilities (0.6, 0.1, 0.1, 0.1, 0.1), five arms,
    /// mean reward 1 exactly when the arm index matches the context index.
    Example1,
    /// Contexts drawn from a standard normal in three dimensions; four arms,
    /// one per region of the feature space, mean reward 0.7 for the matching
    /// arm and 0 otherwise.
    RegionSignal,
    /// Same context distribution and arms as `RegionSignal`, but every mean
    /// reward is zero: nothing to learn, rewards are pure noise.
    RegionNoSignal,
    /// Custom finite world: arbitrary context distribution and mean table
    /// (`means[x][w]`).
    Tabular { context_probs: Vec<f64>, means: Vec<Vec<f64>> },
}

/// A synthetic environment: a context distribution, a mean-reward function,
/// and additive Gaussian reward noise with standard deviation `noise_sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub kind: SyntheticKind,
    pub noise_sd: f64,
}

/// Context probabilities of the five-context example world.
pub const EXAMPLE1_CONTEXT_PROBS: [f64; 5] = [0.6, 0.1, 0.1, 0.1, 0.1];

impl SyntheticEnv {
    pub fn example1() -> Self {
        SyntheticEnv { kind: SyntheticKind::Example1, noise_sd: 1.0 }
    }

    pub fn region_signal() -> Self {
        SyntheticEnv { kind: SyntheticKind::RegionSignal, noise_sd: 1.0 }
    }

    pub fn region_no_signal() -> Self {
        SyntheticEnv { kind: SyntheticKind::RegionNoSignal, noise_sd: 1.0 }
    }

    pub fn tabular(
        context_probs: Vec<f64>,
        means: Vec<Vec<f64>>,
        noise_sd: f64,
    ) -> Result<Self, EnvError> {
        check_simplex(&context_probs, SIMPLEX_TOL_CONSTRUCT)?;
        if means.len() != context_probs.len() || means.is_empty() {
            return Err(EnvError::BadMeanTable);
        }
        let k = means[0].len();
        if k == 0 || means.iter().any(|row| row.len() != k) {
            return Err(EnvError::BadMeanTable);
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(EnvError::BadMeanTable);
        }
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(EnvError::BadNoise(noise_sd));
        }
        Ok(SyntheticEnv { kind: SyntheticKind::Tabular { context_probs, means }, noise_sd })
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn k(&self) -> usize {
        match &self.kind {
            SyntheticKind::Example1 => 5,
            SyntheticKind::RegionSignal | SyntheticKind::RegionNoSignal => 4,
            SyntheticKind::Tabular { means, .. } => means[0].len(),
        }
    }

    pub fn space(&self) -> ContextSpace {
        match &self.kind {
            SyntheticKind::Example1 => {
                ContextSpace::Discrete { probabilities: EXAMPLE1_CONTEXT_PROBS.to_vec() }
            }
            SyntheticKind::RegionSignal | SyntheticKind::RegionNoSignal => {
                ContextSpace::Continuous { dim: 3 }
            }
            SyntheticKind::Tabular { context_probs, .. } => {
                ContextSpace::Discrete { probabilities: context_probs.clone() }
            }
        }
    }

    /// Mean reward of `arm` at `ctx`.
    pub fn mean_reward(&self, ctx: &Context, arm: usize) -> Result<f64, EnvError> {
        match &self.kind {
            SyntheticKind::Example1 => {
                let x = require_discrete(ctx, 5)?;
                Ok(if x == arm { 1.0 } else { 0.0 })
            }
            SyntheticKind::RegionSignal => {
                let feats = ctx
                    .features()
                    .ok_or_else(|| EnvError::NoAnalyticValue("expected feature context".into()))?;
                let r = region_of(feats).map_err(EnvError::BadContextDistribution)?;
                Ok(if arm == r { 0.7 } else { 0.0 })
            }
            SyntheticKind::RegionNoSignal => Ok(0.0),
            SyntheticKind::Tabular { means, .. } => {
                let x = require_discrete(ctx, means.len())?;
                Ok(means[x][arm])
            }
        }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        match &self.kind {
            SyntheticKind::Example1 => {
                Context::Discrete(sample_index(&EXAMPLE1_CONTEXT_PROBS, rng))
            }
            SyntheticKind::RegionSignal | SyntheticKind::RegionNoSignal => {
                let feats = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Context::Continuous(feats)
            }
            SyntheticKind::Tabular { context_probs, .. } => {
                Context::Discrete(sample_index(context_probs, rng))
            }
        }
    }

    pub fn realize_reward<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        arm: usize,
        rng: &mut R,
    ) -> Result<f64, EnvError> {
        let mean = self.mean_reward(ctx, arm)?;
        let z: f64 = rng.sample(StandardNormal);
        Ok(mean + self.noise_sd * z)
    }

    /// The deterministic policy maximizing the mean reward at every context;
    /// ties go to the lowest arm index, except in the no-signal region world,
    /// which keeps the region-matching policy of its signal twin.
    pub fn best_contextual_policy(&self) -> PolicyTable {
        match &self.kind {
            SyntheticKind::Example1 => {
                let rows = (0..5)
                    .map(|x| (0..5).map(|w| if w == x { 1.0 } else { 0.0 }).collect())
                    .collect();
                PolicyTable::from_table(rows).expect("one-hot rows are valid")
            }
            SyntheticKind::RegionSignal => {
                PolicyTable::region(4, [0, 1, 2, 3]).expect("arms in range")
            }
            // Every policy is optimal when all means are zero; keep the
            // region-matching policy so the signal and no-signal worlds
            // evaluate the same structural contrast (its true value here is
            // zero, but the two target policies remain distinct).
            SyntheticKind::RegionNoSignal => {
                PolicyTable::region(4, [0, 1, 2, 3]).expect("arms in range")
            }
            SyntheticKind::Tabular { means, .. } => {
                let rows = means
                    .iter()
                    .map(|row| {
                        let best = argmax_lowest(row);
                        (0..row.len()).map(|w| if w == best { 1.0 } else { 0.0 }).collect()
                    })
                    .collect();
                PolicyTable::from_table(rows).expect("one-hot rows are valid")
            }
        }
    }

    /// The best single arm by marginal mean reward; ties go to the lowest
    /// arm index.
    pub fn best_fixed_arm_policy(&self) -> PolicyTable {
        let k = self.k();
        let marginals = self.marginal_arm_values();
        PolicyTable::fixed_arm(k, argmax_lowest(&marginals)).expect("arm in range")
    }

    /// Marginal value of each arm, `E[mean_reward(X, w)]`.
    fn marginal_arm_values(&self) -> Vec<f64> {
        match &self.kind {
            SyntheticKind::Example1 => EXAMPLE1_CONTEXT_PROBS.to_vec(),
            SyntheticKind::RegionSignal => {
                region_probabilities().iter().map(|p| 0.7 * p).collect()
            }
            SyntheticKind::RegionNoSignal => vec![0.0; 4],
            SyntheticKind::Tabular { context_probs, means } => {
                let k = means[0].len();
                (0..k)
                    .map(|w| {
                        context_probs.iter().zip(means).map(|(&p, row)| p * row[w]).sum()
                    })
                    .collect()
            }
        }
    }
}

/// Probabilities of the four feature-space regions under a standard normal
/// context distribution. The last entry is computed as the complement so the
/// vector sums to 1 exactly.
pub fn region_probabilities() -> [f64; 4] {
    let lo = std_normal_cdf(0.5); // P(coordinate <= 0.5)
    let hi = 1.0 - lo;
    let p0 = lo * lo;
    let p1 = lo * hi;
    let p2 = hi * lo;
    [p0, p1, p2, 1.0 - (p0 + p1 + p2)]
}

fn require_discrete(ctx: &Context, num: usize) -> Result<usize, EnvError> {
    match ctx.discrete_id() {
        Some(x) if x < num => Ok(x),
        _ => Err(EnvError::NoAnalyticValue(format!("expected a discrete context below {num}"))),
    }
}

/// Samples an index from a finite distribution by inverting the CDF on a
/// single uniform draw.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ── classification datasets as bandits ──────────────────────────────────────

/// A classification dataset recast as a contextual bandit: contexts are
/// (standardized) feature rows drawn uniformly with replacement, arms are
/// classes, and the reward is 1 plus noise when the played arm equals the
/// row's label, noise alone otherwise.
#[derive(Debug, Clone)]
pub struct ClassificationEnv {
    features: Arc<Vec<Vec<f64>>>,
    labels: Arc<Vec<usize>>,
    class_names: Vec<String>,
    k: usize,
    pub noise_sd: f64,
}

impl ClassificationEnv {
    /// Builds an environment from in-memory rows. Labels must already be
    /// 0-based class ids.
    pub fn from_rows(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        noise_sd: f64,
    ) -> Result<Self, EnvError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(EnvError::EmptyDataset);
        }
        let k = class_names.len();
        if k < 2 {
            return Err(EnvError::SingleClass(
                class_names.first().cloned().unwrap_or_default(),
            ));
        }
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(EnvError::BadNoise(noise_sd));
        }
        Ok(ClassificationEnv {
            features: Arc::new(features),
            labels: Arc::new(labels),
            class_names,
            k,
            noise_sd,
        })
    }

    /// Loads a CSV with a header row. The `label_column` holds class labels
    /// (any strings; factorized in order of first appearance); every other
    /// column must be numeric. With `standardize`, each feature column is
    /// shifted and scaled to mean 0 / standard deviation 1 (constant columns
    /// are left at 0).
    pub fn from_csv(
        path: &Path,
        label_column: &str,
        standardize: bool,
        noise_sd: f64,
    ) -> Result<Self, EnvError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
            EnvError::MissingLabelColumn { name: label_column.to_owned(), available: headers.clone() }
        })?;

        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut class_names: Vec<String> = Vec::new();
        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(headers.len().saturating_sub(1));
            for (col_idx, field) in record.iter().enumerate() {
                if col_idx == label_idx {
                    let name = field.to_owned();
                    let id = match class_names.iter().position(|c| *c == name) {
                        Some(id) => id,
                        None => {
                            class_names.push(name);
                            class_names.len() - 1
                        }
                    };
                    labels.push(id);
                } else {
                    let value: f64 = field.trim().parse().map_err(|_| EnvError::NonNumericCell {
                        row: row_idx + 1,
                        column: headers.get(col_idx).cloned().unwrap_or_default(),
                        value: field.to_owned(),
                    })?;
                    row.push(value);
                }
            }
            features.push(row);
        }
        if features.is_empty() {
            return Err(EnvError::EmptyDataset);
        }
        if standardize {
            standardize_columns(&mut features);
        }
        Self::from_rows(features, labels, class_names, noise_sd)
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn space(&self) -> ContextSpace {
        ContextSpace::Continuous { dim: self.dim() }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        let index = rng.gen_range(0..self.n());
        Context::Row { index, features: self.features[index].clone() }
    }

    pub fn mean_reward(&self, ctx: &Context, arm: usize) -> Result<f64, EnvError> {
        match ctx {
            Context::Row { index, .. } => {
                let label = *self.labels.get(*index).ok_or(EnvError::EmptyDataset)?;
                Ok(if arm == label { 1.0 } else { 0.0 })
            }
            _ => Err(EnvError::NoAnalyticValue("expected a dataset-row context".into())),
        }
    }

    pub fn realize_reward<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        arm: usize,
        rng: &mut R,
    ) -> Result<f64, EnvError> {
        let mean = self.mean_reward(ctx, arm)?;
        let z: f64 = rng.sample(StandardNormal);
        Ok(mean + self.noise_sd * z)
    }

    /// The policy that plays each row's true label.
    pub fn best_contextual_policy(&self) -> PolicyTable {
        PolicyTable::correct_label(self.k, Arc::clone(&self.labels)).expect("labels validated")
    }

    /// The policy that always plays the majority class (ties to the lowest
    /// class id).
    pub fn best_fixed_arm_policy(&self) -> PolicyTable {
        let mut counts = vec![0usize; self.k];
        for &l in self.labels.iter() {
            counts[l] += 1;
        }
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate().skip(1) {
            if c > counts[best] {
                best = i;
            }
        }
        PolicyTable::fixed_arm(self.k, best).expect("arm in range")
    }
}

fn standardize_columns(rows: &mut [Vec<f64>]) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    let dim = rows[0].len();
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for row in rows.iter_mut() {
            row[j] = if sd > 0.0 { (row[j] - mean) / sd } else { 0.0 };
        }
    }
}

// ── unified environment ─────────────────────────────────────────────────────

/// Any environment the harness can collect from.
#[derive(Debug, Clone)]
pub enum Env {
    Synthetic(SyntheticEnv),
    Classification(ClassificationEnv),
}

impl Env {
    pub fn k(&self) -> usize {
        match self {
            Env::Synthetic(e) => e.k(),
            Env::Classification(e) => e.k(),
        }
    }

    pub fn space(&self) -> ContextSpace {
        match self {
            Env::Synthetic(e) => e.space(),
            Env::Classification(e) => e.space(),
        }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        match self {
            Env::Synthetic(e) => e.sample_context(rng),
            Env::Classification(e) => e.sample_context(rng),
        }
    }

    pub fn realize_reward<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        arm: usize,
        rng: &mut R,
    ) -> Result<f64, EnvError> {
        match self {
            Env::Synthetic(e) => e.realize_reward(ctx, arm, rng),
            Env::Classification(e) => e.realize_reward(ctx, arm, rng),
        }
    }

    pub fn mean_reward(&self, ctx: &Context, arm: usize) -> Result<f64, EnvError> {
        match self {
            Env::Synthetic(e) => e.mean_reward(ctx, arm),
            Env::Classification(e) => e.mean_reward(ctx, arm),
        }
    }

    pub fn best_contextual_policy(&self) -> PolicyTable {
        match self {
            Env::Synthetic(e) => e.best_contextual_policy(),
            Env::Classification(e) => e.best_contextual_policy(),
        }
    }

    pub fn best_fixed_arm_policy(&self) -> PolicyTable {
        match self {
            Env::Synthetic(e) => e.best_fixed_arm_policy(),
            Env::Classification(e) => e.best_fixed_arm_policy(),
        }
    }
}

// ── analytic policy values ──────────────────────────────────────────────────

/// Exact policy value `Q(pi) = E[sum_w pi(X, w) * mean_reward(X, w)]`, when
/// the environment and policy admit one.
///
/// Supported: any tabular-evaluable policy on a discrete environment; any
/// region-constant policy (fixed-arm, region, uniform) on the region
/// environments; any policy on a classification environment (row average).
/// Everything else gets a typed "no analytic value" error.
pub fn true_policy_value(env: &Env, policy: &PolicyTable) -> Result<f64, EnvError> {
    if policy.k() != env.k() {
        return Err(EnvError::ArmCountMismatch { policy_k: policy.k(), env_k: env.k() });
    }
    match env {
        Env::Synthetic(e) => match &e.kind {
            SyntheticKind::Example1 | SyntheticKind::Tabular { .. } => {
                let (probs, means): (Vec<f64>, Vec<Vec<f64>>) = match &e.kind {
                    SyntheticKind::Example1 => (
                        EXAMPLE1_CONTEXT_PROBS.to_vec(),
                        (0..5)
                            .map(|x| (0..5).map(|w| if w == x { 1.0 } else { 0.0 }).collect())
                            .collect(),
                    ),
                    SyntheticKind::Tabular { context_probs, means } => {
                        (context_probs.clone(), means.clone())
                    }
                    _ => unreachable!(),
                };
                let table = policy
                    .to_table(probs.len())
                    .map_err(|_| EnvError::NoAnalyticValue("policy is not tabular".into()))?;
                let mut q = 0.0;
                for (x, &px) in probs.iter().enumerate() {
                    let inner: f64 =
                        table[x].iter().zip(&means[x]).map(|(&pi, &mu)| pi * mu).sum();
                    q += px * inner;
                }
                Ok(q)
            }
            SyntheticKind::RegionNoSignal => Ok(0.0),
            SyntheticKind::RegionSignal => {
                // Representative contexts, one per region; only policies known
                // to be constant on regions are admitted.
                if !policy_is_region_constant(policy) {
                    return Err(EnvError::NoAnalyticValue(
                        "policy is not known to be region-constant".into(),
                    ));
                }
                let reps = [
                    Context::Continuous(vec![0.0, 0.0, 0.0]),
                    Context::Continuous(vec![0.0, 1.0, 0.0]),
                    Context::Continuous(vec![1.0, 0.0, 0.0]),
                    Context::Continuous(vec![1.0, 1.0, 0.0]),
                ];
                let probs = region_probabilities();
                let mut q = 0.0;
                for (r, ctx) in reps.iter().enumerate() {
                    let pi = policy
                        .probs(ctx)
                        .map_err(|err| EnvError::NoAnalyticValue(err.to_string()))?;
                    q += probs[r] * 0.7 * pi[r];
                }
                Ok(q)
            }
        },
        Env::Classification(e) => {
            let mut total = 0.0;
            for (i, (row, &label)) in e.features.iter().zip(e.labels.iter()).enumerate() {
                let ctx = Context::Row { index: i, features: row.clone() };
                let pi = policy
                    .probs(&ctx)
                    .map_err(|err| EnvError::NoAnalyticValue(err.to_string()))?;
                total += pi[label];
            }
            Ok(total / e.n() as f64)
        }
    }
}

/// Exact value difference `Q(pi_1) - Q(pi_2)`.
pub fn true_contrast_value(
    env: &Env,
    policy_1: &PolicyTable,
    policy_2: &PolicyTable,
) -> Result<f64, EnvError> {
    Ok(true_policy_value(env, policy_1)? - true_policy_value(env, policy_2)?)
}

fn policy_is_region_constant(policy: &PolicyTable) -> bool {
    policy.repr_is_region_constant()
}
