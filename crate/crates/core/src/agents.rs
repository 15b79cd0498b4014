//! Adaptive data collection: floored Thompson sampling in batches.
//!
//! An agent plays the environment in batches. The first batch is uniform;
//! before every later batch the agent refreshes its posterior on everything
//! observed so far, turns it into assignment probabilities (Monte Carlo over
//! posterior draws), imposes a per-arm probability floor, and freezes the
//! result as a [`PropensitySnapshot`] for the whole batch. Within a batch the
//! assignment rule never changes, so logged propensities can be reproduced
//! exactly after the fact.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{sample_index, Env, EnvError};
use crate::linalg::{cholesky_factor, solve_lower, solve_lower_transpose};
use crate::outcome_models::{fit_on_steps, ModelError, ModelSpec};
use crate::types::{
    region_of, BanditLog, Context, ContextSpace, CoreError, LoggedStep, PropensitySnapshot,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("floor schedule needs coefficient > 0 and exponent >= 0, got ({coefficient}, {exponent})")]
    BadFloorParams { coefficient: f64, exponent: f64 },
    #[error("floor {floor} infeasible for {k} arms at step {t} (k * floor > 1)")]
    InfeasibleFloor { floor: f64, k: usize, t: usize },
    #[error("need total steps >= batch size >= 1, got total {t_total}, batch {batch_size}")]
    BadBatching { t_total: usize, batch_size: usize },
    #[error("posterior sampling needs num_draws >= 1")]
    BadNumDraws,
    #[error("linear Thompson sampling needs lambda > 0 and sigma2 > 0, got ({lambda}, {sigma2})")]
    BadLinTsPrior { lambda: f64, sigma2: f64 },
    #[error("tabular Thompson sampling needs a discrete space or features with a region partition")]
    NoPartition(#[source] CoreError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("collection produced an invalid log: {0}")]
    InvalidLogProduced(#[source] CoreError),
}

// ── floor schedules ─────────────────────────────────────────────────────────

/// Per-arm assignment-probability floor `coefficient * t^(-exponent)`.
///
/// Exponents at or above 0.5 decay too fast for the variance-stabilization
/// guarantees downstream, but such schedules are still accepted because
/// published experiments use them; the presets document both choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorSchedule {
    pub coefficient: f64,
    pub exponent: f64,
}

impl FloorSchedule {
    pub fn new(coefficient: f64, exponent: f64) -> Result<Self, AgentError> {
        if !(coefficient.is_finite() && coefficient > 0.0 && exponent.is_finite() && exponent >= 0.0)
        {
            return Err(AgentError::BadFloorParams { coefficient, exponent });
        }
        Ok(FloorSchedule { coefficient, exponent })
    }

    /// `t^(-0.8) / 4`: the schedule used by the five-arm simulation studies.
    pub fn paper_faithful() -> Self {
        FloorSchedule { coefficient: 0.25, exponent: 0.8 }
    }

    /// `t^(-0.45) / 4`: same coefficient, but decaying slowly enough for the
    /// variance-stabilization assumptions to hold.
    pub fn assumption_faithful() -> Self {
        FloorSchedule { coefficient: 0.25, exponent: 0.45 }
    }

    /// `t^(-0.5) / k`: the schedule used by the classification-dataset suite.
    pub fn classification(k: usize) -> Self {
        FloorSchedule { coefficient: 1.0 / k as f64, exponent: 0.5 }
    }

    /// The floor in force at (1-based) step `t`.
    pub fn value(&self, t: usize) -> f64 {
        self.coefficient * (t as f64).powf(-self.exponent)
    }
}

// ── floor projection ────────────────────────────────────────────────────────

/// Imposes a per-arm floor on a probability vector: entries below the floor
/// are raised to it, and the excess above the floor of the remaining entries
/// is shrunk proportionally so the vector still sums to 1. Entries at or
/// above the floor keep their relative order.
pub fn apply_floor(p: &[f64], floor: f64) -> Result<Vec<f64>, AgentError> {
    let k = p.len();
    if !(floor.is_finite() && floor >= 0.0) || k as f64 * floor > 1.0 + 1e-12 {
        return Err(AgentError::InfeasibleFloor { floor, k, t: 0 });
    }
    let mut excess = 0.0;
    for &e in p {
        if e > floor {
            excess += e - floor;
        }
    }
    let budget = 1.0 - k as f64 * floor;
    if excess <= 0.0 || budget <= 0.0 {
        // Everything is at (or below) the floor already, or the floor uses up
        // all probability mass: the unique feasible point is the floor itself.
        return Ok(vec![floor.min(1.0 / k as f64).max(floor); k]);
    }
    let shrink = budget / excess;
    Ok(p.iter().map(|&e| if e > floor { floor + (e - floor) * shrink } else { floor }).collect())
}

// ── Thompson sampling posteriors ────────────────────────────────────────────

/// Per-cell Normal-Normal posterior state: prior mean 0 with one pseudo-count,
/// known unit outcome variance.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTsState {
    counts: Vec<Vec<u64>>,
    sums: Vec<Vec<f64>>,
    sum_squares: Vec<Vec<f64>>,
}

impl TabularTsState {
    pub fn new(num_cells: usize, k: usize) -> Self {
        TabularTsState {
            counts: vec![vec![0; k]; num_cells],
            sums: vec![vec![0.0; k]; num_cells],
            sum_squares: vec![vec![0.0; k]; num_cells],
        }
    }

    pub fn observe(&mut self, cell: usize, arm: usize, reward: f64) {
        self.counts[cell][arm] += 1;
        self.sums[cell][arm] += reward;
        self.sum_squares[cell][arm] += reward * reward;
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Posterior mean and standard deviation of each arm's mean reward at
    /// `cell`: mean `sum / (1 + n)`, variance `1 / (1 + n)`.
    pub fn posterior(&self, cell: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.counts[cell].len();
        let mut means = vec![0.0; k];
        let mut sds = vec![0.0; k];
        for w in 0..k {
            let n = self.counts[cell][w] as f64;
            means[w] = self.sums[cell][w] / (1.0 + n);
            sds[w] = (1.0 / (1.0 + n)).sqrt();
        }
        (means, sds)
    }
}

/// Per-arm Bayesian linear regression state: Gram matrix `λI + Σ x xᵀ` and
/// response vector `Σ x y`, giving posterior mean `A⁻¹ b` and covariance
/// `σ² A⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinTsState {
    dim: usize,
    sigma2: f64,
    gram: Vec<Vec<Vec<f64>>>,
    response: Vec<Vec<f64>>,
}

impl LinTsState {
    pub fn new(dim: usize, k: usize, lambda: f64, sigma2: f64) -> Result<Self, AgentError> {
        if !(lambda.is_finite() && lambda > 0.0 && sigma2.is_finite() && sigma2 > 0.0) {
            return Err(AgentError::BadLinTsPrior { lambda, sigma2 });
        }
        let mut eye = vec![vec![0.0; dim]; dim];
        for (i, row) in eye.iter_mut().enumerate() {
            row[i] = lambda;
        }
        Ok(LinTsState { dim, sigma2, gram: vec![eye; k], response: vec![vec![0.0; dim]; k] })
    }

    pub fn observe(&mut self, features: &[f64], arm: usize, reward: f64) {
        let g = &mut self.gram[arm];
        for i in 0..self.dim {
            for j in 0..self.dim {
                g[i][j] += features[i] * features[j];
            }
            self.response[arm][i] += reward * features[i];
        }
    }

    /// Freezes the posterior into per-arm mean vectors and Cholesky factors
    /// for snapshot evaluation.
    fn freeze(&self) -> LinPosterior {
        let k = self.gram.len();
        let mut theta = Vec::with_capacity(k);
        let mut chol = Vec::with_capacity(k);
        for w in 0..k {
            let l = cholesky_factor(&self.gram[w])
                .expect("ridge Gram matrices are positive definite");
            theta.push(solve_lower_transpose(&l, &solve_lower(&l, &self.response[w])));
            chol.push(l);
        }
        LinPosterior { theta, chol, sigma: self.sigma2.sqrt() }
    }
}

/// Frozen linear posterior: score of arm `w` at context `x` is normal with
/// mean `θ_wᵀ x` and standard deviation `σ ‖L_w⁻¹ x‖`.
struct LinPosterior {
    theta: Vec<Vec<f64>>,
    chol: Vec<Vec<Vec<f64>>>,
    sigma: f64,
}

impl LinPosterior {
    fn score_distribution(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.theta.len();
        let mut means = vec![0.0; k];
        let mut sds = vec![0.0; k];
        for w in 0..k {
            means[w] = self.theta[w].iter().zip(features).map(|(t, x)| t * x).sum();
            let v = solve_lower(&self.chol[w], features);
            sds[w] = self.sigma * v.iter().map(|a| a * a).sum::<f64>().sqrt();
        }
        (means, sds)
    }
}

// ── posterior draws and assignment probabilities ────────────────────────────

/// A block of reusable posterior randomness: `z[i * k + w]` scores draw `i`
/// for arm `w`, and `tie[i]` breaks ties within draw `i`.
#[derive(Debug, Clone)]
pub(crate) struct ZDraws {
    k: usize,
    z: Vec<f64>,
    tie: Vec<f64>,
}

impl ZDraws {
    pub(crate) fn sample<R: Rng + ?Sized>(num_draws: usize, k: usize, rng: &mut R) -> Self {
        let z = (0..num_draws * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let tie = (0..num_draws).map(|_| rng.gen::<f64>()).collect();
        ZDraws { k, z, tie }
    }

    fn num_draws(&self) -> usize {
        self.tie.len()
    }
}

/// Fraction of posterior draws in which each arm attains the maximum score,
/// with exact within-draw ties broken by the stored uniforms. The output
/// sums to 1 exactly: the last arm's entry is computed as the complement.
pub(crate) fn ts_probabilities_from_draws(means: &[f64], sds: &[f64], draws: &ZDraws) -> Vec<f64> {
    let k = means.len();
    debug_assert_eq!(k, draws.k);
    let n = draws.num_draws();
    let mut counts = vec![0u64; k];
    let mut ties: Vec<usize> = Vec::with_capacity(k);
    for i in 0..n {
        let row = &draws.z[i * k..(i + 1) * k];
        let mut best = means[0] + sds[0] * row[0];
        let mut winner = 0;
        ties.clear();
        ties.push(0);
        for w in 1..k {
            let score = means[w] + sds[w] * row[w];
            if score > best {
                best = score;
                winner = w;
                ties.clear();
                ties.push(w);
            } else if score == best {
                ties.push(w);
            }
        }
        if ties.len() > 1 {
            let pick = ((draws.tie[i] * ties.len() as f64) as usize).min(ties.len() - 1);
            winner = ties[pick];
        }
        counts[winner] += 1;
    }
    counts_to_simplex(&counts, n)
}

/// Normalized counts with the last entry taken as the complement, so the
/// left-to-right sum is exactly 1. If adverse rounding would make that
/// complement negative, the slack (below 1e-15) moves to the largest entry
/// instead.
fn counts_to_simplex(counts: &[u64], n: usize) -> Vec<f64> {
    let k = counts.len();
    let mut probs = vec![0.0; k];
    let mut partial = 0.0;
    for w in 0..k - 1 {
        probs[w] = counts[w] as f64 / n as f64;
        partial += probs[w];
    }
    let last = 1.0 - partial;
    if last >= 0.0 {
        probs[k - 1] = last;
    } else {
        let m = (0..k - 1).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
        probs[m] += last;
    }
    probs
}

// ── agent configuration ─────────────────────────────────────────────────────

/// Which Thompson sampling agent collects the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AgentKind {
    /// Independent Normal-Normal posteriors per (cell, arm). Cells are the
    /// discrete contexts, or the four feature-space regions on continuous
    /// spaces.
    TabularTs,
    /// Per-arm Bayesian linear regression posteriors on the raw features.
    LinTs { lambda: f64, sigma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// Posterior draws per assignment-probability estimate.
    pub num_draws: usize,
}

impl AgentConfig {
    pub fn tabular(num_draws: usize) -> Self {
        AgentConfig { kind: AgentKind::TabularTs, num_draws }
    }

    pub fn linear(num_draws: usize) -> Self {
        AgentConfig { kind: AgentKind::LinTs { lambda: 1.0, sigma2: 1.0 }, num_draws }
    }
}

enum TsState {
    Tabular { state: TabularTsState, discrete_cells: bool },
    Linear(LinTsState),
}

impl TsState {
    fn init(kind: AgentKind, space: &ContextSpace, k: usize) -> Result<Self, AgentError> {
        match kind {
            AgentKind::TabularTs => match space {
                ContextSpace::Discrete { probabilities } => Ok(TsState::Tabular {
                    state: TabularTsState::new(probabilities.len(), k),
                    discrete_cells: true,
                }),
                ContextSpace::Continuous { dim } => {
                    if *dim < 2 {
                        return Err(AgentError::NoPartition(CoreError::RegionNeedsFeatures(*dim)));
                    }
                    Ok(TsState::Tabular { state: TabularTsState::new(4, k), discrete_cells: false })
                }
            },
            AgentKind::LinTs { lambda, sigma2 } => {
                let dim = space.dim().ok_or(AgentError::NoPartition(
                    CoreError::RegionNeedsFeatures(0),
                ))?;
                Ok(TsState::Linear(LinTsState::new(dim, k, lambda, sigma2)?))
            }
        }
    }

    fn cell_of(&self, ctx: &Context) -> Result<usize, AgentError> {
        match self {
            TsState::Tabular { discrete_cells: true, .. } => ctx
                .discrete_id()
                .ok_or(AgentError::NoPartition(CoreError::RegionNeedsFeatures(0))),
            TsState::Tabular { discrete_cells: false, .. } => {
                let feats = ctx
                    .features()
                    .ok_or(AgentError::NoPartition(CoreError::RegionNeedsFeatures(0)))?;
                region_of(feats).map_err(AgentError::NoPartition)
            }
            TsState::Linear(_) => unreachable!("linear state has no cells"),
        }
    }

    fn observe(&mut self, ctx: &Context, arm: usize, reward: f64) -> Result<(), AgentError> {
        match self {
            TsState::Tabular { .. } => {
                let cell = self.cell_of(ctx)?;
                if let TsState::Tabular { state, .. } = self {
                    state.observe(cell, arm, reward);
                }
                Ok(())
            }
            TsState::Linear(state) => {
                let feats = ctx
                    .features()
                    .ok_or(AgentError::NoPartition(CoreError::RegionNeedsFeatures(0)))?;
                state.observe(feats, arm, reward);
                Ok(())
            }
        }
    }

    /// Builds the floored assignment snapshot for a batch from the current
    /// posterior and one shared block of posterior draws.
    fn snapshot<R: Rng + ?Sized>(
        &self,
        batch: usize,
        start: usize,
        end: usize,
        floor: f64,
        k: usize,
        num_draws: usize,
        rng: &mut R,
    ) -> Result<PropensitySnapshot, AgentError> {
        let draws = ZDraws::sample(num_draws, k, rng);
        match self {
            TsState::Tabular { state, discrete_cells } => {
                let cells = state.counts.len();
                let mut rows = Vec::with_capacity(cells);
                for cell in 0..cells {
                    let (means, sds) = state.posterior(cell);
                    let probs = ts_probabilities_from_draws(&means, &sds, &draws);
                    rows.push(apply_floor(&probs, floor)?);
                }
                let snap = if *discrete_cells {
                    PropensitySnapshot::from_table(batch, start, end, floor, rows)
                } else {
                    PropensitySnapshot::from_region_table(batch, start, end, floor, rows)
                };
                snap.map_err(AgentError::InvalidLogProduced)
            }
            TsState::Linear(state) => {
                let posterior = Arc::new(state.freeze());
                let draws = Arc::new(draws);
                let f = move |ctx: &Context| {
                    let feats = ctx.features().expect("linear agents need feature contexts");
                    let (means, sds) = posterior.score_distribution(feats);
                    let probs = ts_probabilities_from_draws(&means, &sds, &draws);
                    apply_floor(&probs, floor).expect("floor feasibility checked per batch")
                };
                Ok(PropensitySnapshot::from_fn(batch, start, end, floor, k, f))
            }
        }
    }
}

// ── collection ──────────────────────────────────────────────────────────────

/// Runs the agent on the environment for `t_total` steps in batches of
/// `batch_size`, recording per-step contexts, arms, rewards, propensities,
/// and prequential outcome-model predictions.
///
/// The first batch assigns uniformly at random. Every later batch snapshots
/// the floored Thompson sampling probabilities, with the floor evaluated at
/// the batch's first global step index. A final partial batch runs under its
/// own snapshot built the same way.
pub fn collect<R: Rng + ?Sized>(
    env: &Env,
    agent: &AgentConfig,
    model: ModelSpec,
    t_total: usize,
    batch_size: usize,
    floor: &FloorSchedule,
    rng: &mut R,
) -> Result<BanditLog, AgentError> {
    if batch_size == 0 || t_total < batch_size {
        return Err(AgentError::BadBatching { t_total, batch_size });
    }
    if agent.num_draws == 0 {
        return Err(AgentError::BadNumDraws);
    }
    let k = env.k();
    let space = env.space();
    let mut state = TsState::init(agent.kind, &space, k)?;

    let mut steps: Vec<LoggedStep> = Vec::with_capacity(t_total);
    let mut snapshots: Vec<PropensitySnapshot> = Vec::new();
    let num_batches = t_total.div_ceil(batch_size);
    let mut muhat = vec![0.0; k];
    for batch in 0..num_batches {
        let start = batch * batch_size + 1;
        let end = ((batch + 1) * batch_size).min(t_total);
        let snapshot = if batch == 0 {
            PropensitySnapshot::uniform(0, start, end, k)
        } else {
            let floor_value = floor.value(start);
            if k as f64 * floor_value > 1.0 + 1e-12 {
                return Err(AgentError::InfeasibleFloor { floor: floor_value, k, t: start });
            }
            state.snapshot(batch, start, end, floor_value, k, agent.num_draws, rng)?
        };
        let outcome_model = fit_on_steps(model, &space, k, &steps)?;
        for t in start..=end {
            let context = env.sample_context(rng);
            let propensities =
                snapshot.evaluate(&context).map_err(AgentError::InvalidLogProduced)?;
            let arm = sample_index(&propensities, rng);
            let reward = env.realize_reward(&context, arm, rng)?;
            outcome_model.predict_into(&context, &mut muhat)?;
            state.observe(&context, arm, reward)?;
            steps.push(LoggedStep {
                t,
                context,
                arm,
                reward,
                propensities,
                muhat: muhat.clone(),
            });
        }
        snapshots.push(snapshot);
    }
    let log = BanditLog { space, k, steps, snapshots };
    log.validate().map_err(AgentError::InvalidLogProduced)?;
    Ok(log)
}
