//! Core domain types: context spaces, target policies, logged bandit data,
//! and per-batch propensity snapshots.
//!
//! A [`BanditLog`] is the exchange format between data collection and
//! estimation. It is self-contained: every step records the propensity
//! vector it was sampled from and the outcome-model predictions that were
//! current when the step was played, and the per-batch [`PropensitySnapshot`]s
//! allow re-evaluating historical assignment probabilities at any logged
//! context (required by the adaptive weighting schemes).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for probability vectors constructed in-process.
pub const SIMPLEX_TOL_CONSTRUCT: f64 = 1e-12;
/// Tolerance for probability vectors read back from logged data.
pub const SIMPLEX_TOL_LOGGED: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("probability vector must be non-empty")]
    EmptySimplex,
    #[error("probability vector entry {index} is {value}, outside [0, 1]")]
    SimplexEntryOutOfRange { index: usize, value: f64 },
    #[error("probability vector sums to {sum}, more than {tol} away from 1")]
    SimplexSum { sum: f64, tol: f64 },
    #[error("context {context:?} is not a member of the space {space:?}")]
    ContextSpaceMismatch { context: Context, space: ContextSpace },
    #[error("arm {arm} out of range for {k} arms")]
    ArmOutOfRange { arm: usize, k: usize },
    #[error("policy table must have at least one context row")]
    EmptyPolicy,
    #[error("policy rows must all have the same number of arms")]
    RaggedPolicy,
    #[error("policy is not representable as a table over {0} discrete contexts")]
    NotTabular(usize),
    #[error("region policies need at least 2 features, context has {0}")]
    RegionNeedsFeatures(usize),
    #[error("step {t}: {reason}")]
    InvalidStep { t: usize, reason: String },
    #[error("snapshot {index}: {reason}")]
    InvalidSnapshot { index: usize, reason: String },
    #[error("snapshot intervals do not partition 1..={t}: {reason}")]
    SnapshotCoverage { t: usize, reason: String },
    #[error("log has no steps")]
    EmptyLog,
    #[error(
        "snapshot {batch} is only evaluable at logged step indices, not at arbitrary contexts"
    )]
    SnapshotNotEvaluable { batch: usize },
    #[error("mixture weight {0} outside [0, 1]")]
    BadMixtureWeight(f64),
}

/// Checks that `v` is a probability vector: entries in [0, 1] (within `tol`)
/// and total within `tol` of 1.
pub fn check_simplex(v: &[f64], tol: f64) -> Result<(), CoreError> {
    if v.is_empty() {
        return Err(CoreError::EmptySimplex);
    }
    for (i, &p) in v.iter().enumerate() {
        if !p.is_finite() || p < -tol || p > 1.0 + tol {
            return Err(CoreError::SimplexEntryOutOfRange { index: i, value: p });
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(CoreError::SimplexSum { sum, tol });
    }
    Ok(())
}

// ── context spaces ──────────────────────────────────────────────────────────

/// The space contexts are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextSpace {
    /// Finitely many contexts with known marginal probabilities.
    Discrete { probabilities: Vec<f64> },
    /// Feature vectors of a fixed dimension.
    Continuous { dim: usize },
}

impl ContextSpace {
    pub fn discrete(probabilities: Vec<f64>) -> Result<Self, CoreError> {
        check_simplex(&probabilities, SIMPLEX_TOL_CONSTRUCT)?;
        Ok(ContextSpace::Discrete { probabilities })
    }

    pub fn continuous(dim: usize) -> Self {
        ContextSpace::Continuous { dim }
    }

    /// Number of distinct contexts; `None` for continuous spaces.
    pub fn num_contexts(&self) -> Option<usize> {
        match self {
            ContextSpace::Discrete { probabilities } => Some(probabilities.len()),
            ContextSpace::Continuous { .. } => None,
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            ContextSpace::Discrete { .. } => None,
            ContextSpace::Continuous { dim } => Some(*dim),
        }
    }

    /// Verifies that `ctx` belongs to this space.
    pub fn contains(&self, ctx: &Context) -> bool {
        match (self, ctx) {
            (ContextSpace::Discrete { probabilities }, Context::Discrete(i)) => {
                *i < probabilities.len()
            }
            (ContextSpace::Continuous { dim }, Context::Continuous(f)) => f.len() == *dim,
            (ContextSpace::Continuous { dim }, Context::Row { features, .. }) => {
                features.len() == *dim
            }
            _ => false,
        }
    }
}

/// A single realized context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Context {
    /// Index into a discrete context space.
    Discrete(usize),
    /// Feature vector from a continuous space.
    Continuous(Vec<f64>),
    /// Feature vector that originated as a dataset row; the row index lets
    /// row-defined policies (e.g. "play the correct label") stay evaluable.
    Row { index: usize, features: Vec<f64> },
}

impl Context {
    /// Feature view for model fitting; `None` for discrete contexts.
    pub fn features(&self) -> Option<&[f64]> {
        match self {
            Context::Discrete(_) => None,
            Context::Continuous(f) => Some(f),
            Context::Row { features, .. } => Some(features),
        }
    }

    /// Discrete context id, if any.
    pub fn discrete_id(&self) -> Option<usize> {
        match self {
            Context::Discrete(i) => Some(*i),
            _ => None,
        }
    }
}

/// Axis-aligned partition of a feature space into four cells by thresholding
/// the first two coordinates at 0.5. Used by the synthetic continuous
/// environments and by region-constant policies.
pub fn region_of(features: &[f64]) -> Result<usize, CoreError> {
    if features.len() < 2 {
        return Err(CoreError::RegionNeedsFeatures(features.len()));
    }
    let hi0 = (features[0] > 0.5) as usize;
    let hi1 = (features[1] > 0.5) as usize;
    Ok(2 * hi0 + hi1)
}

// ── target policies ─────────────────────────────────────────────────────────

/// A target policy: a map from contexts to probability vectors over arms.
///
/// Discrete-space policies are tables; continuous-space policies shipped here
/// are deterministic (fixed-arm, region-constant, or row-defined), with a
/// general closure-backed constructor for custom stochastic policies.
#[derive(Clone)]
pub struct PolicyTable {
    k: usize,
    repr: PolicyRepr,
}

#[derive(Clone)]
enum PolicyRepr {
    /// Row-stochastic table over discrete context ids.
    Table(Arc<Vec<Vec<f64>>>),
    /// Point mass on one arm at every context.
    FixedArm(usize),
    /// Equal probability on every arm at every context.
    Uniform,
    /// Point mass on `arms[region_of(x)]`.
    Region([usize; 4]),
    /// Point mass on the label of the originating dataset row.
    CorrectLabel(Arc<Vec<usize>>),
    /// Arbitrary evaluable policy.
    Custom(Arc<dyn Fn(&Context) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for PolicyTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.repr {
            PolicyRepr::Table(_) => "table",
            PolicyRepr::FixedArm(_) => "fixed-arm",
            PolicyRepr::Uniform => "uniform",
            PolicyRepr::Region(_) => "region",
            PolicyRepr::CorrectLabel(_) => "correct-label",
            PolicyRepr::Custom(_) => "custom",
        };
        write!(f, "PolicyTable(k={}, {})", self.k, kind)
    }
}

impl PolicyTable {
    /// Policy from an explicit row-stochastic table (`probs[x][w]`).
    /// Every row must be a probability vector within 1e-12.
    pub fn from_table(probs: Vec<Vec<f64>>) -> Result<Self, CoreError> {
        if probs.is_empty() {
            return Err(CoreError::EmptyPolicy);
        }
        let k = probs[0].len();
        for row in &probs {
            if row.len() != k {
                return Err(CoreError::RaggedPolicy);
            }
            check_simplex(row, SIMPLEX_TOL_CONSTRUCT)?;
        }
        Ok(PolicyTable { k, repr: PolicyRepr::Table(Arc::new(probs)) })
    }

    /// Deterministic policy playing `arm` at every context.
    pub fn fixed_arm(k: usize, arm: usize) -> Result<Self, CoreError> {
        if arm >= k {
            return Err(CoreError::ArmOutOfRange { arm, k });
        }
        Ok(PolicyTable { k, repr: PolicyRepr::FixedArm(arm) })
    }

    /// Uniform randomization over `k` arms at every context.
    pub fn uniform(k: usize) -> Result<Self, CoreError> {
        if k == 0 {
            return Err(CoreError::EmptyPolicy);
        }
        Ok(PolicyTable { k, repr: PolicyRepr::Uniform })
    }

    /// Deterministic region-constant policy: plays `arms[region_of(x)]`.
    pub fn region(k: usize, arms: [usize; 4]) -> Result<Self, CoreError> {
        for &arm in &arms {
            if arm >= k {
                return Err(CoreError::ArmOutOfRange { arm, k });
            }
        }
        Ok(PolicyTable { k, repr: PolicyRepr::Region(arms) })
    }

    /// Deterministic policy playing the label of the originating dataset row.
    /// Only evaluable at [`Context::Row`] contexts.
    pub fn correct_label(k: usize, labels: Arc<Vec<usize>>) -> Result<Self, CoreError> {
        for &l in labels.iter() {
            if l >= k {
                return Err(CoreError::ArmOutOfRange { arm: l, k });
            }
        }
        Ok(PolicyTable { k, repr: PolicyRepr::CorrectLabel(labels) })
    }

    /// General stochastic policy backed by a closure. The closure must return
    /// a length-`k` probability vector for every context it is evaluated at.
    pub fn from_fn<F>(k: usize, f: F) -> Self
    where
        F: Fn(&Context) -> Vec<f64> + Send + Sync + 'static,
    {
        PolicyTable { k, repr: PolicyRepr::Custom(Arc::new(f)) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Writes π(x, ·) into `out` (length `k`).
    pub fn probs_into(&self, ctx: &Context, out: &mut [f64]) -> Result<(), CoreError> {
        debug_assert_eq!(out.len(), self.k);
        match &self.repr {
            PolicyRepr::Table(t) => {
                let i = ctx.discrete_id().ok_or_else(|| CoreError::ContextSpaceMismatch {
                    context: ctx.clone(),
                    space: ContextSpace::Discrete { probabilities: vec![1.0] },
                })?;
                let row = t.get(i).ok_or(CoreError::ArmOutOfRange { arm: i, k: t.len() })?;
                out.copy_from_slice(row);
            }
            PolicyRepr::FixedArm(a) => {
                out.fill(0.0);
                out[*a] = 1.0;
            }
            PolicyRepr::Uniform => {
                out.fill(1.0 / self.k as f64);
            }
            PolicyRepr::Region(arms) => {
                let feats = ctx.features().ok_or(CoreError::RegionNeedsFeatures(0))?;
                let r = region_of(feats)?;
                out.fill(0.0);
                out[arms[r]] = 1.0;
            }
            PolicyRepr::CorrectLabel(labels) => {
                let index = match ctx {
                    Context::Row { index, .. } => *index,
                    _ => {
                        return Err(CoreError::ContextSpaceMismatch {
                            context: ctx.clone(),
                            space: ContextSpace::Continuous { dim: 0 },
                        })
                    }
                };
                let l = *labels.get(index).ok_or(CoreError::InvalidStep {
                    t: index,
                    reason: "row index outside the label table".into(),
                })?;
                out.fill(0.0);
                out[l] = 1.0;
            }
            PolicyRepr::Custom(f) => {
                let v = f(ctx);
                debug_assert_eq!(v.len(), self.k);
                out.copy_from_slice(&v);
            }
        }
        Ok(())
    }

    /// True when the policy provably assigns the same probabilities
    /// everywhere within each feature-space region.
    pub(crate) fn repr_is_region_constant(&self) -> bool {
        matches!(
            self.repr,
            PolicyRepr::FixedArm(_) | PolicyRepr::Uniform | PolicyRepr::Region(_)
        )
    }

    /// π(x, ·) as a fresh vector.
    pub fn probs(&self, ctx: &Context) -> Result<Vec<f64>, CoreError> {
        let mut out = vec![0.0; self.k];
        self.probs_into(ctx, &mut out)?;
        Ok(out)
    }

    /// Materializes the policy as a table over `num_contexts` discrete
    /// contexts. Fails for policies that are not evaluable at discrete ids.
    pub fn to_table(&self, num_contexts: usize) -> Result<Vec<Vec<f64>>, CoreError> {
        let mut rows = Vec::with_capacity(num_contexts);
        for x in 0..num_contexts {
            let ctx = Context::Discrete(x);
            match self.probs(&ctx) {
                Ok(row) => rows.push(row),
                Err(_) => return Err(CoreError::NotTabular(num_contexts)),
            }
        }
        Ok(rows)
    }

    /// Pointwise mixture `alpha * a + (1 - alpha) * b` as a table policy over
    /// `num_contexts` discrete contexts.
    pub fn mix(
        a: &PolicyTable,
        b: &PolicyTable,
        alpha: f64,
        num_contexts: usize,
    ) -> Result<PolicyTable, CoreError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::BadMixtureWeight(alpha));
        }
        let (ta, tb) = (a.to_table(num_contexts)?, b.to_table(num_contexts)?);
        if a.k != b.k {
            return Err(CoreError::RaggedPolicy);
        }
        let mixed: Vec<Vec<f64>> = ta
            .iter()
            .zip(&tb)
            .map(|(ra, rb)| {
                ra.iter().zip(rb).map(|(&pa, &pb)| alpha * pa + (1.0 - alpha) * pb).collect()
            })
            .collect();
        // Mixtures of valid rows can drift a few ulps off an exact unit sum;
        // construct directly rather than re-validating at the strict tolerance.
        Ok(PolicyTable { k: a.k, repr: PolicyRepr::Table(Arc::new(mixed)) })
    }
}

// ── logged data ─────────────────────────────────────────────────────────────

/// One logged interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedStep {
    /// 1-based step index.
    pub t: usize,
    pub context: Context,
    /// Arm actually played.
    pub arm: usize,
    pub reward: f64,
    /// Assignment probabilities the arm was sampled from (length K).
    pub propensities: Vec<f64>,
    /// Outcome-model predictions current when the step was played (length K).
    pub muhat: Vec<f64>,
}

/// How a snapshot evaluates assignment probabilities at a context.
#[derive(Clone)]
pub(crate) enum SnapshotEvaluator {
    /// Uniform over K arms (the first batch).
    Uniform,
    /// Table over discrete context ids: `rows[x][w]`.
    Table(Arc<Vec<Vec<f64>>>),
    /// Table over the four feature-space regions: `rows[region][w]`.
    RegionTable(Arc<Vec<Vec<f64>>>),
    /// Closure over arbitrary contexts (in-memory collection output).
    Fn(Arc<dyn Fn(&Context) -> Vec<f64> + Send + Sync>),
    /// Evaluations at every logged step's context, keyed by step index.
    /// This is what continuous-space snapshots become after a round-trip
    /// through a log file.
    PerStep(Arc<BTreeMap<usize, Vec<f64>>>),
}

/// Frozen assignment-probability rule for one batch of steps.
///
/// `evaluate_at` reproduces, exactly, the propensity vector any logged context
/// would have received while this snapshot was in force.
#[derive(Clone)]
pub struct PropensitySnapshot {
    /// 0-based batch index.
    pub batch: usize,
    /// First step (1-based, inclusive) played under this snapshot.
    pub start: usize,
    /// Last step (inclusive).
    pub end: usize,
    /// Probability floor in force: every output entry is >= this.
    pub floor: f64,
    pub(crate) k: usize,
    pub(crate) evaluator: SnapshotEvaluator,
}

impl std::fmt::Debug for PropensitySnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "PropensitySnapshot(batch={}, steps={}..={}, floor={})",
            self.batch, self.start, self.end, self.floor
        )
    }
}

impl PropensitySnapshot {
    pub fn uniform(batch: usize, start: usize, end: usize, k: usize) -> Self {
        PropensitySnapshot {
            batch,
            start,
            end,
            floor: 1.0 / k as f64,
            k,
            evaluator: SnapshotEvaluator::Uniform,
        }
    }

    pub fn from_table(
        batch: usize,
        start: usize,
        end: usize,
        floor: f64,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, CoreError> {
        if rows.is_empty() {
            return Err(CoreError::InvalidSnapshot { index: batch, reason: "empty table".into() });
        }
        let k = rows[0].len();
        for row in &rows {
            if row.len() != k {
                return Err(CoreError::InvalidSnapshot {
                    index: batch,
                    reason: "ragged table".into(),
                });
            }
        }
        Ok(PropensitySnapshot {
            batch,
            start,
            end,
            floor,
            k,
            evaluator: SnapshotEvaluator::Table(Arc::new(rows)),
        })
    }

    pub fn from_region_table(
        batch: usize,
        start: usize,
        end: usize,
        floor: f64,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, CoreError> {
        if rows.len() != 4 {
            return Err(CoreError::InvalidSnapshot {
                index: batch,
                reason: format!("region table needs 4 rows, got {}", rows.len()),
            });
        }
        let k = rows[0].len();
        Ok(PropensitySnapshot {
            batch,
            start,
            end,
            floor,
            k,
            evaluator: SnapshotEvaluator::RegionTable(Arc::new(rows)),
        })
    }

    pub fn from_fn<F>(batch: usize, start: usize, end: usize, floor: f64, k: usize, f: F) -> Self
    where
        F: Fn(&Context) -> Vec<f64> + Send + Sync + 'static,
    {
        PropensitySnapshot { batch, start, end, floor, k, evaluator: SnapshotEvaluator::Fn(Arc::new(f)) }
    }

    pub fn from_per_step(
        batch: usize,
        start: usize,
        end: usize,
        floor: f64,
        k: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    ) -> Self {
        PropensitySnapshot {
            batch,
            start,
            end,
            floor,
            k,
            evaluator: SnapshotEvaluator::PerStep(Arc::new(rows)),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Evaluates the snapshot at an arbitrary context. Fails for snapshots
    /// loaded from per-step tables, which only know logged contexts.
    pub fn evaluate(&self, ctx: &Context) -> Result<Vec<f64>, CoreError> {
        match &self.evaluator {
            SnapshotEvaluator::Uniform => Ok(vec![1.0 / self.k as f64; self.k]),
            SnapshotEvaluator::Table(rows) => {
                let i = ctx.discrete_id().ok_or_else(|| CoreError::ContextSpaceMismatch {
                    context: ctx.clone(),
                    space: ContextSpace::Discrete { probabilities: vec![1.0] },
                })?;
                rows.get(i).cloned().ok_or(CoreError::ArmOutOfRange { arm: i, k: rows.len() })
            }
            SnapshotEvaluator::RegionTable(rows) => {
                let feats = ctx.features().ok_or(CoreError::RegionNeedsFeatures(0))?;
                Ok(rows[region_of(feats)?].clone())
            }
            SnapshotEvaluator::Fn(f) => Ok(f(ctx)),
            SnapshotEvaluator::PerStep(_) => {
                Err(CoreError::SnapshotNotEvaluable { batch: self.batch })
            }
        }
    }

    /// Evaluates the snapshot at the context of logged step `t` (1-based).
    /// This is the form estimation uses: it works for every evaluator kind,
    /// including per-step tables loaded from files.
    pub fn evaluate_at(&self, ctx: &Context, t: usize) -> Result<Vec<f64>, CoreError> {
        match &self.evaluator {
            SnapshotEvaluator::PerStep(rows) => rows.get(&t).cloned().ok_or_else(|| {
                CoreError::InvalidSnapshot {
                    index: self.batch,
                    reason: format!("no stored evaluation for step {t}"),
                }
            }),
            _ => self.evaluate(ctx),
        }
    }
}

/// A complete log of adaptively collected bandit data.
#[derive(Debug, Clone)]
pub struct BanditLog {
    pub space: ContextSpace,
    /// Number of arms.
    pub k: usize,
    /// Steps in play order, `steps[i].t == i + 1`.
    pub steps: Vec<LoggedStep>,
    /// Per-batch propensity snapshots; their intervals partition `1..=t()`.
    pub snapshots: Vec<PropensitySnapshot>,
}

impl BanditLog {
    /// Number of logged steps.
    pub fn t(&self) -> usize {
        self.steps.len()
    }

    /// The snapshot in force at step `t` (1-based).
    pub fn snapshot_for(&self, t: usize) -> Option<&PropensitySnapshot> {
        self.snapshots.iter().find(|s| s.start <= t && t <= s.end)
    }

    /// 0-based batch index of step `t`.
    pub fn batch_of(&self, t: usize) -> Option<usize> {
        self.snapshot_for(t).map(|s| s.batch)
    }

    /// The log truncated to its first `t` steps. Snapshot intervals are
    /// clipped; evaluators are shared.
    pub fn prefix(&self, t: usize) -> BanditLog {
        let t = t.min(self.t());
        let steps = self.steps[..t].to_vec();
        let snapshots = self
            .snapshots
            .iter()
            .filter(|s| s.start <= t)
            .map(|s| {
                let mut s = s.clone();
                s.end = s.end.min(t);
                s
            })
            .collect();
        BanditLog { space: self.space.clone(), k: self.k, steps, snapshots }
    }

    /// Structural validation: step indexing, simplex tolerances, floor
    /// consistency, snapshot coverage, and agreement between recorded
    /// propensities and snapshot re-evaluation (within 1e-10).
    ///
    /// Entries equal to zero are allowed when the declared floor is zero;
    /// estimators surface a typed overlap error if such an arm was played.
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.steps.is_empty() {
            return Err(CoreError::EmptyLog);
        }
        if self.k == 0 {
            return Err(CoreError::EmptyPolicy);
        }
        let t_total = self.t();

        // Snapshot intervals must partition 1..=T in order.
        let mut expected_start = 1usize;
        for (i, s) in self.snapshots.iter().enumerate() {
            if s.batch != i {
                return Err(CoreError::InvalidSnapshot {
                    index: i,
                    reason: format!("batch index {} out of order", s.batch),
                });
            }
            if s.start != expected_start || s.end < s.start {
                return Err(CoreError::SnapshotCoverage {
                    t: t_total,
                    reason: format!("snapshot {} covers {}..={}", i, s.start, s.end),
                });
            }
            if s.k != self.k {
                return Err(CoreError::InvalidSnapshot {
                    index: i,
                    reason: format!("snapshot k={} but log k={}", s.k, self.k),
                });
            }
            if !(s.floor.is_finite() && s.floor >= 0.0) {
                return Err(CoreError::InvalidSnapshot {
                    index: i,
                    reason: format!("floor {} invalid", s.floor),
                });
            }
            expected_start = s.end + 1;
        }
        if expected_start != t_total + 1 {
            return Err(CoreError::SnapshotCoverage {
                t: t_total,
                reason: format!("coverage stops at {}", expected_start - 1),
            });
        }

        for (i, step) in self.steps.iter().enumerate() {
            let t = i + 1;
            let fail = |reason: String| CoreError::InvalidStep { t, reason };
            if step.t != t {
                return Err(fail(format!("step index {} at position {}", step.t, t)));
            }
            if !self.space.contains(&step.context) {
                return Err(fail("context outside the declared space".into()));
            }
            if step.arm >= self.k {
                return Err(fail(format!("arm {} out of range", step.arm)));
            }
            if step.propensities.len() != self.k || step.muhat.len() != self.k {
                return Err(fail("propensity/prediction vector length mismatch".into()));
            }
            check_simplex(&step.propensities, SIMPLEX_TOL_LOGGED)
                .map_err(|e| fail(format!("propensities: {e}")))?;
            if step.muhat.iter().any(|m| !m.is_finite()) || !step.reward.is_finite() {
                return Err(fail("non-finite reward or prediction".into()));
            }
            let snap = self
                .snapshot_for(t)
                .expect("coverage checked above");
            for (w, &e) in step.propensities.iter().enumerate() {
                if e < snap.floor - SIMPLEX_TOL_LOGGED {
                    return Err(fail(format!(
                        "propensity {e} for arm {w} below the floor {} in force",
                        snap.floor
                    )));
                }
            }
            let replayed = snap
                .evaluate_at(&step.context, t)
                .map_err(|e| fail(format!("snapshot evaluation: {e}")))?;
            for (w, (&a, &b)) in step.propensities.iter().zip(&replayed).enumerate() {
                if (a - b).abs() > SIMPLEX_TOL_LOGGED {
                    return Err(fail(format!(
                        "recorded propensity {a} for arm {w} disagrees with snapshot value {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step_log() -> BanditLog {
        let space = ContextSpace::discrete(vec![0.5, 0.5]).unwrap();
        let steps = vec![
            LoggedStep {
                t: 1,
                context: Context::Discrete(0),
                arm: 0,
                reward: 1.0,
                propensities: vec![0.5, 0.5],
                muhat: vec![0.0, 0.0],
            },
            LoggedStep {
                t: 2,
                context: Context::Discrete(1),
                arm: 1,
                reward: 0.0,
                propensities: vec![0.5, 0.5],
                muhat: vec![0.0, 0.0],
            },
        ];
        let snapshots = vec![PropensitySnapshot::uniform(0, 1, 2, 2)];
        BanditLog { space, k: 2, steps, snapshots }
    }

    #[test]
    fn simplex_tolerances() {
        assert!(check_simplex(&[0.5, 0.5], SIMPLEX_TOL_CONSTRUCT).is_ok());
        assert!(check_simplex(&[0.5, 0.5 + 2e-12], SIMPLEX_TOL_CONSTRUCT).is_err());
        assert!(check_simplex(&[0.5, 0.5 + 2e-12], SIMPLEX_TOL_LOGGED).is_ok());
        assert!(check_simplex(&[], SIMPLEX_TOL_LOGGED).is_err());
        assert!(check_simplex(&[1.5, -0.5], SIMPLEX_TOL_LOGGED).is_err());
    }

    #[test]
    fn region_partition() {
        assert_eq!(region_of(&[0.0, 0.0, 9.0]).unwrap(), 0);
        assert_eq!(region_of(&[0.0, 1.0]).unwrap(), 1);
        assert_eq!(region_of(&[1.0, 0.5]).unwrap(), 2); // boundary goes low
        assert_eq!(region_of(&[0.6, 0.6]).unwrap(), 3);
        assert!(region_of(&[0.1]).is_err());
    }

    #[test]
    fn policy_table_constructors_validate() {
        assert!(PolicyTable::from_table(vec![vec![0.7, 0.3], vec![1.0, 0.0]]).is_ok());
        assert!(PolicyTable::from_table(vec![vec![0.7, 0.2]]).is_err());
        assert!(PolicyTable::from_table(vec![vec![0.7, 0.3], vec![1.0]]).is_err());
        assert!(PolicyTable::fixed_arm(3, 3).is_err());
    }

    #[test]
    fn fixed_arm_policy_is_point_mass() {
        let p = PolicyTable::fixed_arm(3, 1).unwrap();
        assert_eq!(p.probs(&Context::Discrete(7)).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(
            p.probs(&Context::Continuous(vec![1.0, 2.0])).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn region_policy_follows_partition() {
        let p = PolicyTable::region(4, [0, 1, 2, 3]).unwrap();
        let ctx = Context::Continuous(vec![0.7, 0.1, 0.0]);
        assert_eq!(p.probs(&ctx).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn correct_label_policy_reads_row_index() {
        let labels = Arc::new(vec![1usize, 0]);
        let p = PolicyTable::correct_label(2, labels).unwrap();
        let ctx = Context::Row { index: 0, features: vec![0.0] };
        assert_eq!(p.probs(&ctx).unwrap(), vec![0.0, 1.0]);
        assert!(p.probs(&Context::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn mixture_interpolates_tables() {
        let a = PolicyTable::from_table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = PolicyTable::from_table(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m = PolicyTable::mix(&a, &b, 0.25, 2).unwrap();
        assert_eq!(m.probs(&Context::Discrete(0)).unwrap(), vec![0.25, 0.75]);
        assert_eq!(m.probs(&Context::Discrete(1)).unwrap(), vec![0.0, 1.0]);
        assert!(PolicyTable::mix(&a, &b, 1.5, 2).is_err());
    }

    #[test]
    fn valid_log_passes_validation() {
        two_step_log().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_propensities() {
        let mut log = two_step_log();
        log.steps[1].propensities = vec![0.9, 0.2];
        assert!(log.validate().is_err());
    }

    #[test]
    fn validation_catches_snapshot_disagreement() {
        let mut log = two_step_log();
        log.snapshots[0] =
            PropensitySnapshot::from_table(0, 1, 2, 0.1, vec![vec![0.5, 0.5], vec![0.5, 0.5]])
                .unwrap();
        log.validate().unwrap();
        // Recorded propensities are a valid simplex above the floor, but
        // disagree with the snapshot in force.
        log.steps[1].propensities = vec![0.8, 0.2];
        let err = log.validate().unwrap_err();
        assert!(err.to_string().contains("disagrees"), "got: {err}");
    }

    #[test]
    fn validation_catches_coverage_gap() {
        let mut log = two_step_log();
        log.snapshots[0].end = 1;
        assert!(matches!(log.validate(), Err(CoreError::SnapshotCoverage { .. })));
    }

    #[test]
    fn prefix_clips_snapshots() {
        let log = two_step_log();
        let p = log.prefix(1);
        assert_eq!(p.t(), 1);
        assert_eq!(p.snapshots.len(), 1);
        assert_eq!(p.snapshots[0].end, 1);
        p.validate().unwrap();
    }

    #[test]
    fn per_step_snapshot_only_evaluates_logged_steps() {
        let mut rows = BTreeMap::new();
        rows.insert(1usize, vec![0.3, 0.7]);
        let s = PropensitySnapshot::from_per_step(0, 1, 1, 0.1, 2, rows);
        assert_eq!(s.evaluate_at(&Context::Continuous(vec![0.0]), 1).unwrap(), vec![0.3, 0.7]);
        assert!(s.evaluate(&Context::Continuous(vec![0.0])).is_err());
        assert!(s.evaluate_at(&Context::Continuous(vec![0.0]), 2).is_err());
    }
}
