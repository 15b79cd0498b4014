//! Off-policy value estimators for adaptively collected bandit logs.
//!
//! Everything is built from per-step doubly robust scores
//! Γ̂_t = Σ_w π(X_t,w)·[μ̂_t(X_t,w) + 𝟙{W_t=w}/e_t(X_t,w)·(Y_t − μ̂_t(X_t,w))],
//! combined with different weighting schemes:
//!
//! * uniform weights (the plain doubly robust estimator, and IPW when the
//!   outcome model is dropped),
//! * non-contextual adaptive weights h̃_t built from the historical average
//!   of the variance proxy Σ_w π²(x,w)/e_t(x,w),
//! * contextual adaptive weights h_t(x) built from the proxy at each context
//!   separately, with per-context normalization.
//!
//! All weighted point estimates are computed through one shared kernel in the
//! form Σ_t c_t·Γ̂_t, so schemes whose weights collapse to a constant produce
//! bit-identical results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal::std_normal_quantile;
use crate::outcome_models::OutcomeModel;
use crate::types::{BanditLog, Context, ContextSpace, CoreError, LoggedStep, PolicyTable};

/// Variance proxies are floored here before φ is applied, so a proxy that
/// vanishes identically (a contrast of identical policies) yields equal
/// weights instead of a division by zero.
pub const PROXY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no overlap: propensity {propensity:e} at step {t}, arm {arm}")]
    Overlap { t: usize, arm: usize, propensity: f64 },
    #[error("all weights are zero; no weighted estimate exists")]
    AllZeroWeights,
    #[error("cannot estimate from an empty log")]
    EmptyLog,
    #[error("policy has {policy_k} arms but the log has {log_k}")]
    ArmCountMismatch { policy_k: usize, log_k: usize },
    #[error("confidence level must be inside (0, 1), got {0}")]
    BadLevel(f64),
    #[error("oracle weights need a discrete context space")]
    OracleNeedsDiscrete,
    #[error(transparent)]
    Evaluation(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] crate::outcome_models::ModelError),
}

// ── schemes and targets ─────────────────────────────────────────────────────

/// How the variance proxy is turned into a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    /// φ(v) = √(1/v): approximately standardizes the weighted terms.
    StableVar,
    /// φ(v) = 1/v: approximately minimizes the variance of the combination.
    MinVar,
}

impl Phi {
    pub(crate) fn apply(self, proxy: f64) -> f64 {
        let v = proxy.max(PROXY_FLOOR);
        match self {
            Phi::StableVar => (1.0 / v).sqrt(),
            Phi::MinVar => 1.0 / v,
        }
    }
}

/// Which family of weights combines the per-step scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Uniform,
    NonContextual,
    Contextual,
}

/// A weighting scheme; `phi` is ignored by the `Uniform` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub family: WeightFamily,
    pub phi: Phi,
}

impl WeightScheme {
    pub fn uniform() -> Self {
        WeightScheme { family: WeightFamily::Uniform, phi: Phi::StableVar }
    }

    pub fn noncontextual(phi: Phi) -> Self {
        WeightScheme { family: WeightFamily::NonContextual, phi }
    }

    pub fn contextual(phi: Phi) -> Self {
        WeightScheme { family: WeightFamily::Contextual, phi }
    }
}

/// What is being estimated: the value of one policy, or the difference in
/// value between two. Contrasts use the difference of the per-arm policy
/// vectors everywhere a single policy's vector would appear — in the scores
/// and in the variance proxy.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    Policy(&'a PolicyTable),
    Contrast(&'a PolicyTable, &'a PolicyTable),
}

impl<'a> Target<'a> {
    fn k(&self) -> usize {
        match self {
            Target::Policy(p) => p.k(),
            Target::Contrast(p, _) => p.k(),
        }
    }

    /// The per-arm coefficient vector a(x, ·): π(x, ·) for a policy target,
    /// π₁(x, ·) − π₂(x, ·) for a contrast.
    fn row(&self, ctx: &Context) -> Result<Vec<f64>, CoreError> {
        match self {
            Target::Policy(p) => p.probs(ctx),
            Target::Contrast(p1, p2) => {
                let mut a = p1.probs(ctx)?;
                let b = p2.probs(ctx)?;
                for (ai, bi) in a.iter_mut().zip(b) {
                    *ai -= bi;
                }
                Ok(a)
            }
        }
    }
}

/// An owned target, for configurations that outlive any one estimate call.
#[derive(Clone)]
pub enum TargetSpec {
    Policy(PolicyTable),
    Contrast(PolicyTable, PolicyTable),
}

impl TargetSpec {
    pub fn as_target(&self) -> Target<'_> {
        match self {
            TargetSpec::Policy(p) => Target::Policy(p),
            TargetSpec::Contrast(p1, p2) => Target::Contrast(p1, p2),
        }
    }
}

/// Named estimator selection, as used in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Dm,
    Ipw,
    Dr,
    NonContextual(Phi),
    Contextual(Phi),
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Dm,
        EstimatorKind::Ipw,
        EstimatorKind::Dr,
        EstimatorKind::NonContextual(Phi::StableVar),
        EstimatorKind::NonContextual(Phi::MinVar),
        EstimatorKind::Contextual(Phi::StableVar),
        EstimatorKind::Contextual(Phi::MinVar),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Dm => "dm",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Dr => "dr",
            EstimatorKind::NonContextual(Phi::StableVar) => "nc_stablevar",
            EstimatorKind::NonContextual(Phi::MinVar) => "nc_minvar",
            EstimatorKind::Contextual(Phi::StableVar) => "ctx_stablevar",
            EstimatorKind::Contextual(Phi::MinVar) => "ctx_minvar",
        }
    }

    pub fn scheme(&self) -> WeightScheme {
        match self {
            EstimatorKind::Dm | EstimatorKind::Ipw | EstimatorKind::Dr => WeightScheme::uniform(),
            EstimatorKind::NonContextual(phi) => WeightScheme::noncontextual(*phi),
            EstimatorKind::Contextual(phi) => WeightScheme::contextual(*phi),
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown estimator {s:?}; expected one of {names:?}")
            })
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for EstimatorKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EstimatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ── estimates ───────────────────────────────────────────────────────────────

/// Caveats attached to an estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// The variance estimator for this point estimate has no calibration
    /// guarantee (direct method).
    pub variance_unreliable: bool,
    /// Contextual weighting applied on a continuous context space, where the
    /// interval has no theoretical guarantee.
    pub contextual_on_continuous: bool,
}

/// A point estimate with its variance estimate and the weights that
/// produced it.
#[derive(Debug, Clone, Serialize)]
pub struct WeightedEstimate {
    pub point: f64,
    pub variance: f64,
    pub scheme: WeightScheme,
    pub flags: EstimateFlags,
    /// Per-step weights as applied, normalized by their maximum (the
    /// diagonal h_t(X_t) for the contextual family).
    #[serde(skip)]
    pub weights_used: Vec<f64>,
}

impl WeightedEstimate {
    /// Two-sided normal interval `point ± z·√variance`. A zero variance
    /// yields the degenerate interval `[point, point]`.
    pub fn confidence_interval(&self, level: f64) -> Result<(f64, f64), EstimatorError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(EstimatorError::BadLevel(level));
        }
        let z = std_normal_quantile(0.5 + level / 2.0);
        let radius = z * self.variance.sqrt();
        Ok((self.point - radius, self.point + radius))
    }

    /// Studentized statistic `(point − reference)/√variance`. With zero
    /// variance this is ±∞ for a point away from the reference and 0 at it;
    /// check [`WeightedEstimate::is_degenerate`] before trusting it.
    pub fn t_statistic(&self, reference: f64) -> f64 {
        let diff = self.point - reference;
        if self.variance == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        } else {
            diff / self.variance.sqrt()
        }
    }

    /// True when the variance estimate is exactly zero, making the interval
    /// a single point and the studentized statistic unusable.
    pub fn is_degenerate(&self) -> bool {
        self.variance == 0.0
    }
}

// ── per-step scores ─────────────────────────────────────────────────────────

fn score_from_row(
    step: &LoggedStep,
    a: &[f64],
    zero_model: bool,
) -> Result<f64, EstimatorError> {
    let e = step.propensities[step.arm];
    if e <= 0.0 {
        return Err(EstimatorError::Overlap { t: step.t, arm: step.arm, propensity: e });
    }
    let mut s = 0.0;
    let mut residual = step.reward;
    if !zero_model {
        for (aw, mu) in a.iter().zip(&step.muhat) {
            s += aw * mu;
        }
        residual -= step.muhat[step.arm];
    }
    Ok(s + a[step.arm] / e * residual)
}

/// Doubly robust score of one logged step for `policy`, using the
/// prequential model prediction stored on the step.
pub fn dr_score(step: &LoggedStep, policy: &PolicyTable) -> Result<f64, EstimatorError> {
    let a = policy.probs(&step.context)?;
    score_from_row(step, &a, false)
}

/// Importance-weighted score of one logged step: the doubly robust score
/// with the outcome model dropped.
pub fn ipw_score(step: &LoggedStep, policy: &PolicyTable) -> Result<f64, EstimatorError> {
    let a = policy.probs(&step.context)?;
    score_from_row(step, &a, true)
}

/// Per-step coefficient rows and scores for a target on a log.
struct Prepared {
    rows: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

fn prepare(log: &BanditLog, target: Target, zero_model: bool) -> Result<Prepared, EstimatorError> {
    if log.t() == 0 {
        return Err(EstimatorError::EmptyLog);
    }
    if target.k() != log.k {
        return Err(EstimatorError::ArmCountMismatch { policy_k: target.k(), log_k: log.k });
    }
    let mut rows = Vec::with_capacity(log.t());
    let mut scores = Vec::with_capacity(log.t());
    for step in &log.steps {
        let a = target.row(&step.context)?;
        scores.push(score_from_row(step, &a, zero_model)?);
        rows.push(a);
    }
    Ok(Prepared { rows, scores })
}

// ── the shared weighted kernel ──────────────────────────────────────────────

/// Point and variance from scores and per-step weights:
/// point = Σ_t (h_t/Σh)·γ_t and variance = Σ h_t²(γ_t − point)²/(Σh)²,
/// computed on weights normalized by their maximum so any positive scaling
/// of `weights` gives identical results.
fn weighted_point_variance(
    scores: &[f64],
    weights: &[f64],
) -> Result<(f64, f64, Vec<f64>), EstimatorError> {
    let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(m > 0.0) {
        return Err(EstimatorError::AllZeroWeights);
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / m).collect();
    // A weighted mean of identical scores is that score with zero
    // dispersion, whatever the weights; returning it directly keeps
    // degenerate logs (constant rewards, full propensity) exact.
    if scores.windows(2).all(|s| s[0].to_bits() == s[1].to_bits()) {
        return Ok((scores[0], 0.0, normalized));
    }
    let total: f64 = normalized.iter().sum();
    let mut point = 0.0;
    for (h, g) in normalized.iter().zip(scores) {
        point += h / total * g;
    }
    let mut sq = 0.0;
    for (h, g) in normalized.iter().zip(scores) {
        let d = h * (g - point);
        sq += d * d;
    }
    Ok((point, sq / (total * total), normalized))
}

// ── proxy grids ─────────────────────────────────────────────────────────────

/// The variance proxy Σ_w a(x,w)²/e_b(x,w) of every batch's assignment rule,
/// evaluated where estimation needs it: per discrete context on finite
/// spaces, per logged step on continuous ones. This is the only quantity the
/// adaptive weights depend on, so the dense T×T weight matrix of the
/// contextual variance never has to be stored.
enum ProxyGrid {
    Discrete { tables: Vec<Vec<f64>>, ids: Vec<usize> },
    Dense { rows: Vec<Vec<f64>> },
}

fn proxy_of_row(a: &[f64], e: &[f64]) -> f64 {
    let mut v = 0.0;
    for (&aw, &ew) in a.iter().zip(e) {
        if aw != 0.0 {
            // A non-overlapping arm that the target actually plays makes the
            // proxy infinite, which φ turns into a zero weight.
            v += if ew > 0.0 { aw * aw / ew } else { f64::INFINITY };
        }
    }
    v
}

impl ProxyGrid {
    fn build(log: &BanditLog, target: Target, prepared: &Prepared) -> Result<Self, EstimatorError> {
        match &log.space {
            ContextSpace::Discrete { probabilities } => {
                let num_contexts = probabilities.len();
                let mut a_rows = Vec::with_capacity(num_contexts);
                for x in 0..num_contexts {
                    a_rows.push(target.row(&Context::Discrete(x))?);
                }
                let mut tables = Vec::with_capacity(log.snapshots.len());
                for snap in &log.snapshots {
                    let mut table = Vec::with_capacity(num_contexts);
                    for (x, a) in a_rows.iter().enumerate() {
                        let e = snap.evaluate(&Context::Discrete(x))?;
                        table.push(proxy_of_row(a, &e));
                    }
                    tables.push(table);
                }
                let ids = log
                    .steps
                    .iter()
                    .map(|s| {
                        s.context.discrete_id().ok_or(CoreError::ContextSpaceMismatch {
                            context: s.context.clone(),
                            space: log.space.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ProxyGrid::Discrete { tables, ids })
            }
            ContextSpace::Continuous { .. } => {
                let mut rows = Vec::with_capacity(log.snapshots.len());
                for snap in &log.snapshots {
                    let mut row = Vec::with_capacity(log.t());
                    for (step, a) in log.steps.iter().zip(&prepared.rows) {
                        let e = snap.evaluate(&step.context)?;
                        row.push(proxy_of_row(a, &e));
                    }
                    rows.push(row);
                }
                Ok(ProxyGrid::Dense { rows })
            }
        }
    }

    /// Proxy of batch `b`'s assignment rule at the context of 0-based step
    /// `s0`.
    fn proxy(&self, b: usize, s0: usize) -> f64 {
        match self {
            ProxyGrid::Discrete { tables, ids } => tables[b][ids[s0]],
            ProxyGrid::Dense { rows } => rows[b][s0],
        }
    }
}

// ── non-contextual weights ──────────────────────────────────────────────────

/// Feasible non-contextual weights: h̃_t = φ of the historical average of
/// the variance proxy under the assignment rule in force at `t`,
/// h̃_t = φ( (t−1)⁻¹ Σ_{s<t} Σ_w a²(X_s,w)/e_t(X_s,w) ).
///
/// The first step has no history; its proxy is evaluated at the realized
/// first context under the uniform first batch, which is that step's exact
/// conditional expectation.
///
/// A step whose historical average is exactly zero (possible early on when
/// the target contrast vanishes at every context seen so far) carries no
/// scale information; φ of a floored near-zero value would hand it a weight
/// orders of magnitude above every informed step, so such steps get weight
/// zero instead. If that zeroes every step — a contrast of identical
/// policies — the weights fall back to all-equal, recovering the plain
/// doubly robust estimator.
pub fn noncontextual_weights(
    log: &BanditLog,
    target: Target,
    phi: Phi,
) -> Result<Vec<f64>, EstimatorError> {
    let prepared = prepare(log, target, false)?;
    let grid = ProxyGrid::build(log, target, &prepared)?;
    Ok(noncontextual_from_grid(log, &grid, phi))
}

fn noncontextual_from_grid(log: &BanditLog, grid: &ProxyGrid, phi: Phi) -> Vec<f64> {
    let mut weights = vec![0.0; log.t()];
    for snap in &log.snapshots {
        let b = snap.batch;
        let mut cum = 0.0;
        for s0 in 0..snap.start - 1 {
            cum += grid.proxy(b, s0);
        }
        for t in snap.start..=snap.end {
            let v = if t == 1 { grid.proxy(b, 0) } else { cum / (t - 1) as f64 };
            weights[t - 1] = if v < PROXY_FLOOR { 0.0 } else { phi.apply(v) };
            cum += grid.proxy(b, t - 1);
        }
    }
    if weights.iter().all(|&h| h == 0.0) {
        weights.fill(1.0);
    }
    weights
}

/// The infeasible oracle weights: φ of the exact expected proxy under the
/// true context distribution, available on discrete spaces only.
pub fn oracle_noncontextual_weights(
    log: &BanditLog,
    target: Target,
    phi: Phi,
) -> Result<Vec<f64>, EstimatorError> {
    let probabilities = match &log.space {
        ContextSpace::Discrete { probabilities } => probabilities.clone(),
        ContextSpace::Continuous { .. } => return Err(EstimatorError::OracleNeedsDiscrete),
    };
    let prepared = prepare(log, target, false)?;
    let grid = ProxyGrid::build(log, target, &prepared)?;
    let mut weights = vec![0.0; log.t()];
    for snap in &log.snapshots {
        let expected: f64 = match &grid {
            ProxyGrid::Discrete { tables, .. } => probabilities
                .iter()
                .zip(&tables[snap.batch])
                .map(|(&p, &v)| p * v)
                .sum(),
            ProxyGrid::Dense { .. } => unreachable!("discrete space builds a discrete grid"),
        };
        for t in snap.start..=snap.end {
            weights[t - 1] = phi.apply(expected);
        }
    }
    Ok(weights)
}

// ── contextual weights ──────────────────────────────────────────────────────

/// Contextual weights h_t(x) = φ(Σ_w a²(x,w)/e_t(x,w)), materialized as the
/// per-(batch, context) values estimation needs, normalized by the grid
/// maximum.
pub struct ContextualWeights {
    /// Normalized h of batch `b` at each discrete context (`tables[b][x]`),
    /// or at each logged step's context (`rows[b][s0]`).
    grid: WeightGrid,
    /// Normalized diagonal h_t(X_t) per step.
    diag: Vec<f64>,
    /// N(X_t) = Σ_s h_s(X_t) per step, in normalized units.
    totals: Vec<f64>,
    /// Batch index of each step.
    batch_of: Vec<usize>,
    /// Steps per batch.
    batch_sizes: Vec<usize>,
}

enum WeightGrid {
    Discrete { tables: Vec<Vec<f64>>, ids: Vec<usize> },
    Dense { rows: Vec<Vec<f64>> },
}

impl WeightGrid {
    fn value(&self, b: usize, s0: usize) -> f64 {
        match self {
            WeightGrid::Discrete { tables, ids } => tables[b][ids[s0]],
            WeightGrid::Dense { rows } => rows[b][s0],
        }
    }
}

impl ContextualWeights {
    /// Normalized per-step diagonal weights h_t(X_t).
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// True when every weight in the grid is the same value, i.e. the
    /// contextual scheme has collapsed to uniform weighting.
    fn is_constant(&self) -> bool {
        let all_equal = |tables: &[Vec<f64>]| {
            let mut values = tables.iter().flatten();
            match values.next() {
                Some(first) => values.all(|v| v.to_bits() == first.to_bits()),
                None => true,
            }
        };
        match &self.grid {
            WeightGrid::Discrete { tables, .. } => all_equal(tables),
            WeightGrid::Dense { rows } => all_equal(rows),
        }
    }

    /// Scales every weight by `c`; estimates are invariant to this.
    pub fn scaled(mut self, c: f64) -> Self {
        let scale_tables = |tables: &mut Vec<Vec<f64>>| {
            for row in tables {
                for v in row {
                    *v *= c;
                }
            }
        };
        match &mut self.grid {
            WeightGrid::Discrete { tables, .. } => scale_tables(tables),
            WeightGrid::Dense { rows } => scale_tables(rows),
        }
        for v in &mut self.diag {
            *v *= c;
        }
        for v in &mut self.totals {
            *v *= c;
        }
        self
    }
}

/// Builds the contextual weights of a target on a log.
pub fn contextual_weights(
    log: &BanditLog,
    target: Target,
    phi: Phi,
) -> Result<ContextualWeights, EstimatorError> {
    let prepared = prepare(log, target, false)?;
    contextual_from_grid(log, &ProxyGrid::build(log, target, &prepared)?, phi)
}

fn contextual_from_grid(
    log: &BanditLog,
    grid: &ProxyGrid,
    phi: Phi,
) -> Result<ContextualWeights, EstimatorError> {
    let t_total = log.t();
    let batch_sizes: Vec<usize> = log.snapshots.iter().map(|s| s.end - s.start + 1).collect();
    let mut batch_of = vec![0usize; t_total];
    for snap in &log.snapshots {
        for t in snap.start..=snap.end {
            batch_of[t - 1] = snap.batch;
        }
    }

    // φ over the proxy grid, then normalize by the global maximum.
    let (weight_grid, max) = match grid {
        ProxyGrid::Discrete { tables, ids } => {
            let mut h: Vec<Vec<f64>> =
                tables.iter().map(|row| row.iter().map(|&v| phi.apply(v)).collect()).collect();
            let max = h.iter().flatten().copied().fold(0.0, f64::max);
            if !(max > 0.0) {
                return Err(EstimatorError::AllZeroWeights);
            }
            for row in &mut h {
                for v in row {
                    *v /= max;
                }
            }
            (WeightGrid::Discrete { tables: h, ids: ids.clone() }, max)
        }
        ProxyGrid::Dense { rows } => {
            let mut h: Vec<Vec<f64>> =
                rows.iter().map(|row| row.iter().map(|&v| phi.apply(v)).collect()).collect();
            let max = h.iter().flatten().copied().fold(0.0, f64::max);
            if !(max > 0.0) {
                return Err(EstimatorError::AllZeroWeights);
            }
            for row in &mut h {
                for v in row {
                    *v /= max;
                }
            }
            (WeightGrid::Dense { rows: h }, max)
        }
    };
    let _ = max;

    // N(X_t) = Σ_s h_s(X_t) = Σ_b n_b h_b(X_t).
    let mut totals = vec![0.0; t_total];
    for (s0, total) in totals.iter_mut().enumerate() {
        let mut n = 0.0;
        for (b, &nb) in batch_sizes.iter().enumerate() {
            n += nb as f64 * weight_grid.value(b, s0);
        }
        *total = n;
    }
    let diag: Vec<f64> = (0..t_total).map(|s0| weight_grid.value(batch_of[s0], s0)).collect();
    Ok(ContextualWeights { grid: weight_grid, diag, totals, batch_of, batch_sizes })
}

// ── public estimators ───────────────────────────────────────────────────────

/// The plain doubly robust estimator: uniformly weighted scores, variance
/// Σ(Γ̂_t − Q̂)²/T².
pub fn estimate_dr(log: &BanditLog, target: Target) -> Result<WeightedEstimate, EstimatorError> {
    let prepared = prepare(log, target, false)?;
    let (point, variance, weights_used) =
        weighted_point_variance(&prepared.scores, &vec![1.0; prepared.scores.len()])?;
    Ok(WeightedEstimate {
        point,
        variance,
        scheme: WeightScheme::uniform(),
        flags: EstimateFlags::default(),
        weights_used,
    })
}

/// Importance-weighted estimator: the doubly robust estimator with the
/// outcome model dropped.
pub fn estimate_ipw(log: &BanditLog, target: Target) -> Result<WeightedEstimate, EstimatorError> {
    let prepared = prepare(log, target, true)?;
    let (point, variance, weights_used) =
        weighted_point_variance(&prepared.scores, &vec![1.0; prepared.scores.len()])?;
    Ok(WeightedEstimate {
        point,
        variance,
        scheme: WeightScheme::uniform(),
        flags: EstimateFlags::default(),
        weights_used,
    })
}

/// Direct method: the average of the final fitted model over logged contexts,
/// Q̂ = T⁻¹Σ_tΣ_w μ̂_T(X_t,w)·a(X_t,w). Its variance estimator is shipped for
/// completeness but flagged: it has no coverage guarantee.
pub fn estimate_dm(
    log: &BanditLog,
    target: Target,
    final_model: &OutcomeModel,
) -> Result<WeightedEstimate, EstimatorError> {
    if log.t() == 0 {
        return Err(EstimatorError::EmptyLog);
    }
    if target.k() != log.k {
        return Err(EstimatorError::ArmCountMismatch { policy_k: target.k(), log_k: log.k });
    }
    let t_total = log.t() as f64;
    let mut mu = vec![0.0; log.k];
    let mut terms = Vec::with_capacity(log.t());
    for step in &log.steps {
        let a = target.row(&step.context)?;
        final_model.predict_into(&step.context, &mut mu)?;
        terms.push(a.iter().zip(&mu).map(|(aw, m)| aw * m).sum::<f64>());
    }
    let point = terms.iter().sum::<f64>() / t_total;
    let variance =
        terms.iter().map(|m| (point - m) * (point - m)).sum::<f64>() / (t_total * t_total);
    Ok(WeightedEstimate {
        point,
        variance,
        scheme: WeightScheme::uniform(),
        flags: EstimateFlags { variance_unreliable: true, ..Default::default() },
        weights_used: vec![1.0; log.t()],
    })
}

/// Weighted estimator with externally supplied non-contextual weights.
pub fn estimate_noncontextual_from_weights(
    log: &BanditLog,
    target: Target,
    weights: &[f64],
    scheme: WeightScheme,
) -> Result<WeightedEstimate, EstimatorError> {
    let prepared = prepare(log, target, false)?;
    let (point, variance, weights_used) = weighted_point_variance(&prepared.scores, weights)?;
    Ok(WeightedEstimate {
        point,
        variance,
        scheme,
        flags: EstimateFlags::default(),
        weights_used,
    })
}

/// Weighted estimator with externally supplied contextual weights:
/// point Q̂ = Σ_t [h_t(X_t)/N(X_t)]·Γ̂_t with N(x) = Σ_s h_s(x), and variance
/// V̂ = Σ_t (h_t(X_t)/N(X_t)·Γ̂_t − g_{b(t)})² with
/// g_b = Σ_s h_b(X_s)·h_s(X_s)/N(X_s)²·Γ̂_s, which is the full pairwise sum
/// grouped by batch (weights are constant within a batch).
pub fn estimate_contextual_from_weights(
    log: &BanditLog,
    target: Target,
    weights: &ContextualWeights,
    scheme: WeightScheme,
) -> Result<WeightedEstimate, EstimatorError> {
    let prepared = prepare(log, target, false)?;
    let scores = &prepared.scores;
    let t_total = log.t();

    if !weights.diag.iter().any(|&h| h > 0.0) {
        return Err(EstimatorError::AllZeroWeights);
    }
    let flags = EstimateFlags {
        contextual_on_continuous: matches!(log.space, ContextSpace::Continuous { .. }),
        ..Default::default()
    };
    // A constant weight grid collapses the estimator exactly to the uniform
    // mean (c_t = 1/T and g_b = point/T), so evaluate it through the shared
    // kernel and stay bit-identical with the other families.
    if weights.is_constant() {
        let (point, variance, weights_used) =
            weighted_point_variance(scores, &vec![1.0; t_total])?;
        return Ok(WeightedEstimate { point, variance, scheme, flags, weights_used });
    }
    // c_t = h_t(X_t)/N(X_t); steps whose context got zero total weight
    // contribute nothing.
    let c: Vec<f64> = (0..t_total)
        .map(|s0| if weights.totals[s0] > 0.0 { weights.diag[s0] / weights.totals[s0] } else { 0.0 })
        .collect();
    let mut point = 0.0;
    for (ct, g) in c.iter().zip(scores) {
        point += ct * g;
    }

    // g_b = Σ_s h_b(X_s) · [h_s(X_s)/N(X_s)²·Γ̂_s].
    let inner: Vec<f64> = (0..t_total)
        .map(|s0| {
            let n = weights.totals[s0];
            if n > 0.0 {
                weights.diag[s0] / (n * n) * scores[s0]
            } else {
                0.0
            }
        })
        .collect();
    let num_batches = weights.batch_sizes.len();
    let mut g = vec![0.0; num_batches];
    for (b, gb) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for s0 in 0..t_total {
            acc += weights.grid.value(b, s0) * inner[s0];
        }
        *gb = acc;
    }
    let mut variance = 0.0;
    for s0 in 0..t_total {
        let d = c[s0] * scores[s0] - g[weights.batch_of[s0]];
        variance += d * d;
    }

    Ok(WeightedEstimate { point, variance, scheme, flags, weights_used: weights.diag.clone() })
}

/// Weighted estimator dispatch: Uniform reduces to the doubly robust
/// estimator; the adaptive families build their weights from the log.
pub fn estimate_weighted(
    log: &BanditLog,
    target: Target,
    scheme: WeightScheme,
) -> Result<WeightedEstimate, EstimatorError> {
    match scheme.family {
        WeightFamily::Uniform => estimate_dr(log, target),
        WeightFamily::NonContextual => {
            let weights = noncontextual_weights(log, target, scheme.phi)?;
            estimate_noncontextual_from_weights(log, target, &weights, scheme)
        }
        WeightFamily::Contextual => {
            let weights = contextual_weights(log, target, scheme.phi)?;
            estimate_contextual_from_weights(log, target, &weights, scheme)
        }
    }
}

/// Runs a named estimator on a log. The direct method refits the outcome
/// model on the whole log; every other kind uses the prequential predictions
/// stored on the steps.
pub fn run_estimator(
    kind: EstimatorKind,
    log: &BanditLog,
    target: Target,
    model_spec: crate::outcome_models::ModelSpec,
) -> Result<WeightedEstimate, EstimatorError> {
    match kind {
        EstimatorKind::Dm => {
            let model = crate::outcome_models::refit_prefix(model_spec, log, log.t() + 1)?;
            estimate_dm(log, target, &model)
        }
        EstimatorKind::Ipw => estimate_ipw(log, target),
        EstimatorKind::Dr => estimate_dr(log, target),
        EstimatorKind::NonContextual(phi) => {
            estimate_weighted(log, target, WeightScheme::noncontextual(phi))
        }
        EstimatorKind::Contextual(phi) => {
            estimate_weighted(log, target, WeightScheme::contextual(phi))
        }
    }
}

/// Value-difference estimator: per-step scores are differences of doubly
/// robust scores, and the weights use the contrast variance proxy.
pub fn estimate_contrast(
    log: &BanditLog,
    policy_1: &PolicyTable,
    policy_2: &PolicyTable,
    scheme: WeightScheme,
) -> Result<WeightedEstimate, EstimatorError> {
    estimate_weighted(log, Target::Contrast(policy_1, policy_2), scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{collect, AgentConfig, FloorSchedule};
    use crate::envs::{Env, SyntheticEnv};
    use crate::outcome_models::{refit_prefix, ModelSpec};
    use crate::types::PropensitySnapshot;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn step(
        t: usize,
        x: usize,
        arm: usize,
        reward: f64,
        propensities: Vec<f64>,
        muhat: Vec<f64>,
    ) -> LoggedStep {
        LoggedStep { t, context: Context::Discrete(x), arm, reward, propensities, muhat }
    }

    #[test]
    fn dr_score_examples() {
        // Deterministic policy on the taken arm with propensity 1 telescopes
        // to the reward.
        let s = step(1, 0, 1, 2.5, vec![0.0, 1.0], vec![0.7, -0.3]);
        let p = PolicyTable::fixed_arm(2, 1).unwrap();
        assert_eq!(dr_score(&s, &p).unwrap(), 2.5);

        // Deterministic policy on a non-taken arm returns the model value.
        let s = step(1, 0, 1, 2.5, vec![0.5, 0.5], vec![0.7, -0.3]);
        let p = PolicyTable::fixed_arm(2, 0).unwrap();
        assert_eq!(dr_score(&s, &p).unwrap(), 0.7);

        // Direct formula evaluation.
        let s = step(1, 0, 0, 2.0, vec![0.25, 0.75], vec![1.0, 1.0]);
        let p = PolicyTable::from_table(vec![vec![0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(dr_score(&s, &p).unwrap(), 3.0, epsilon = 1e-15);

        // Zero propensity at the taken arm is an overlap failure.
        let s = step(1, 0, 0, 2.0, vec![0.0, 1.0], vec![0.0, 0.0]);
        let err = dr_score(&s, &p).unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }

    #[test]
    fn ipw_score_is_the_zero_model_score() {
        let s = step(1, 0, 0, 2.0, vec![0.25, 0.75], vec![1.0, 1.0]);
        let p = PolicyTable::from_table(vec![vec![0.5, 0.5]]).unwrap();
        assert_eq!(ipw_score(&s, &p).unwrap(), 0.5 * 2.0 / 0.25);

        // On a log whose stored predictions are all zero, DR and IPW match
        // bit for bit.
        let mut zeroed = s.clone();
        zeroed.muhat = vec![0.0, 0.0];
        assert_eq!(dr_score(&zeroed, &p).unwrap(), ipw_score(&zeroed, &p).unwrap());
    }

    /// Uniform two-context log with hand-set snapshots for weight oracles.
    fn tiny_log(propensity_tables: Vec<(usize, usize, Vec<Vec<f64>>)>, steps: Vec<LoggedStep>) -> BanditLog {
        let k = steps[0].propensities.len();
        let snapshots = propensity_tables
            .into_iter()
            .enumerate()
            .map(|(b, (start, end, rows))| {
                PropensitySnapshot::from_table(b, start, end, 0.01, rows).unwrap()
            })
            .collect();
        BanditLog {
            space: ContextSpace::discrete(vec![0.5, 0.5]).unwrap(),
            k,
            steps,
            snapshots,
        }
    }

    #[test]
    fn noncontextual_weights_match_a_hand_computation() {
        // Three steps: batch 0 covers steps 1-2 with propensities [0.5, 0.5]
        // everywhere; batch 1 covers step 3 with context-dependent rows.
        let log = tiny_log(
            vec![
                (1, 2, vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
                (3, 3, vec![vec![0.8, 0.2], vec![0.4, 0.6]]),
            ],
            vec![
                step(1, 0, 0, 1.0, vec![0.5, 0.5], vec![0.0, 0.0]),
                step(2, 1, 1, 0.5, vec![0.5, 0.5], vec![0.0, 0.0]),
                step(3, 0, 0, 2.0, vec![0.8, 0.2], vec![0.0, 0.0]),
            ],
        );
        let pi = PolicyTable::fixed_arm(2, 0).unwrap();
        let w = noncontextual_weights(&log, Target::Policy(&pi), Phi::StableVar).unwrap();
        // t=1: proxy at own context under uniform = 1/0.5 = 2.
        // t=2: average of proxy at X_1 under batch-0 rule = 2.
        // t=3: average over X_1 (ctx 0) and X_2 (ctx 1) under batch-1 rule:
        //      (1/0.8 + 1/0.4)/2 = (1.25 + 2.5)/2 = 1.875.
        assert_abs_diff_eq!(w[0], (1.0f64 / 2.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], (1.0f64 / 2.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], (1.0f64 / 1.875).sqrt(), epsilon = 1e-15);

        let w = noncontextual_weights(&log, Target::Policy(&pi), Phi::MinVar).unwrap();
        assert_abs_diff_eq!(w[2], 1.0 / 1.875, epsilon = 1e-15);
    }

    #[test]
    fn uniform_propensities_give_the_constant_weight() {
        // Deterministic target on uniform propensities: proxy = K everywhere.
        let rows = vec![vec![0.25; 4], vec![0.25; 4]];
        let steps = (1..=6)
            .map(|t| step(t, t % 2, 0, 1.0, vec![0.25; 4], vec![0.0; 4]))
            .collect();
        let log = tiny_log(vec![(1, 3, rows.clone()), (4, 6, rows)], steps);
        let pi = PolicyTable::fixed_arm(4, 0).unwrap();
        let w = noncontextual_weights(&log, Target::Policy(&pi), Phi::StableVar).unwrap();
        for &h in &w {
            assert_abs_diff_eq!(h, 0.5, epsilon = 1e-15); // K^(-1/2) = 1/2
        }
        let w = noncontextual_weights(&log, Target::Policy(&pi), Phi::MinVar).unwrap();
        for &h in &w {
            assert_abs_diff_eq!(h, 0.25, epsilon = 1e-15); // 1/K
        }
    }

    #[test]
    fn identical_contrast_gives_equal_weights_and_zero_estimate() {
        let rows = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let steps = (1..=4)
            .map(|t| step(t, t % 2, 0, (t as f64).sin(), vec![0.5, 0.5], vec![0.1, 0.2]))
            .collect();
        let log = tiny_log(vec![(1, 4, rows)], steps);
        let pi = PolicyTable::fixed_arm(2, 0).unwrap();
        let w =
            noncontextual_weights(&log, Target::Contrast(&pi, &pi), Phi::StableVar).unwrap();
        for &h in &w {
            assert_eq!(h, w[0]);
            assert!(h > 0.0);
        }
        let est = estimate_contrast(&log, &pi, &pi, WeightScheme::noncontextual(Phi::StableVar))
            .unwrap();
        assert_eq!(est.point, 0.0);
        assert_eq!(est.variance, 0.0);
    }

    #[test]
    fn dr_equals_weighted_uniform_bit_for_bit() {
        let log = signal_like_log(3);
        let pi = PolicyTable::fixed_arm(5, 0).unwrap();
        let dr = estimate_dr(&log, Target::Policy(&pi)).unwrap();
        let wu = estimate_weighted(&log, Target::Policy(&pi), WeightScheme::uniform()).unwrap();
        assert_eq!(dr.point.to_bits(), wu.point.to_bits());
        assert_eq!(dr.variance.to_bits(), wu.variance.to_bits());
    }

    /// A small adaptively collected log for integration-style tests.
    fn signal_like_log(seed: u64) -> BanditLog {
        let env = Env::Synthetic(SyntheticEnv::example1());
        let mut rng = StdRng::seed_from_u64(seed);
        collect(
            &env,
            &AgentConfig::tabular(400),
            ModelSpec::Tabular,
            400,
            100,
            &FloorSchedule::paper_faithful(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn constant_weights_collapse_every_family_to_dr() {
        // A fully uniform log with a deterministic target: proxies are K at
        // every (batch, context), so all weights normalize to exactly 1.
        let rows = vec![vec![0.2; 5]; 2];
        let mut rng = StdRng::seed_from_u64(5);
        let steps: Vec<LoggedStep> = (1..=40)
            .map(|t| {
                step(
                    t,
                    rng.gen_range(0..2),
                    rng.gen_range(0..5),
                    rng.gen::<f64>(),
                    vec![0.2; 5],
                    vec![0.1, 0.2, 0.3, 0.4, 0.5],
                )
            })
            .collect();
        let log = tiny_log(vec![(1, 20, rows.clone()), (21, 40, rows)], steps);
        let pi = PolicyTable::fixed_arm(5, 2).unwrap();
        let target = Target::Policy(&pi);

        let dr = estimate_dr(&log, target).unwrap();
        for phi in [Phi::StableVar, Phi::MinVar] {
            let nc = estimate_weighted(&log, target, WeightScheme::noncontextual(phi)).unwrap();
            assert_eq!(dr.point.to_bits(), nc.point.to_bits(), "nc point, {phi:?}");
            assert_eq!(dr.variance.to_bits(), nc.variance.to_bits(), "nc variance, {phi:?}");

            let cx = estimate_weighted(&log, target, WeightScheme::contextual(phi)).unwrap();
            assert_eq!(dr.point.to_bits(), cx.point.to_bits(), "contextual point, {phi:?}");
            let rel = ((cx.variance - dr.variance) / dr.variance).abs();
            assert!(rel < 1e-12, "contextual variance off by {rel:e}");
        }
    }

    #[test]
    fn contextual_variance_matches_the_literal_double_sum() {
        let log = signal_like_log(11);
        let pi = PolicyTable::fixed_arm(5, 0).unwrap();
        let target = Target::Policy(&pi);
        for phi in [Phi::StableVar, Phi::MinVar] {
            let cw = contextual_weights(&log, target, phi).unwrap();
            let est = estimate_contextual_from_weights(
                &log,
                target,
                &cw,
                WeightScheme::contextual(phi),
            )
            .unwrap();

            // Literal evaluation: h_t(X_s) for every pair, then
            // V = Σ_t (c_t Γ_t − Σ_s h_t(X_s) h_s(X_s)/N(X_s)² Γ_s)².
            let prepared = prepare(&log, target, false).unwrap();
            let t_total = log.t();
            let h = |t: usize, s: usize| -> f64 {
                let b = log.batch_of(t).unwrap();
                let e = log.snapshots[b].evaluate(&log.steps[s - 1].context).unwrap();
                let a = pi.probs(&log.steps[s - 1].context).unwrap();
                phi.apply(proxy_of_row(&a, &e))
            };
            let n = |s: usize| -> f64 { (1..=t_total).map(|u| h(u, s)).sum() };
            let mut expected = 0.0;
            let ns: Vec<f64> = (1..=t_total).map(n).collect();
            let hd: Vec<f64> = (1..=t_total).map(|s| h(s, s)).collect();
            for t in 1..=t_total {
                let ct = hd[t - 1] / ns[t - 1];
                let mut g = 0.0;
                for s in 1..=t_total {
                    g += h(t, s) * hd[s - 1] / (ns[s - 1] * ns[s - 1])
                        * prepared.scores[s - 1];
                }
                let d = ct * prepared.scores[t - 1] - g;
                expected += d * d;
            }
            let rel = ((est.variance - expected) / expected).abs();
            assert!(rel < 1e-10, "{phi:?}: variance {} vs literal {expected}", est.variance);

            // The point estimate matches the literal form too.
            let mut point = 0.0;
            for t in 1..=t_total {
                point += hd[t - 1] / ns[t - 1] * prepared.scores[t - 1];
            }
            assert_abs_diff_eq!(est.point, point, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_context_contextual_equals_noncontextual_on_shared_weights() {
        let rows = vec![vec![0.7, 0.3]];
        let steps: Vec<LoggedStep> = (1..=8)
            .map(|t| step(t, 0, t % 2, (t as f64).cos(), vec![0.7, 0.3], vec![0.0, 0.0]))
            .collect();
        let mut log = tiny_log(vec![(1, 4, rows.clone()), (5, 8, rows)], steps);
        log.space = ContextSpace::discrete(vec![1.0]).unwrap();
        let pi = PolicyTable::from_table(vec![vec![0.6, 0.4]]).unwrap();
        let target = Target::Policy(&pi);
        let cw = contextual_weights(&log, target, Phi::MinVar).unwrap();
        let cx =
            estimate_contextual_from_weights(&log, target, &cw, WeightScheme::contextual(Phi::MinVar))
                .unwrap();
        let nc = estimate_noncontextual_from_weights(
            &log,
            target,
            cw.diag(),
            WeightScheme::noncontextual(Phi::MinVar),
        )
        .unwrap();
        let rel = ((cx.point - nc.point) / nc.point).abs();
        assert!(rel < 1e-12, "points differ: {} vs {}", cx.point, nc.point);
    }

    proptest! {
        #[test]
        fn weight_scale_invariance(
            scale_pow in -30..30i32,
            seed in 0..50u64,
        ) {
            let log = signal_like_log(seed % 5);
            let pi = PolicyTable::fixed_arm(5, 1).unwrap();
            let target = Target::Policy(&pi);
            let scheme = WeightScheme::noncontextual(Phi::StableVar);
            let weights = noncontextual_weights(&log, target, Phi::StableVar).unwrap();
            let base = estimate_noncontextual_from_weights(&log, target, &weights, scheme).unwrap();

            // Powers of two scale exactly.
            let c = (2.0f64).powi(scale_pow);
            let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
            let est = estimate_noncontextual_from_weights(&log, target, &scaled, scheme).unwrap();
            prop_assert_eq!(base.point.to_bits(), est.point.to_bits());
            prop_assert_eq!(base.variance.to_bits(), est.variance.to_bits());

            // Arbitrary positive scales match to relative 1e-12.
            let c = 1.0 + (seed as f64) * 0.37;
            let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
            let est = estimate_noncontextual_from_weights(&log, target, &scaled, scheme).unwrap();
            prop_assert!(((base.point - est.point) / base.point).abs() < 1e-12);

            // Contextual weights are scale invariant the same way.
            let cscheme = WeightScheme::contextual(Phi::StableVar);
            let cw = contextual_weights(&log, target, Phi::StableVar).unwrap();
            let cbase = estimate_contextual_from_weights(&log, target, &cw, cscheme).unwrap();
            let cw2 = contextual_weights(&log, target, Phi::StableVar).unwrap()
                .scaled((2.0f64).powi(scale_pow));
            let cest = estimate_contextual_from_weights(&log, target, &cw2, cscheme).unwrap();
            prop_assert_eq!(cbase.point.to_bits(), cest.point.to_bits());
            prop_assert_eq!(cbase.variance.to_bits(), cest.variance.to_bits());
        }
    }

    #[test]
    fn power_inequalities_hold_on_random_simplex_pairs() {
        let mut rng = StdRng::seed_from_u64(2024);
        for _ in 0..10_000 {
            let k = rng.gen_range(2..6);
            let draw_simplex = |rng: &mut StdRng| -> Vec<f64> {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let pi = draw_simplex(&mut rng);
            let e = draw_simplex(&mut rng);
            let s2: f64 = pi.iter().zip(&e).map(|(p, q)| p * p / q).sum();
            let s3: f64 = pi.iter().zip(&e).map(|(p, q)| p * p * p / (q * q)).sum();
            let s4: f64 = pi.iter().zip(&e).map(|(p, q)| p * p * p * p / (q * q * q)).sum();
            assert!(s2 >= 1.0 - 1e-12, "sum pi^2/e = {s2}");
            assert!(s3 >= s2 * (1.0 - 1e-12), "{s3} < {s2}");
            assert!(s4 >= s3 * (1.0 - 1e-12), "{s4} < {s3}");
        }
    }

    #[test]
    fn degenerate_overlap_is_finite_or_typed() {
        // Tiny but positive propensity at the taken arm: finite estimate.
        let rows = vec![vec![1.0 - 1e-12, 1e-12], vec![0.5, 0.5]];
        let steps = vec![
            step(1, 0, 1, 1.0, vec![1.0 - 1e-12, 1e-12], vec![0.0, 0.0]),
            step(2, 1, 0, 1.0, vec![0.5, 0.5], vec![0.0, 0.0]),
        ];
        let log = tiny_log(vec![(1, 2, rows)], steps);
        let pi = PolicyTable::fixed_arm(2, 1).unwrap();
        for scheme in [
            WeightScheme::uniform(),
            WeightScheme::noncontextual(Phi::StableVar),
            WeightScheme::contextual(Phi::MinVar),
        ] {
            let est = estimate_weighted(&log, Target::Policy(&pi), scheme).unwrap();
            assert!(est.point.is_finite(), "{scheme:?}");
            assert!(est.variance.is_finite(), "{scheme:?}");
        }

        // Exactly zero propensity at the taken arm: a typed overlap error.
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let steps = vec![step(1, 0, 1, 1.0, vec![1.0, 0.0], vec![0.0, 0.0])];
        let log = tiny_log(vec![(1, 1, rows)], steps);
        assert!(matches!(
            estimate_dr(&log, Target::Policy(&pi)),
            Err(EstimatorError::Overlap { t: 1, arm: 1, .. })
        ));
    }

    #[test]
    fn oracle_weights_average_the_proxy_over_the_context_law() {
        let log = tiny_log(
            vec![(1, 2, vec![vec![0.8, 0.2], vec![0.4, 0.6]])],
            vec![
                step(1, 0, 0, 1.0, vec![0.8, 0.2], vec![0.0, 0.0]),
                step(2, 1, 1, 0.0, vec![0.4, 0.6], vec![0.0, 0.0]),
            ],
        );
        let pi = PolicyTable::fixed_arm(2, 0).unwrap();
        let w = oracle_noncontextual_weights(&log, Target::Policy(&pi), Phi::MinVar).unwrap();
        // E[proxy] = 0.5/0.8 + 0.5/0.4 = 1.875 under the half/half context law.
        assert_abs_diff_eq!(w[0], 1.0 / 1.875, epsilon = 1e-15);
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn confidence_interval_arithmetic() {
        let est = WeightedEstimate {
            point: 0.5,
            variance: 0.01,
            scheme: WeightScheme::uniform(),
            flags: EstimateFlags::default(),
            weights_used: vec![1.0],
        };
        let (lo, hi) = est.confidence_interval(0.95).unwrap();
        assert_abs_diff_eq!(lo, 0.304, epsilon = 1e-3);
        assert_abs_diff_eq!(hi, 0.696, epsilon = 1e-3);
        // The implied quantile is the standard two-sided z.
        assert_abs_diff_eq!((hi - 0.5) / 0.1, 1.959964, epsilon = 1e-6);

        let degenerate = WeightedEstimate { variance: 0.0, ..est.clone() };
        assert_eq!(degenerate.confidence_interval(0.95).unwrap(), (0.5, 0.5));
        assert!(degenerate.is_degenerate());
        assert_eq!(degenerate.t_statistic(0.5), 0.0);
        assert_eq!(degenerate.t_statistic(0.4), f64::INFINITY);
        assert!(est.confidence_interval(1.0).is_err());
    }

    #[test]
    fn adaptive_agent_shifts_the_contextual_proxy_by_context() {
        // Under a signal-learning agent the proxy of the always-best policy
        // falls where the policy's arm gets explored more (context 0) and
        // rises where it gets starved (context 1).
        let env = Env::Synthetic(SyntheticEnv::example1());
        let pi = PolicyTable::fixed_arm(5, 0).unwrap();
        let mut early0 = Vec::new();
        let mut late0 = Vec::new();
        let mut early1 = Vec::new();
        let mut late1 = Vec::new();
        for seed in 0..100 {
            let mut rng = StdRng::seed_from_u64(1000 + seed);
            let log = collect(
                &env,
                &AgentConfig::tabular(300),
                ModelSpec::Tabular,
                1000,
                100,
                &FloorSchedule::paper_faithful(),
                &mut rng,
            )
            .unwrap();
            let proxy_at = |t: usize, x: usize| -> f64 {
                let snap = log.snapshot_for(t).unwrap();
                let e = snap.evaluate(&Context::Discrete(x)).unwrap();
                let a = pi.probs(&Context::Discrete(x)).unwrap();
                proxy_of_row(&a, &e)
            };
            early0.push(proxy_at(100, 0));
            late0.push(proxy_at(1000, 0));
            early1.push(proxy_at(100, 1));
            late1.push(proxy_at(1000, 1));
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(
            median(&mut late0) < median(&mut early0),
            "proxy at the favored context should fall"
        );
        assert!(
            median(&mut late1) > median(&mut early1),
            "proxy at a starved context should rise"
        );
    }

    #[test]
    fn estimator_kind_round_trips_names() {
        for kind in EstimatorKind::ALL {
            assert_eq!(kind.name().parse::<EstimatorKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<EstimatorKind>().is_err());
        let json = serde_json::to_string(&EstimatorKind::NonContextual(Phi::MinVar)).unwrap();
        assert_eq!(json, "\"nc_minvar\"");
        let back: EstimatorKind = serde_json::from_str(&json).unwrap();
        assert_eq!(back, EstimatorKind::NonContextual(Phi::MinVar));
    }

    #[test]
    fn dm_averages_the_final_model() {
        let log = signal_like_log(21);
        let pi = PolicyTable::fixed_arm(5, 0).unwrap();
        let model = refit_prefix(ModelSpec::Tabular, &log, log.t() + 1).unwrap();
        let est = estimate_dm(&log, Target::Policy(&pi), &model).unwrap();
        assert!(est.flags.variance_unreliable);
        // Direct recomputation.
        let mut total = 0.0;
        for s in &log.steps {
            total += model.predict(&s.context, 5).unwrap()[0];
        }
        assert_abs_diff_eq!(est.point, total / log.t() as f64, epsilon = 1e-12);

        // A zero model gives a zero point.
        let empty = refit_prefix(ModelSpec::Tabular, &log, 1).unwrap();
        let est = estimate_dm(&log, Target::Policy(&pi), &empty).unwrap();
        assert_eq!(est.point, 0.0);
    }
}
