//! Independent oracles for the estimator's moment identities.
//!
//! The score Γ̂ has closed-form conditional moments; this module checks them
//! against an exact brute-force enumeration over a frozen, fully discrete
//! world, and provides replication-level interval diagnostics (coverage,
//! radius, studentized samples) plus a Kolmogorov–Smirnov distance for
//! normality checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::agents::{apply_floor, collect, AgentConfig, AgentError, FloorSchedule};
use crate::envs::{true_contrast_value, true_policy_value, Env, EnvError};
use crate::estimators::{run_estimator, EstimatorError, EstimatorKind, TargetSpec};
use crate::normal::std_normal_cdf;
use crate::outcome_models::ModelSpec;
use crate::types::{Context, ContextSpace, CoreError, PolicyTable};

/// Enumeration refuses supports beyond this many (context, arm, reward)
/// atoms.
pub const MAX_ATOMS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("enumeration support has {atoms} atoms, above the limit of {MAX_ATOMS}")]
    SupportTooLarge { atoms: usize },
    #[error("frozen setup is malformed: {0}")]
    BadSetup(String),
    #[error("discrete context space required")]
    NeedsDiscrete,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

// ── frozen setups and exact enumeration ─────────────────────────────────────

/// A frozen snapshot of one collection step: context law, true means,
/// assignment probabilities, and the fitted model, all as finite tables.
///
/// Rewards are discretized to the two-point law {μ−1, μ+1} with equal mass,
/// which preserves the mean and has unit variance — the only two moments the
/// identities under test depend on.
#[derive(Debug, Clone)]
pub struct FrozenSetup {
    /// P(x) over discrete contexts.
    pub context_probs: Vec<f64>,
    /// True mean reward μ(x, w).
    pub means: Vec<Vec<f64>>,
    /// Assignment probabilities e(x, w); all entries must be positive.
    pub propensities: Vec<Vec<f64>>,
    /// Fitted model values μ̂(x, w).
    pub model: Vec<Vec<f64>>,
}

impl FrozenSetup {
    pub fn num_contexts(&self) -> usize {
        self.context_probs.len()
    }

    pub fn k(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<(), DiagnosticsError> {
        let x = self.num_contexts();
        let k = self.k();
        if x == 0 || k == 0 {
            return Err(DiagnosticsError::BadSetup("empty tables".into()));
        }
        for table in [&self.means, &self.propensities, &self.model] {
            if table.len() != x || table.iter().any(|row| row.len() != k) {
                return Err(DiagnosticsError::BadSetup("ragged or mismatched tables".into()));
            }
            if table.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DiagnosticsError::BadSetup("non-finite entry".into()));
            }
        }
        if self.context_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(DiagnosticsError::BadSetup("negative context probability".into()));
        }
        if self.propensities.iter().flatten().any(|e| !(*e > 0.0)) {
            return Err(DiagnosticsError::BadSetup("non-positive propensity".into()));
        }
        Ok(())
    }

    /// A random setup: random context law, means and model values in
    /// [−1, 1], and floored random assignment probabilities.
    pub fn random<R: Rng + ?Sized>(num_contexts: usize, k: usize, rng: &mut R) -> Self {
        let context_probs = random_simplex(num_contexts, rng);
        let table = |rng: &mut R| -> Vec<Vec<f64>> {
            (0..num_contexts)
                .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let means = table(rng);
        let model = table(rng);
        let propensities = (0..num_contexts)
            .map(|_| apply_floor(&random_simplex(k, rng), 0.05).expect("0.05 floor is feasible"))
            .collect();
        FrozenSetup { context_probs, means, propensities, model }
    }
}

/// Exact conditional moments of the score on a frozen setup.
#[derive(Debug, Clone)]
pub struct ScoreMoments {
    /// E[Γ̂ | x] per context.
    pub mean: Vec<f64>,
    /// Var(Γ̂ | x) per context.
    pub variance: Vec<f64>,
    /// Cov(Γ̂(w₁), Γ̂(w₂) | x) of the per-arm scores, indexed [x][w₁][w₂].
    pub covariance: Vec<Vec<Vec<f64>>>,
    /// Σ_x P(x)·E[Γ̂ | x].
    pub marginal_mean: f64,
}

/// Enumerates the exact distribution of the score over (context, arm,
/// reward) and returns its conditional moments.
pub fn brute_force_score_moments(
    setup: &FrozenSetup,
    policy: &PolicyTable,
) -> Result<ScoreMoments, DiagnosticsError> {
    setup.validate()?;
    let num_contexts = setup.num_contexts();
    let k = setup.k();
    let atoms = num_contexts * k * 2;
    if atoms > MAX_ATOMS {
        return Err(DiagnosticsError::SupportTooLarge { atoms });
    }

    let mut mean = vec![0.0; num_contexts];
    let mut variance = vec![0.0; num_contexts];
    let mut covariance = vec![vec![vec![0.0; k]; k]; num_contexts];
    let mut marginal_mean = 0.0;
    for x in 0..num_contexts {
        let pi = policy.probs(&Context::Discrete(x))?;
        let mu = &setup.means[x];
        let muhat = &setup.model[x];
        let e = &setup.propensities[x];
        let base: f64 = pi.iter().zip(muhat).map(|(p, m)| p * m).sum();

        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut arm_m1 = vec![0.0; k];
        let mut arm_m2 = vec![vec![0.0; k]; k];
        let mut arm_scores = vec![0.0; k];
        for w in 0..k {
            for sign in [-1.0, 1.0] {
                let y = mu[w] + sign;
                let p = e[w] * 0.5;
                let score = base + pi[w] / e[w] * (y - muhat[w]);
                m1 += p * score;
                m2 += p * score * score;
                for (v, slot) in arm_scores.iter_mut().enumerate() {
                    *slot = muhat[v] + if v == w { (y - muhat[v]) / e[v] } else { 0.0 };
                }
                for a in 0..k {
                    arm_m1[a] += p * arm_scores[a];
                    for b in 0..k {
                        arm_m2[a][b] += p * arm_scores[a] * arm_scores[b];
                    }
                }
            }
        }
        mean[x] = m1;
        variance[x] = m2 - m1 * m1;
        for a in 0..k {
            for b in 0..k {
                covariance[x][a][b] = arm_m2[a][b] - arm_m1[a] * arm_m1[b];
            }
        }
        marginal_mean += setup.context_probs[x] * m1;
    }
    Ok(ScoreMoments { mean, variance, covariance, marginal_mean })
}

// ── closed forms the enumeration is checked against ─────────────────────────

/// E[Γ̂ | x] = Σ_w π(x,w)·μ(x,w).
pub fn closed_form_conditional_mean(setup: &FrozenSetup, policy: &PolicyTable, x: usize) -> f64 {
    let pi = policy.probs(&Context::Discrete(x)).expect("tabular policy");
    pi.iter().zip(&setup.means[x]).map(|(p, m)| p * m).sum()
}

/// The excess-variance term A(x) = Σ_w π²(μ̂−μ)²/e − (Σ_w π(μ̂−μ))²,
/// which is non-negative and vanishes when the model is exact.
pub fn closed_form_a_term(setup: &FrozenSetup, policy: &PolicyTable, x: usize) -> f64 {
    let pi = policy.probs(&Context::Discrete(x)).expect("tabular policy");
    let mut quad = 0.0;
    let mut lin = 0.0;
    for w in 0..setup.k() {
        let b = setup.model[x][w] - setup.means[x][w];
        quad += pi[w] * pi[w] * b * b / setup.propensities[x][w];
        lin += pi[w] * b;
    }
    quad - lin * lin
}

/// Var(Γ̂ | x) = Σ_w π²·Var(Y|x,w)/e + A(x), with unit reward variance under
/// the two-point reward law.
pub fn closed_form_conditional_variance(
    setup: &FrozenSetup,
    policy: &PolicyTable,
    x: usize,
) -> f64 {
    let pi = policy.probs(&Context::Discrete(x)).expect("tabular policy");
    let lead: f64 =
        pi.iter().zip(&setup.propensities[x]).map(|(p, e)| p * p / e).sum();
    lead + closed_form_a_term(setup, policy, x)
}

/// Conditional covariance of the per-arm scores:
/// −(μ̂(w₁)−μ(w₁))·(μ̂(w₂)−μ(w₂)) for w₁ ≠ w₂, and the per-arm variance
/// (1 + b²)/e − b² on the diagonal.
pub fn closed_form_covariance(setup: &FrozenSetup, x: usize, w1: usize, w2: usize) -> f64 {
    let b1 = setup.model[x][w1] - setup.means[x][w1];
    let b2 = setup.model[x][w2] - setup.means[x][w2];
    if w1 == w2 {
        (1.0 + b1 * b1) / setup.propensities[x][w1] - b1 * b1
    } else {
        -b1 * b2
    }
}

/// The variance proxy Σ_w π²(x,w)/e(x,w) of a frozen setup.
pub fn frozen_variance_proxy(setup: &FrozenSetup, policy: &PolicyTable, x: usize) -> f64 {
    let pi = policy.probs(&Context::Discrete(x)).expect("tabular policy");
    pi.iter().zip(&setup.propensities[x]).map(|(p, e)| p * p / e).sum()
}

/// A point from the interior of the probability simplex over `k` coordinates,
/// bounded away from the boundary.
pub fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// The power moment S_m = Σ_w π(w)^{m+1}/e(w)^m; m = 1 is the variance
/// proxy. For any pair of probability rows the chain
/// 1 ≤ S₁ ≤ S₂ ≤ S₃ ≤ … holds (Cauchy–Schwarz), which bounds how fast
/// inverse-propensity dispersion can grow with the moment order.
pub fn power_moment(pi: &[f64], e: &[f64], m: u32) -> f64 {
    let m = m as i32;
    pi.iter().zip(e).map(|(&p, &ew)| p.powi(m + 1) / ew.powi(m)).sum()
}

// ── replication-level interval diagnostics ──────────────────────────────────

/// Configuration for a coverage run: repeatedly collect a log, estimate, and
/// compare the interval to the analytic truth.
#[derive(Clone)]
pub struct CoverageConfig {
    pub env: Env,
    pub agent: AgentConfig,
    pub model: ModelSpec,
    pub t: usize,
    pub batch_size: usize,
    pub floor: FloorSchedule,
    pub estimator: EstimatorKind,
    pub target: TargetSpec,
    pub replications: usize,
    pub level: f64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub truth: f64,
    /// Fraction of intervals containing the truth (inclusive).
    pub coverage: f64,
    pub mean_radius: f64,
    /// Studentized statistics (point − truth)/√variance, one per successful
    /// replication.
    pub tstat_samples: Vec<f64>,
    pub failures: usize,
}

/// Analytic truth of a target on an environment.
pub fn target_truth(env: &Env, target: &TargetSpec) -> Result<f64, EnvError> {
    match target {
        TargetSpec::Policy(p) => true_policy_value(env, p),
        TargetSpec::Contrast(p1, p2) => true_contrast_value(env, p1, p2),
    }
}

/// Runs replications of collect → estimate → interval and reports coverage
/// of the analytic truth, mean interval radius, and the studentized samples.
/// Deterministic in (config, master_seed); replications run in parallel on
/// independent RNG streams.
pub fn coverage_experiment(config: &CoverageConfig) -> Result<CoverageReport, DiagnosticsError> {
    let truth = target_truth(&config.env, &config.target)?;
    let outcomes: Vec<Result<(bool, f64, f64), String>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
            rng.set_stream(rep as u64 + 1);
            let log = collect(
                &config.env,
                &config.agent,
                config.model,
                config.t,
                config.batch_size,
                &config.floor,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let est = run_estimator(config.estimator, &log, config.target.as_target(), config.model)
                .map_err(|e| e.to_string())?;
            let (lo, hi) = est.confidence_interval(config.level).map_err(|e| e.to_string())?;
            let covered = lo <= truth && truth <= hi;
            Ok((covered, (hi - lo) / 2.0, est.t_statistic(truth)))
        })
        .collect();

    let mut covered = 0usize;
    let mut radius = 0.0;
    let mut tstat_samples = Vec::new();
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok((c, r, t)) => {
                covered += c as usize;
                radius += r;
                tstat_samples.push(t);
            }
            Err(_) => failures += 1,
        }
    }
    let n = tstat_samples.len().max(1) as f64;
    Ok(CoverageReport {
        truth,
        coverage: covered as f64 / n,
        mean_radius: radius / n,
        tstat_samples,
        failures,
    })
}

/// Kolmogorov–Smirnov distance between a sample and the standard normal.
pub fn ks_statistic(samples: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = std_normal_cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

/// Cross-seed dispersion of inverse propensities at matched times: for each
/// checkpoint, the maximum over (context, arm) of the coefficient of
/// variation of 1/e_t(x, w) across replications. Informational only — the
/// stability conditions this probes are assumptions on the agent, not
/// checkable from a single run. Discrete context spaces only.
#[allow(clippy::too_many_arguments)]
pub fn inverse_propensity_dispersion(
    env: &Env,
    agent: &AgentConfig,
    model: ModelSpec,
    t: usize,
    batch_size: usize,
    floor: &FloorSchedule,
    checkpoints: &[usize],
    replications: usize,
    master_seed: u64,
) -> Result<Vec<f64>, DiagnosticsError> {
    let num_contexts = match env.space() {
        ContextSpace::Discrete { probabilities } => probabilities.len(),
        ContextSpace::Continuous { .. } => return Err(DiagnosticsError::NeedsDiscrete),
    };
    let k = env.k();
    // inv[rep][checkpoint][x*k + w]
    let inv: Vec<Vec<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(rep as u64 + 1);
            let log = collect(env, agent, model, t, batch_size, floor, &mut rng)?;
            let mut per_checkpoint = Vec::with_capacity(checkpoints.len());
            for &c in checkpoints {
                let snap = log.snapshot_for(c).ok_or(CoreError::InvalidStep {
                    t: c,
                    reason: "checkpoint beyond the collected horizon".into(),
                })?;
                let mut row = Vec::with_capacity(num_contexts * k);
                for x in 0..num_contexts {
                    let e = snap.evaluate(&Context::Discrete(x))?;
                    row.extend(e.iter().map(|v| 1.0 / v));
                }
                per_checkpoint.push(row);
            }
            Ok::<_, DiagnosticsError>(per_checkpoint)
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(checkpoints.len());
    for ci in 0..checkpoints.len() {
        let mut worst: f64 = 0.0;
        for cell in 0..num_contexts * k {
            let values: Vec<f64> = inv.iter().map(|rep| rep[ci][cell]).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if mean > 0.0 {
                worst = worst.max(var.sqrt() / mean);
            }
        }
        out.push(worst);
    }
    Ok(out)
}
