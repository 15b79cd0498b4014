//! Outcome-regression models μ̂(x, w): per-cell sample means for discrete
//! contexts and per-arm ridge regressions for feature contexts.
//!
//! Models are always produced by fitting on a prefix of logged steps, so a
//! model recorded during collection can be reproduced bit-for-bit afterwards
//! by refitting on the same prefix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::solve_spd;
use crate::types::{BanditLog, Context, ContextSpace, LoggedStep};

/// Predictions are clipped to `[-PREDICTION_BOUND, PREDICTION_BOUND]`:
/// early-sample ridge fits can spike, and downstream variance guarantees
/// need uniformly bounded regression estimates.
pub const PREDICTION_BOUND: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tabular models need a discrete context space")]
    TabularNeedsDiscreteSpace,
    #[error("ridge models need a feature (continuous or row) context space")]
    RidgeNeedsFeatures,
    #[error("expected a discrete context id below {num_contexts}")]
    DiscreteContextNeeded { num_contexts: usize },
    #[error("expected a context with {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("arm {arm} out of range for {k} arms")]
    ArmOutOfRange { arm: usize, k: usize },
    #[error("ridge penalty must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("normal equations are not positive definite")]
    SingularSystem,
    #[error("refit time {t} outside 1..={max}")]
    RefitOutOfRange { t: usize, max: usize },
}

/// Which outcome model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    /// Per-(context, arm) sample means; discrete context spaces only.
    Tabular,
    /// Per-arm linear regression with an intercept and penalty `lambda` on
    /// the non-intercept coefficients; feature context spaces only.
    Ridge { lambda: f64 },
}

// ── tabular sample means ────────────────────────────────────────────────────

/// Per-(context, arm) running count and mean; empty cells predict 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMeanModel {
    counts: Vec<Vec<u64>>,
    means: Vec<Vec<f64>>,
}

impl TabularMeanModel {
    pub fn new(num_contexts: usize, k: usize) -> Self {
        TabularMeanModel { counts: vec![vec![0; k]; num_contexts], means: vec![vec![0.0; k]; num_contexts] }
    }

    pub fn observe(&mut self, x: usize, arm: usize, reward: f64) -> Result<(), ModelError> {
        let num_contexts = self.counts.len();
        let k = self.counts.first().map_or(0, Vec::len);
        if x >= num_contexts {
            return Err(ModelError::DiscreteContextNeeded { num_contexts });
        }
        if arm >= k {
            return Err(ModelError::ArmOutOfRange { arm, k });
        }
        self.counts[x][arm] += 1;
        let n = self.counts[x][arm] as f64;
        self.means[x][arm] += (reward - self.means[x][arm]) / n;
        Ok(())
    }

    pub fn count(&self, x: usize, arm: usize) -> u64 {
        self.counts[x][arm]
    }

    fn predict_into(&self, x: usize, out: &mut [f64]) -> Result<(), ModelError> {
        let row = self
            .means
            .get(x)
            .ok_or(ModelError::DiscreteContextNeeded { num_contexts: self.means.len() })?;
        for (o, &m) in out.iter_mut().zip(row) {
            *o = clip(m);
        }
        Ok(())
    }
}

// ── per-arm ridge regression ────────────────────────────────────────────────

/// Per-arm ridge regression on augmented features `(1, x)`. The penalty
/// applies to the non-intercept coefficients only; arms with no observations
/// keep all-zero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PerArmRidgeModel {
    dim: usize,
    lambda: f64,
    /// `coefficients[w] = (intercept, slope_1, ..., slope_dim)`.
    coefficients: Vec<Vec<f64>>,
}

impl PerArmRidgeModel {
    /// Fits each arm on its own rows by solving the ridge normal equations.
    pub fn fit(
        dim: usize,
        k: usize,
        lambda: f64,
        rows: impl Iterator<Item = (usize, Vec<f64>, f64)>,
    ) -> Result<Self, ModelError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ModelError::BadLambda(lambda));
        }
        // A tiny ridge keeps the normal equations positive definite when the
        // requested penalty is zero.
        let effective_lambda = lambda.max(1e-12);
        let d = dim + 1;
        let mut gram = vec![vec![vec![0.0; d]; d]; k];
        let mut moment = vec![vec![0.0; d]; k];
        let mut seen = vec![false; k];
        let mut aug = vec![0.0; d];
        for (arm, feats, y) in rows {
            if arm >= k {
                return Err(ModelError::ArmOutOfRange { arm, k });
            }
            if feats.len() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, got: feats.len() });
            }
            aug[0] = 1.0;
            aug[1..].copy_from_slice(&feats);
            seen[arm] = true;
            let g = &mut gram[arm];
            for i in 0..d {
                for j in 0..d {
                    g[i][j] += aug[i] * aug[j];
                }
                moment[arm][i] += y * aug[i];
            }
        }
        let mut coefficients = vec![vec![0.0; d]; k];
        for w in 0..k {
            if !seen[w] {
                continue;
            }
            for i in 1..d {
                gram[w][i][i] += effective_lambda;
            }
            coefficients[w] =
                solve_spd(&gram[w], &moment[w]).ok_or(ModelError::SingularSystem)?;
        }
        Ok(PerArmRidgeModel { dim, lambda, coefficients })
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    fn predict_into(&self, feats: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        if feats.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: feats.len() });
        }
        for (o, beta) in out.iter_mut().zip(&self.coefficients) {
            let mut y = beta[0];
            for (b, x) in beta[1..].iter().zip(feats) {
                y += b * x;
            }
            *o = clip(y);
        }
        Ok(())
    }
}

fn clip(y: f64) -> f64 {
    y.clamp(-PREDICTION_BOUND, PREDICTION_BOUND)
}

// ── unified model ───────────────────────────────────────────────────────────

/// An outcome model fitted on some prefix of a log.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModel {
    Tabular(TabularMeanModel),
    Ridge(PerArmRidgeModel),
}

impl OutcomeModel {
    /// Writes μ̂(ctx, ·) into `out` (length K), clipped to the prediction
    /// bound. Empty models and empty cells/arms predict 0.
    pub fn predict_into(&self, ctx: &Context, out: &mut [f64]) -> Result<(), ModelError> {
        match self {
            OutcomeModel::Tabular(m) => {
                let x = ctx.discrete_id().ok_or(ModelError::DiscreteContextNeeded {
                    num_contexts: m.counts.len(),
                })?;
                m.predict_into(x, out)
            }
            OutcomeModel::Ridge(m) => {
                let feats = ctx.features().ok_or(ModelError::RidgeNeedsFeatures)?;
                m.predict_into(feats, out)
            }
        }
    }

    /// μ̂(ctx, ·) as a fresh length-K vector.
    pub fn predict(&self, ctx: &Context, k: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; k];
        self.predict_into(ctx, &mut out)?;
        Ok(out)
    }
}

/// Fits a model of the given kind on exactly `steps`.
pub fn fit_on_steps(
    spec: ModelSpec,
    space: &ContextSpace,
    k: usize,
    steps: &[LoggedStep],
) -> Result<OutcomeModel, ModelError> {
    match spec {
        ModelSpec::Tabular => {
            let num_contexts = space.num_contexts().ok_or(ModelError::TabularNeedsDiscreteSpace)?;
            let mut model = TabularMeanModel::new(num_contexts, k);
            for step in steps {
                let x = step
                    .context
                    .discrete_id()
                    .ok_or(ModelError::DiscreteContextNeeded { num_contexts })?;
                model.observe(x, step.arm, step.reward)?;
            }
            Ok(OutcomeModel::Tabular(model))
        }
        ModelSpec::Ridge { lambda } => {
            let dim = space.dim().ok_or(ModelError::RidgeNeedsFeatures)?;
            let rows = steps.iter().map(|step| {
                let feats = step.context.features().map(<[f64]>::to_vec).unwrap_or_default();
                (step.arm, feats, step.reward)
            });
            let model = PerArmRidgeModel::fit(dim, k, lambda, rows)?;
            Ok(OutcomeModel::Ridge(model))
        }
    }
}

/// The model in force at step `t` of the log: fitted on all steps strictly
/// before the batch containing `t`, matching the collection schedule (models
/// refresh at batch boundaries and are held fixed within a batch).
///
/// `t = T + 1` yields the final model fitted on the complete log, as used by
/// the direct method.
pub fn refit_prefix(spec: ModelSpec, log: &BanditLog, t: usize) -> Result<OutcomeModel, ModelError> {
    let max = log.t() + 1;
    if t == 0 || t > max {
        return Err(ModelError::RefitOutOfRange { t, max });
    }
    let cutoff = if t == max {
        log.t()
    } else {
        let batch_start = log.snapshot_for(t).map_or(t, |s| s.start);
        batch_start - 1
    };
    fit_on_steps(spec, &log.space, log.k, &log.steps[..cutoff])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PropensitySnapshot;
    use proptest::prelude::*;

    fn ctx(feats: &[f64]) -> Context {
        Context::Continuous(feats.to_vec())
    }

    #[test]
    fn empty_models_predict_zero() {
        let space = ContextSpace::discrete(vec![0.5, 0.5]).unwrap();
        let m = fit_on_steps(ModelSpec::Tabular, &space, 3, &[]).unwrap();
        assert_eq!(m.predict(&Context::Discrete(1), 3).unwrap(), vec![0.0; 3]);

        let space = ContextSpace::Continuous { dim: 2 };
        let m = fit_on_steps(ModelSpec::Ridge { lambda: 1.0 }, &space, 3, &[]).unwrap();
        assert_eq!(m.predict(&ctx(&[1.0, -1.0]), 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn tabular_cell_is_the_sample_mean() {
        let mut m = TabularMeanModel::new(3, 2);
        m.observe(2, 1, 1.0).unwrap();
        m.observe(2, 1, 3.0).unwrap();
        m.observe(0, 0, 7.0).unwrap();
        let wrapped = OutcomeModel::Tabular(m);
        let p = wrapped.predict(&Context::Discrete(2), 2).unwrap();
        assert_eq!(p, vec![0.0, 2.0]);
        let p = wrapped.predict(&Context::Discrete(1), 2).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn ridge_recovers_an_exact_line_as_lambda_vanishes() {
        let rows = vec![(0usize, vec![1.0], 1.0), (0, vec![2.0], 2.0)];
        let m = PerArmRidgeModel::fit(1, 1, 1e-9, rows.into_iter()).unwrap();
        let mut out = [0.0];
        m.predict_into(&[3.0], &mut out).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-6, "prediction {}", out[0]);
    }

    /// Closed-form 2x2 ridge solution (intercept unpenalized) as an
    /// independent check of the linear-algebra path.
    fn ridge_1d_closed_form(data: &[(f64, f64)], lambda: f64) -> (f64, f64) {
        let n = data.len() as f64;
        let sx: f64 = data.iter().map(|(x, _)| x).sum();
        let sxx: f64 = data.iter().map(|(x, _)| x * x).sum();
        let sy: f64 = data.iter().map(|(_, y)| y).sum();
        let sxy: f64 = data.iter().map(|(x, y)| x * y).sum();
        let a = [[n, sx], [sx, sxx + lambda]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let b0 = (a[1][1] * sy - a[0][1] * sxy) / det;
        let b1 = (-a[1][0] * sy + a[0][0] * sxy) / det;
        (b0, b1)
    }

    proptest! {
        #[test]
        fn ridge_matches_the_closed_form_in_one_dimension(
            points in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..20),
            lambda in 0.01..10.0f64,
        ) {
            let rows = points.iter().map(|&(x, y)| (0usize, vec![x], y));
            let m = PerArmRidgeModel::fit(1, 1, lambda, rows).unwrap();
            let (b0, b1) = ridge_1d_closed_form(&points, lambda);
            prop_assert!((m.coefficients()[0][0] - b0).abs() < 1e-8);
            prop_assert!((m.coefficients()[0][1] - b1).abs() < 1e-8);
        }

        #[test]
        fn running_mean_equals_arithmetic_mean(
            // Stay inside the clip bound so the raw mean is observable.
            rewards in prop::collection::vec(-9.0..9.0f64, 1..50),
        ) {
            let mut m = TabularMeanModel::new(1, 1);
            for &r in &rewards {
                m.observe(0, 0, r).unwrap();
            }
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let mut out = [0.0];
            m.predict_into(0, &mut out).unwrap();
            prop_assert!((out[0] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn unseen_arms_keep_zero_coefficients() {
        let rows = vec![(0usize, vec![1.0, 2.0], 5.0)];
        let m = PerArmRidgeModel::fit(2, 3, 1.0, rows.into_iter()).unwrap();
        assert_eq!(m.coefficients()[1], vec![0.0; 3]);
        assert_eq!(m.coefficients()[2], vec![0.0; 3]);
        let mut out = [0.0; 3];
        m.predict_into(&[4.0, -2.0], &mut out).unwrap();
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert!(out[0] != 0.0);
    }

    #[test]
    fn predictions_are_clipped() {
        let rows = vec![(0usize, vec![1.0], 100.0), (0, vec![2.0], 200.0)];
        let m = PerArmRidgeModel::fit(1, 1, 1e-6, rows.into_iter()).unwrap();
        let mut out = [0.0];
        m.predict_into(&[50.0], &mut out).unwrap();
        assert_eq!(out[0], PREDICTION_BOUND);
        m.predict_into(&[-50.0], &mut out).unwrap();
        assert_eq!(out[0], -PREDICTION_BOUND);
    }

    fn batched_log() -> BanditLog {
        // Two batches of two steps over two discrete contexts and two arms.
        let space = ContextSpace::discrete(vec![0.5, 0.5]).unwrap();
        let mk = |t: usize, x: usize, arm: usize, reward: f64| LoggedStep {
            t,
            context: Context::Discrete(x),
            arm,
            reward,
            propensities: vec![0.5, 0.5],
            muhat: vec![0.0, 0.0],
        };
        BanditLog {
            space,
            k: 2,
            steps: vec![mk(1, 0, 0, 1.0), mk(2, 0, 0, 3.0), mk(3, 1, 1, 5.0), mk(4, 0, 0, 5.0)],
            snapshots: vec![
                PropensitySnapshot::uniform(0, 1, 2, 2),
                PropensitySnapshot::uniform(1, 3, 4, 2),
            ],
        }
    }

    #[test]
    fn refits_are_batch_aligned_and_deterministic() {
        let log = batched_log();
        // Steps in the first batch see the empty model.
        for t in [1, 2] {
            let m = refit_prefix(ModelSpec::Tabular, &log, t).unwrap();
            assert_eq!(m.predict(&Context::Discrete(0), 2).unwrap(), vec![0.0, 0.0]);
        }
        // Steps in the second batch see exactly the first batch, even though
        // step 3 has already happened when step 4 is played.
        for t in [3, 4] {
            let m = refit_prefix(ModelSpec::Tabular, &log, t).unwrap();
            assert_eq!(m.predict(&Context::Discrete(0), 2).unwrap(), vec![2.0, 0.0]);
            assert_eq!(m.predict(&Context::Discrete(1), 2).unwrap(), vec![0.0, 0.0]);
        }
        // t = T + 1 is the final model over all steps.
        let m = refit_prefix(ModelSpec::Tabular, &log, 5).unwrap();
        assert_eq!(m.predict(&Context::Discrete(0), 2).unwrap(), vec![3.0, 0.0]);
        assert_eq!(m.predict(&Context::Discrete(1), 2).unwrap(), vec![0.0, 5.0]);

        // Refitting twice gives identical models.
        let a = refit_prefix(ModelSpec::Tabular, &log, 4).unwrap();
        let b = refit_prefix(ModelSpec::Tabular, &log, 4).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            refit_prefix(ModelSpec::Tabular, &log, 0),
            Err(ModelError::RefitOutOfRange { .. })
        ));
        assert!(matches!(
            refit_prefix(ModelSpec::Tabular, &log, 6),
            Err(ModelError::RefitOutOfRange { .. })
        ));
    }

    #[test]
    fn ridge_refit_is_bitwise_reproducible() {
        let space = ContextSpace::Continuous { dim: 2 };
        let steps: Vec<LoggedStep> = (1..=20)
            .map(|t| LoggedStep {
                t,
                context: Context::Continuous(vec![(t as f64).sin(), (t as f64).cos()]),
                arm: t % 3,
                reward: (t as f64) * 0.1,
                propensities: vec![1.0 / 3.0; 3],
                muhat: vec![0.0; 3],
            })
            .collect();
        let a = fit_on_steps(ModelSpec::Ridge { lambda: 1.0 }, &space, 3, &steps).unwrap();
        let b = fit_on_steps(ModelSpec::Ridge { lambda: 1.0 }, &space, 3, &steps).unwrap();
        match (&a, &b) {
            (OutcomeModel::Ridge(a), OutcomeModel::Ridge(b)) => {
                assert_eq!(a.coefficients(), b.coefficients());
            }
            _ => panic!("expected ridge models"),
        }
    }
}
