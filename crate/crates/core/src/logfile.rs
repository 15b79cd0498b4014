//! Plain-text persistence for collected logs.
//!
//! The format is line-oriented and self-describing:
//!
//! ```text
//! banditope-log v1
//! space discrete 0.6 0.1 0.1 0.1 0.1
//! arms 5
//! snapshot 0 1 100 0.2 uniform
//! snapshot 1 101 200 0.05 table 0.7 0.1 0.1 0.05 0.05 ...
//! step 1 2 0.5341 x 3 e 0.2 0.2 0.2 0.2 0.2 mu 0 0 0 0 0
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write → read → write cycle is byte-identical. Snapshot payloads mirror
//! how the assignment rule was represented: `uniform`, a discrete context
//! `table`, a feature-space `region` table, or `persteps` for rules that
//! were only evaluated at the logged contexts (their per-step propensities
//! live on the step rows, and reading restores exactly that evaluator).
//! Contexts appear as `x <id>` (discrete), `f <features…>` (continuous), or
//! `row <index> <features…>` (dataset-backed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{
    BanditLog, Context, ContextSpace, CoreError, LoggedStep, PropensitySnapshot,
    SnapshotEvaluator,
};

const HEADER: &str = "banditope-log v1";

#[derive(Debug, Error)]
pub enum LogfileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] CoreError),
}

// ── writing ─────────────────────────────────────────────────────────────────

fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, " {v}").expect("writing to a String cannot fail");
    }
}

/// Serializes a validated log to the text format.
pub fn write_log<W: Write>(log: &BanditLog, mut w: W) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    match &log.space {
        ContextSpace::Discrete { probabilities } => {
            out.push_str("space discrete");
            push_floats(&mut out, probabilities);
        }
        ContextSpace::Continuous { dim } => {
            write!(out, "space continuous {dim}").unwrap();
        }
    }
    out.push('\n');
    writeln!(out, "arms {}", log.k).unwrap();

    for snap in &log.snapshots {
        write!(out, "snapshot {} {} {} {}", snap.batch, snap.start, snap.end, snap.floor)
            .unwrap();
        match &snap.evaluator {
            SnapshotEvaluator::Uniform => out.push_str(" uniform"),
            SnapshotEvaluator::Table(rows) => {
                out.push_str(" table");
                for row in rows.iter() {
                    push_floats(&mut out, row);
                }
            }
            SnapshotEvaluator::RegionTable(rows) => {
                out.push_str(" region");
                for row in rows.iter() {
                    push_floats(&mut out, row);
                }
            }
            // Rules without a portable table were only ever evaluated at the
            // logged contexts; those evaluations are already on the step
            // rows.
            SnapshotEvaluator::Fn(_) | SnapshotEvaluator::PerStep(_) => {
                out.push_str(" persteps");
            }
        }
        out.push('\n');
    }

    for step in &log.steps {
        write!(out, "step {} {} {}", step.t, step.arm, step.reward).unwrap();
        match &step.context {
            Context::Discrete(x) => write!(out, " x {x}").unwrap(),
            Context::Continuous(features) => {
                out.push_str(" f");
                push_floats(&mut out, features);
            }
            Context::Row { index, features } => {
                write!(out, " row {index}").unwrap();
                push_floats(&mut out, features);
            }
        }
        out.push_str(" e");
        push_floats(&mut out, &step.propensities);
        out.push_str(" mu");
        push_floats(&mut out, &step.muhat);
        out.push('\n');
    }
    w.write_all(out.as_bytes())
}

// ── reading ─────────────────────────────────────────────────────────────────

struct Parser<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
    line: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Parser { tokens: text.split_ascii_whitespace(), line }
    }

    fn fail(&self, message: impl Into<String>) -> LogfileError {
        LogfileError::Parse { line: self.line, message: message.into() }
    }

    fn word(&mut self, what: &str) -> Result<&'a str, LogfileError> {
        self.tokens.next().ok_or_else(|| self.fail(format!("missing {what}")))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, LogfileError> {
        let token = self.word(what)?;
        token.parse().map_err(|_| self.fail(format!("bad {what}: {token:?}")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>, LogfileError> {
        (0..n).map(|_| self.parse::<f64>(what)).collect()
    }

    fn done(&mut self) -> Result<(), LogfileError> {
        match self.tokens.next() {
            Some(extra) => Err(self.fail(format!("unexpected trailing token {extra:?}"))),
            None => Ok(()),
        }
    }
}

/// A snapshot line, before per-step rules can be resolved against the steps.
enum PendingSnapshot {
    Ready(PropensitySnapshot),
    PerSteps { batch: usize, start: usize, end: usize, floor: f64 },
}

/// Parses a log from the text format and validates it.
pub fn read_log<R: BufRead>(reader: R) -> Result<BanditLog, LogfileError> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or(LogfileError::Parse { line: 1, message: "empty file".into() })?;
    let first = first?;
    if first.trim() != HEADER {
        return Err(LogfileError::Parse {
            line: 1,
            message: format!("expected header {HEADER:?}, got {:?}", first.trim()),
        });
    }

    let mut space: Option<ContextSpace> = None;
    let mut k: Option<usize> = None;
    let mut pending: Vec<PendingSnapshot> = Vec::new();
    let mut steps: Vec<LoggedStep> = Vec::new();

    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p = Parser::new(&line, idx + 1);
        let tag = p.word("record tag")?;
        match tag {
            "space" => {
                let kind = p.word("space kind")?;
                space = Some(match kind {
                    "discrete" => {
                        let mut probabilities = Vec::new();
                        for token in p.tokens.by_ref() {
                            probabilities.push(token.parse().map_err(|_| {
                                LogfileError::Parse {
                                    line: idx + 1,
                                    message: format!("bad context probability {token:?}"),
                                }
                            })?);
                        }
                        ContextSpace::discrete(probabilities)?
                    }
                    "continuous" => {
                        let dim = p.parse("dimension")?;
                        p.done()?;
                        ContextSpace::continuous(dim)
                    }
                    other => return Err(p.fail(format!("unknown space kind {other:?}"))),
                });
            }
            "arms" => {
                k = Some(p.parse("arm count")?);
                p.done()?;
            }
            "snapshot" => {
                let k = k.ok_or_else(|| p.fail("snapshot before arms line"))?;
                let batch = p.parse("batch index")?;
                let start = p.parse("start step")?;
                let end = p.parse("end step")?;
                let floor = p.parse("floor")?;
                let kind = p.word("snapshot kind")?;
                let snap = match kind {
                    "uniform" => {
                        p.done()?;
                        PendingSnapshot::Ready(PropensitySnapshot::uniform(batch, start, end, k))
                    }
                    "table" => {
                        let num_contexts = match &space {
                            Some(ContextSpace::Discrete { probabilities }) => probabilities.len(),
                            _ => return Err(p.fail("table snapshot needs a discrete space")),
                        };
                        let flat = p.floats(num_contexts * k, "propensity")?;
                        p.done()?;
                        let rows = flat.chunks(k).map(<[f64]>::to_vec).collect();
                        PendingSnapshot::Ready(PropensitySnapshot::from_table(
                            batch, start, end, floor, rows,
                        )?)
                    }
                    "region" => {
                        let flat = p.floats(4 * k, "propensity")?;
                        p.done()?;
                        let rows = flat.chunks(k).map(<[f64]>::to_vec).collect();
                        PendingSnapshot::Ready(PropensitySnapshot::from_region_table(
                            batch, start, end, floor, rows,
                        )?)
                    }
                    "persteps" => {
                        p.done()?;
                        PendingSnapshot::PerSteps { batch, start, end, floor }
                    }
                    other => return Err(p.fail(format!("unknown snapshot kind {other:?}"))),
                };
                pending.push(snap);
            }
            "step" => {
                let k = k.ok_or_else(|| p.fail("step before arms line"))?;
                let dim = match &space {
                    Some(s) => s.dim(),
                    None => return Err(p.fail("step before space line")),
                };
                let t = p.parse("step index")?;
                let arm = p.parse("arm")?;
                let reward = p.parse("reward")?;
                let marker = p.word("context marker")?;
                let context = match (marker, dim) {
                    ("x", _) => Context::Discrete(p.parse("context id")?),
                    ("f", Some(dim)) => Context::Continuous(p.floats(dim, "feature")?),
                    ("row", Some(dim)) => Context::Row {
                        index: p.parse("row index")?,
                        features: p.floats(dim, "feature")?,
                    },
                    (other, _) => {
                        return Err(p.fail(format!("context marker {other:?} does not fit the space")))
                    }
                };
                if p.word("propensity marker")? != "e" {
                    return Err(p.fail("expected \"e\" before propensities"));
                }
                let propensities = p.floats(k, "propensity")?;
                if p.word("model marker")? != "mu" {
                    return Err(p.fail("expected \"mu\" before model values"));
                }
                let muhat = p.floats(k, "model value")?;
                p.done()?;
                steps.push(LoggedStep { t, context, arm, reward, propensities, muhat });
            }
            other => return Err(p.fail(format!("unknown record tag {other:?}"))),
        }
    }

    let space = space.ok_or(LogfileError::Parse { line: 2, message: "missing space line".into() })?;
    let k = k.ok_or(LogfileError::Parse { line: 3, message: "missing arms line".into() })?;

    let snapshots = pending
        .into_iter()
        .map(|snap| match snap {
            PendingSnapshot::Ready(s) => s,
            PendingSnapshot::PerSteps { batch, start, end, floor } => {
                let map: BTreeMap<usize, Vec<f64>> = steps
                    .iter()
                    .filter(|s| (start..=end).contains(&s.t))
                    .map(|s| (s.t, s.propensities.clone()))
                    .collect();
                PropensitySnapshot::from_per_step(batch, start, end, floor, k, map)
            }
        })
        .collect();

    let log = BanditLog { space, k, steps, snapshots };
    log.validate()?;
    Ok(log)
}

/// Writes a log to a file.
pub fn save_log(log: &BanditLog, path: impl AsRef<Path>) -> Result<(), LogfileError> {
    let file = std::fs::File::create(path)?;
    write_log(log, io::BufWriter::new(file))?;
    Ok(())
}

/// Reads a log from a file.
pub fn load_log(path: impl AsRef<Path>) -> Result<BanditLog, LogfileError> {
    let file = std::fs::File::open(path)?;
    read_log(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{collect, AgentConfig, AgentKind, FloorSchedule};
    use crate::envs::{ClassificationEnv, Env, SyntheticEnv};
    use crate::estimators::{estimate_dr, estimate_weighted, Phi, Target, WeightScheme};
    use crate::outcome_models::ModelSpec;
    use crate::types::PolicyTable;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn roundtrip(log: &BanditLog) -> (Vec<u8>, BanditLog, Vec<u8>) {
        let mut bytes = Vec::new();
        write_log(log, &mut bytes).unwrap();
        let back = read_log(bytes.as_slice()).unwrap();
        let mut bytes_again = Vec::new();
        write_log(&back, &mut bytes_again).unwrap();
        (bytes, back, bytes_again)
    }

    #[test]
    fn discrete_log_round_trips_byte_identically() {
        let env = Env::Synthetic(SyntheticEnv::example1());
        let mut rng = StdRng::seed_from_u64(42);
        let log = collect(
            &env,
            &AgentConfig::tabular(150),
            ModelSpec::Tabular,
            120,
            40,
            &FloorSchedule::paper_faithful(),
            &mut rng,
        )
        .unwrap();
        let (bytes, back, bytes_again) = roundtrip(&log);
        assert_eq!(bytes, bytes_again);
        assert_eq!(log.steps, back.steps);
        assert_eq!(log.k, back.k);

        // Estimates computed from the reloaded log are bitwise identical.
        let pi = PolicyTable::fixed_arm(5, 0).unwrap();
        let a = estimate_weighted(
            &log,
            Target::Policy(&pi),
            WeightScheme::contextual(Phi::StableVar),
        )
        .unwrap();
        let b = estimate_weighted(
            &back,
            Target::Policy(&pi),
            WeightScheme::contextual(Phi::StableVar),
        )
        .unwrap();
        assert_eq!(a.point.to_bits(), b.point.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
    }

    #[test]
    fn region_log_round_trips_with_full_evaluators() {
        let env = Env::Synthetic(SyntheticEnv::region_signal());
        let mut rng = StdRng::seed_from_u64(43);
        let log = collect(
            &env,
            &AgentConfig::tabular(200),
            ModelSpec::Ridge { lambda: 1.0 },
            150,
            50,
            &FloorSchedule::assumption_faithful(),
            &mut rng,
        )
        .unwrap();
        let (bytes, back, bytes_again) = roundtrip(&log);
        assert_eq!(bytes, bytes_again);

        // Region tables survive, so even the weighted estimators that need
        // off-step evaluations work on the reloaded log.
        let pi = env.best_contextual_policy();
        let a = estimate_weighted(&log, Target::Policy(&pi), WeightScheme::contextual(Phi::MinVar))
            .unwrap();
        let b = estimate_weighted(&back, Target::Policy(&pi), WeightScheme::contextual(Phi::MinVar))
            .unwrap();
        assert_eq!(a.point.to_bits(), b.point.to_bits());
    }

    #[test]
    fn linear_agent_log_round_trips_and_supports_plain_estimators() {
        let features = vec![
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.2, 0.9],
            vec![0.9, 0.1],
            vec![-0.1, 1.1],
            vec![1.1, -0.2],
        ];
        let labels = vec![0, 1, 0, 1, 0, 1];
        let env = Env::Classification(
            ClassificationEnv::from_rows(features, labels, vec!["a".into(), "b".into()], 0.1)
                .unwrap(),
        );
        let mut rng = StdRng::seed_from_u64(44);
        let log = collect(
            &env,
            &AgentConfig { kind: AgentKind::LinTs { lambda: 1.0, sigma2: 1.0 }, num_draws: 100 },
            ModelSpec::Ridge { lambda: 1.0 },
            80,
            20,
            &FloorSchedule::classification(2),
            &mut rng,
        )
        .unwrap();
        let (bytes, back, bytes_again) = roundtrip(&log);
        assert_eq!(bytes, bytes_again);

        // Per-step snapshots evaluate exactly the logged propensities, so
        // score-based estimators agree bitwise.
        let pi = env.best_contextual_policy();
        let a = estimate_dr(&log, Target::Policy(&pi)).unwrap();
        let b = estimate_dr(&back, Target::Policy(&pi)).unwrap();
        assert_eq!(a.point.to_bits(), b.point.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());

        // But the weighted families need off-step evaluations, which a
        // per-step rule cannot provide: a typed error, not a wrong answer.
        assert!(estimate_weighted(
            &back,
            Target::Policy(&pi),
            WeightScheme::noncontextual(Phi::StableVar)
        )
        .is_err());
    }

    #[test]
    fn malformed_files_fail_with_line_numbers() {
        let cases: Vec<(&str, &str)> = vec![
            ("", "empty file"),
            ("wrong header\n", "expected header"),
            ("banditope-log v1\nspace martian 1\n", "unknown space kind"),
            ("banditope-log v1\nspace discrete 1\narms 2\nwat 5\n", "unknown record tag"),
            (
                "banditope-log v1\nspace discrete 1\narms 2\nstep 1 0 0.5 x 0 e 0.5 mu 0 0\n",
                "bad propensity",
            ),
            (
                "banditope-log v1\nspace discrete 1\narms 2\nstep 1 0 nope x 0 e 0.5 0.5 mu 0 0\n",
                "bad reward",
            ),
        ];
        for (text, needle) in cases {
            let err = read_log(text.as_bytes()).unwrap_err();
            let message = err.to_string();
            assert!(message.contains(needle), "{message:?} should mention {needle:?}");
        }
    }

    #[test]
    fn validation_still_guards_parsed_content() {
        // Steps outside any snapshot's range are rejected by log validation.
        let text = "banditope-log v1\nspace discrete 1\narms 2\n\
                    snapshot 0 1 1 0.5 uniform\n\
                    step 1 0 0.5 x 0 e 0.5 0.5 mu 0 0\n\
                    step 2 0 0.5 x 0 e 0.5 0.5 mu 0 0\n";
        assert!(matches!(read_log(text.as_bytes()), Err(LogfileError::Invalid(_))));
    }
}
