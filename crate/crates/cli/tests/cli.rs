//! End-to-end tests of the binary: exit codes, determinism, and output
//! formats, driven through real subprocess invocations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use banditope::types::{BanditLog, Context, ContextSpace, LoggedStep, PropensitySnapshot};

const BIN: &str = env!("CARGO_BIN_EXE_banditope");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(
        &path,
        r#"
name = "cli-smoke"
env = "example1"
t = 120
batch_size = 40
num_draws = 50
estimators = ["dr", "nc_minvar"]
target = "fixed:0"
replications = 3
master_seed = 11
"#,
    )
    .unwrap();
    path
}

#[test]
fn missing_config_file_exits_one() {
    let output = run(&["experiment", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&output), 1);
    assert!(stderr(&output).contains("not found"));
}

#[test]
fn unknown_flag_exits_one_with_usage_text() {
    let output = run(&["collect", "--bogus-flag"]);
    assert_eq!(code(&output), 1);
}

#[test]
fn help_exits_zero() {
    let output = run(&["--help"]);
    assert_eq!(code(&output), 0);
    assert!(String::from_utf8_lossy(&output.stdout).contains("banditope"));
}

#[test]
fn collect_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let (a, b, c) = (dir.path().join("a.log"), dir.path().join("b.log"), dir.path().join("c.log"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let output =
            run(&["collect", "--config", config, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    }
    let (a, b, c) =
        (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b, "same seed must give identical log files");
    assert_ne!(a, c, "different seeds should give different logs");
}

#[test]
fn estimate_emits_the_documented_json_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let log = dir.path().join("run.log");
    let output = run(&[
        "collect",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let output = run(&[
        "estimate",
        "--log",
        log.to_str().unwrap(),
        "--estimator",
        "dr",
        "--estimator",
        "nc_stablevar",
        "--policy",
        "fixed:0",
        "--reference",
        "0.6",
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let records: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("stdout is JSON");
    let records = records.as_array().expect("array of records");
    assert_eq!(records.len(), 2);
    for record in records {
        for field in ["estimator", "family", "policy", "point", "variance", "ci_lo", "ci_hi"] {
            assert!(!record[field].is_null(), "missing field {field}: {record}");
        }
        assert!(record["point"].as_f64().unwrap().is_finite());
        assert!(record["tstat"].as_f64().unwrap().is_finite());
        assert_eq!(record["policy"], "fixed:0");
    }
    assert_eq!(records[0]["estimator"], "dr");
    assert_eq!(records[0]["family"], "uniform");
    assert!(records[0]["phi"].is_null());
    assert_eq!(records[1]["estimator"], "nc_stablevar");
    assert_eq!(records[1]["family"], "noncontextual");
    assert_eq!(records[1]["phi"], "stablevar");
}

#[test]
fn estimate_on_zero_propensity_log_exits_two_with_overlap_message() {
    // A file can record an arm played at propensity zero even though no
    // simulator would produce one; estimation must refuse it loudly.
    let dir = tempfile::tempdir().unwrap();
    let steps = (1..=4)
        .map(|t| LoggedStep {
            t,
            context: Context::Discrete(0),
            arm: 0,
            reward: 1.0,
            propensities: vec![0.0, 1.0],
            muhat: vec![0.0, 0.0],
        })
        .collect();
    let log = BanditLog {
        space: ContextSpace::discrete(vec![1.0]).unwrap(),
        k: 2,
        steps,
        snapshots: vec![PropensitySnapshot::from_table(0, 1, 4, 0.0, vec![vec![0.0, 1.0]])
            .unwrap()],
    };
    let path = dir.path().join("pathological.log");
    banditope::logfile::save_log(&log, &path).unwrap();

    let output =
        run(&["estimate", "--log", path.to_str().unwrap(), "--policy", "fixed:0"]);
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("overlap"), "stderr: {}", stderr(&output));
}

#[test]
fn experiment_report_is_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (r1, r3) = (dir.path().join("r1.csv"), dir.path().join("r3.csv"));
    for (out, jobs) in [(&r1, "1"), (&r3, "3")] {
        let output = run(&[
            "experiment",
            "--config",
            config.to_str().unwrap(),
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    }
    let (r1, r3) = (std::fs::read(r1).unwrap(), std::fs::read(r3).unwrap());
    assert_eq!(r1, r3, "--jobs must not change the report");
    let text = String::from_utf8(r1).unwrap();
    assert!(text.starts_with("kind,name,rep,checkpoint,estimator,point"));
    assert!(text.contains("\nagg,cli-smoke"));
}

#[test]
fn suite_runs_on_a_bundled_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("suite.toml");
    std::fs::write(
        &config,
        r#"
env = "classification"
dataset = "overridden-per-dataset"
agent = "linear"
t = 60
batch_size = 20
num_draws = 60
floor = "classification"
estimators = ["dr", "nc_minvar"]
target = "best_fixed"
replications = 2
master_seed = 5
"#,
    )
    .unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/blobs.csv");
    let output = run(&[
        "suite",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("suite,blobs,dr"), "stdout: {text}");
}

#[test]
fn diagnose_reports_ok() {
    let output = run(&["diagnose", "--setups", "10", "--pairs", "500"]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("stdout is JSON");
    assert_eq!(report["ok"], true, "report: {report}");
    assert!(report["max_mean_error"].as_f64().unwrap() <= 1e-12);
    assert_eq!(report["power_chain_violations"], 0);
}
