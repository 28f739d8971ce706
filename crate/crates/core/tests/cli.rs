use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mrp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp"))
        .current_dir(dir)
        .env_remove("MRP_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn diagnostic(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("a diagnostic line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn simulated_bundle(root: &Path) -> PathBuf {
    let spec = repo_file("configs/synth.toml");
    let o = mrp(root, &["simulate", "--spec", spec.to_str().unwrap(), "--output", "bundle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    root.join("bundle")
}

#[test]
fn check_prints_the_term_table_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("election.toml");
    fs::copy(repo_file("configs/election.toml"), &cfg).unwrap();
    let o = mrp(tmp.path(), &["--config", "election.toml", "check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for line in [
        "  state 50",
        "  eth 4 (2 columns)",
        "  marstat:state 150",
        "  state:gender 100",
        "  state:educ 250",
        "  educ:age:gender 40",
        // 50 states × 5 education levels × 4 age bands.
        "  state:educ:age 1000",
        "  terms: 22, effect columns: 23, parameters: 2163",
    ] {
        assert!(out.lines().any(|l| l == line), "missing `{line}` in\n{out}");
    }
    assert!(out.contains("preference model: cbind(clinton, trump) ~ 1 + female + state_pres_vote"));
    assert_eq!(listing(tmp.path()), ["election.toml"]);
}

#[test]
fn config_path_can_come_from_the_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_mrp"))
        .env("MRP_CONFIG", repo_file("configs/election.toml"))
        .arg("check")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).ends_with("ok\n"));
}

const TWO_CELL_CONFIG: &str = r#"
[paths]
frame = "frame.csv"
output = "out"

[[factors]]
name = "educ"
levels = ["HS", "College"]

[[factors]]
name = "gender"
levels = ["Female", "Male"]
"#;

#[test]
fn aggregate_matches_a_hand_computed_two_cell_case() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TWO_CELL_CONFIG).unwrap();
    fs::write(dir.join("frame.csv"), "educ,gender,population\nHS,Female,100\nHS,Male,300\n").unwrap();
    fs::write(
        dir.join("cells.csv"),
        "educ,gender,turnout,preference\nHS,Female,0.5,0.6\nHS,Male,0.2,0.3\n",
    )
    .unwrap();
    let o = mrp(
        dir,
        &["--config", "run.toml", "aggregate", "--input", "cells.csv", "--by", "educ", "--weighting", "voters"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Voters 100·0.5 + 300·0.2 = 110; votes 50·0.6 + 60·0.3 = 48.
    let table = fs::read_to_string(dir.join("out/aggregate_educ.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(table.as_bytes());
    let header = rows.headers().unwrap().clone();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 1, "College has no cells: {table}");
    let get = |name: &str| -> f64 {
        let i = header.iter().position(|h| h == name).unwrap();
        records[0][i].parse().unwrap()
    };
    assert_eq!(&records[0][0], "HS");
    assert_eq!(get("population"), 400.0);
    assert_eq!(get("expected_voters"), 110.0);
    assert_eq!(get("expected_votes"), 48.0);
    assert_eq!(get("vote_share"), 48.0 / 110.0);
    assert_eq!(get("turnout_rate"), 110.0 / 400.0);

    let gap = fs::read_to_string(dir.join("out/gap_educ.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(gap.as_bytes());
    let header = rows.headers().unwrap().clone();
    let rec = rows.records().next().unwrap().unwrap();
    let gap_col = header.iter().position(|h| h == "gap").unwrap();
    assert_eq!(rec[gap_col].parse::<f64>().unwrap(), 0.3 - 0.6);
}

#[test]
fn population_weighting_flag_changes_the_share() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TWO_CELL_CONFIG).unwrap();
    fs::write(dir.join("frame.csv"), "educ,gender,population\nHS,Female,100\nHS,Male,300\n").unwrap();
    fs::write(dir.join("cells.csv"), "educ,gender,preference\nHS,Female,0.6\nHS,Male,0.3\n").unwrap();
    let o = mrp(
        dir,
        &["--config", "run.toml", "--weighting", "population", "aggregate", "--input", "cells.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.join("out/aggregate_national.csv")).unwrap();
    let share: f64 = table.lines().nth(1).unwrap().split(',').next_back().unwrap().parse().unwrap();
    assert!((share - (100.0 * 0.6 + 300.0 * 0.3) / 400.0).abs() < 1e-15);
}

#[test]
fn missing_config_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mrp(tmp.path(), &["check"]);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostic(&o);
    assert_eq!(d["kind"], "config");
    assert_eq!(d["exit_code"], 1);

    let o = mrp(tmp.path(), &["--config", "nope.toml", "fit"]);
    assert_eq!(o.status.code(), Some(1));

    let o = mrp(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_formula_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{TWO_CELL_CONFIG}\n[models]\npreference = \"cbind(y, n) ~ 1 + (1 | region)\"\n");
    fs::write(tmp.path().join("run.toml"), cfg).unwrap();
    let o = mrp(tmp.path(), &["--config", "run.toml", "check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(diagnostic(&o)["message"].as_str().unwrap().contains("region"));
}

#[test]
fn inconsistent_poll_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = format!(
        "[models]\npreference = \"cbind(y, n) ~ 1 + (1 | educ)\"\n{}",
        TWO_CELL_CONFIG.replace("frame = \"frame.csv\"", "frame = \"frame.csv\"\npreference_poll = \"poll.csv\"")
    );
    fs::write(dir.join("run.toml"), cfg).unwrap();
    fs::write(dir.join("frame.csv"), "educ,gender,population\nHS,Female,100\n").unwrap();
    fs::write(dir.join("poll.csv"), "educ,gender,successes,trials\nHS,Female,9,3\n").unwrap();
    let o = mrp(dir, &["--config", "run.toml", "fit"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(diagnostic(&o)["kind"], "data");
}

#[test]
fn non_convergence_writes_the_fit_and_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = simulated_bundle(tmp.path());
    let o = mrp(&bundle, &["--config", "run.toml", "--max-iter", "2", "fit", "--model", "turnout"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(diagnostic(&o)["kind"], "numeric");
    let fit: Value = serde_json::from_str(&fs::read_to_string(bundle.join("report/fit_turnout.json")).unwrap()).unwrap();
    assert_eq!(fit["map"]["converged"], false);
}

#[test]
fn simulate_writes_a_runnable_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = simulated_bundle(tmp.path());
    assert_eq!(
        listing(&bundle),
        [
            "frame.csv",
            "preference_poll.csv",
            "run.toml",
            "targets.csv",
            "truth.csv",
            "truth_params.json",
            "turnout_poll.csv"
        ]
    );
    let frame = fs::read_to_string(bundle.join("frame.csv")).unwrap();
    assert_eq!(frame.lines().count(), 1 + 120);

    for step in [&["fit"][..], &["predict"], &["calibrate"], &["aggregate", "--by", "state", "--by", "educ,age"]] {
        let mut args = vec!["--config", "run.toml"];
        args.extend_from_slice(step);
        let o = mrp(&bundle, &args);
        assert!(o.status.success(), "{step:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = listing(&bundle.join("report"));
    for name in [
        "fit_turnout.json",
        "fit_preference.json",
        "predictions.csv",
        "calibrated.csv",
        "calibration.csv",
        "aggregate_state.csv",
        "gap_state.csv",
        "aggregate_educ_age.csv",
        "gap_educ_age.csv",
    ] {
        assert!(out.contains(&name.to_string()), "missing {name}: {out:?}");
    }

    // Calibrated state aggregates reproduce the targets.
    let targets = fs::read_to_string(bundle.join("targets.csv")).unwrap();
    let table = fs::read_to_string(bundle.join("report/aggregate_state.csv")).unwrap();
    let mut t = csv::Reader::from_reader(targets.as_bytes());
    let mut a = csv::Reader::from_reader(table.as_bytes());
    let ah = a.headers().unwrap().clone();
    let share = ah.iter().position(|h| h == "vote_share").unwrap();
    let turnout = ah.iter().position(|h| h == "turnout_rate").unwrap();
    for (tr, ar) in t.records().zip(a.records()) {
        let (tr, ar) = (tr.unwrap(), ar.unwrap());
        assert_eq!(&tr[0], &ar[0]);
        assert!((tr[1].parse::<f64>().unwrap() - ar[share].parse::<f64>().unwrap()).abs() < 1e-8);
        assert!((tr[2].parse::<f64>().unwrap() - ar[turnout].parse::<f64>().unwrap()).abs() < 1e-8);
    }
}

#[test]
fn report_manifest_lists_digests_of_everything_written() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = simulated_bundle(tmp.path());
    let o = mrp(&bundle, &["--config", "run.toml", "report"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = bundle.join("report");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "report");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    assert!(manifest["timings_ms"]["fit"].as_f64().unwrap() >= 0.0);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len() + 1, listing(&dir).len());
    for entry in outputs {
        use sha2::Digest;
        let bytes = fs::read(dir.join(entry["path"].as_str().unwrap())).unwrap();
        assert_eq!(entry["sha256"], hex::encode(sha2::Sha256::digest(bytes)));
    }
    // The synthetic frame has no ethnicity factor.
    let skipped = manifest["skipped"].as_array().unwrap();
    assert!(skipped.iter().any(|s| s.as_str().unwrap().starts_with("aggregate_eth.csv")));
}

#[test]
fn seed_override_changes_the_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = repo_file("configs/synth.toml");
    let spec = spec.to_str().unwrap();
    for (seed, out) in [("11", "a"), ("11", "b"), ("12", "c")] {
        let o = mrp(tmp.path(), &["--seed", seed, "simulate", "--spec", spec, "--output", out]);
        assert!(o.status.success());
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("truth.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn hmc_estimator_samples_or_reports_a_stuck_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = simulated_bundle(tmp.path());
    let cfg = fs::read_to_string(bundle.join("run.toml")).unwrap();
    let tuned: String = cfg
        .lines()
        .map(|l| if l.starts_with("step_size") { "step_size = 0.01" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(bundle.join("tuned.toml"), tuned).unwrap();
    let o = mrp(&bundle, &["--config", "tuned.toml", "--estimator", "hmc", "fit", "--model", "preference"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("acceptance"));
    let fit: Value =
        serde_json::from_str(&fs::read_to_string(bundle.join("report/fit_preference.json")).unwrap()).unwrap();
    let rate = fit["sampling"]["acceptance_rate"].as_f64().unwrap();
    assert!(rate > 0.5, "acceptance {rate}");
    assert_eq!(fit["sampling"]["draws"].as_array().unwrap().len(), 1000);

    // 20,000 respondents make the posterior far narrower than a 0.2 step.
    let coarse = fs::read_to_string(bundle.join("tuned.toml")).unwrap().replace("step_size = 0.01", "step_size = 0.2");
    fs::write(bundle.join("coarse.toml"), coarse).unwrap();
    let o = mrp(&bundle, &["--config", "coarse.toml", "--estimator", "hmc", "fit", "--model", "preference"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(diagnostic(&o)["message"].as_str().unwrap().contains("accepted no proposals"));
}
