use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bgwr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgwr"))
        .args(args)
        .current_dir(dir)
        .env_remove("BGWR_WORKERS")
        .output()
        .unwrap()
}

fn simulate(dir: &Path) {
    let out = bgwr(
        &[
            "simulate", "--width", "3", "--height", "2", "-m", "8", "--seed", "4", "-o", "data.csv",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const QUICK: [&str; 8] = [
    "--iterations",
    "300",
    "--burn-in",
    "100",
    "--chains",
    "2",
    "--data",
    "data.csv",
];

#[test]
fn simulate_writes_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert!(data.starts_with("site_id,u,v,y,offset,x1,x2,x3\n"));
    assert_eq!(data.lines().count(), 1 + 6 * 8);
    let truth = fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert!(truth.starts_with("site_id,u,v,phi0,phi1,phi2,theta\n"));
    assert_eq!(truth.lines().count(), 1 + 6);
}

#[test]
fn fit_writes_summaries_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    for (out_dir, workers) in [("a", "1"), ("b", "3")] {
        let mut args = vec!["fit", "--bandwidth", "2", "--out-dir", out_dir, "--workers", workers];
        args.extend(QUICK);
        let out = bgwr(&args, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a/summary.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/summary.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("site_id,param,mean,sd,q2.5,q50,q97.5\n"));
    assert_eq!(text.lines().count(), 1 + 6 * 4);
    assert!(dir.path().join("a/diagnostics.csv").exists());
}

#[test]
fn select_bandwidth_prints_the_winner() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let mut args = vec!["select-bandwidth", "--candidates", "0.5,5", "--out-dir", "sel"];
    args.extend(QUICK);
    let out = bgwr(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let chosen: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!(chosen == 0.5 || chosen == 5.0);
    let written = fs::read_to_string(dir.path().join("sel/selected_bandwidth.txt")).unwrap();
    assert_eq!(written.trim().parse::<f64>().unwrap(), chosen);
    let table = fs::read_to_string(dir.path().join("sel/elpd_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 6);
}

#[test]
fn elpd_lists_one_line_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let mut args = vec!["elpd", "--candidates", "1,10", "--out-dir", "cv", "--folds", "1"];
    args.extend(QUICK);
    let out = bgwr(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let etas: Vec<&str> = stdout.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(etas, ["1", "10"]);
    assert!(dir.path().join("cv/elpd_means.csv").exists());
}

#[test]
fn traces_can_be_summarized() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let mut args = vec!["export-traces", "--bandwidth", "1", "--out-dir", "tr"];
    args.extend(QUICK);
    assert!(bgwr(&args, dir.path()).status.success());
    let out = bgwr(
        &["summarize", "tr/traces/0_chain0.csv", "tr/traces/0_chain1.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert!(text.lines().nth(1).unwrap().starts_with("0_chain0,phi[0],"));
}

#[test]
fn config_file_and_environment_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        "dataset = \"data.csv\"\noutput_dir = \"from-config\"\n[kernel]\nbandwidth = 3.0\n[sampler]\niterations = 200\nburn_in = 50\nchains = 1\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bgwr"))
        .args(["fit", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("BGWR_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-config/summary.csv").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_bgwr"))
        .args(["fit", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("BGWR_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_usage_validation_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    assert_eq!(bgwr(&["fit", "--bandwidth", "1"], dir.path()).status.code(), Some(1));
    assert_eq!(bgwr(&["fit", "--bogus"], dir.path()).status.code(), Some(1));
    let mut negative = vec!["fit", "--bandwidth=-1"];
    negative.extend(QUICK);
    assert_eq!(bgwr(&negative, dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("bad.csv"), "site_id,u,v,y,offset,x1\na,0,0,x,1,1\n").unwrap();
    let out = bgwr(&["fit", "--bandwidth", "1", "--data", "bad.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2:"));
    let missing = bgwr(&["fit", "--bandwidth", "1", "--data", "nope.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let mut unwritable = vec!["fit", "--bandwidth", "1", "--out-dir", "data.csv/out"];
    unwritable.extend(QUICK);
    assert_eq!(bgwr(&unwritable, dir.path()).status.code(), Some(2));
    assert_eq!(bgwr(&["--help"], dir.path()).status.code(), Some(0));
}
