use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixlift::model::demo_spec;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mixlift"));
    c.env_remove("MIXLIFT_OUT");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn family(dir: &Path) -> PathBuf {
    let p = dir.join("demo.spec");
    fs::write(&p, "family = \"demo\"\n").unwrap();
    p
}

fn fixed(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("fixed.toml");
    fs::write(&p, demo_spec(n).unwrap().to_toml()).unwrap();
    p
}

fn run_dir(out: &Path, command: &str, i: usize) -> PathBuf {
    out.join(command).join(format!("run-{i:04}"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_demo_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = family(tmp.path());
    let o = run(tmp.path(), &["validate", "--spec", spec.to_str().unwrap(), "--n", "24"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(line.lines().count(), 1);
    assert!(line.starts_with("validate: n=24"));
    assert!(line.contains("pass"));
    let dir = run_dir(tmp.path(), "validate", 1);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config"]["n_grid"][0], 24);
    assert_eq!(report["result"]["degree_ok"], true);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn family_without_size_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = family(tmp.path());
    let o = run(tmp.path(), &["validate", "--spec", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("validate").exists());
}

#[test]
fn bad_spec_file_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "n = 3\n").unwrap();
    let o = run(tmp.path(), &["validate", "--spec", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_prints_usage_and_exits_64() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["validate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().env("MIXLIFT_OUT", tmp.path()).args(["gen-env", "--n", "12", "--seed", "3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let dir = run_dir(tmp.path(), "gen-env", 1);
    let env = mixlift::Environment::from_toml(&fs::read_to_string(dir.join("env.toml")).unwrap()).unwrap();
    assert_eq!(env, mixlift::Environment::sample(12, 3));
}

#[test]
fn reruns_append_and_reproduce_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = family(tmp.path());
    let args = ["cutoff-scan", "--spec", spec.to_str().unwrap(), "--n", "24,48,96", "--eps", "0.25", "--seeds", "3", "--seed", "9"];
    let a = run(tmp.path(), &args);
    let mut with_pool: Vec<&str> = args.to_vec();
    with_pool.extend(["--workers", "3"]);
    let b = run(tmp.path(), &with_pool);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    assert!(stdout(&a).contains("h_hat="));
    let first = fs::read(run_dir(tmp.path(), "cutoff-scan", 1).join("cutoff.csv")).unwrap();
    let second = fs::read(run_dir(tmp.path(), "cutoff-scan", 2).join("cutoff.csv")).unwrap();
    assert_eq!(first, second);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("n,environments,skipped,starts,tmix_eps"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn every_data_command_writes_config_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixed(tmp.path(), 24);
    let spec = fx.to_str().unwrap();
    let cases: Vec<(&str, Vec<&str>, &str)> = vec![
        ("mix-profile", vec!["--starts", "0,5", "--eps", "0.25,0.75"], "profile.csv"),
        ("quasitree-stats", vec!["--runs", "8", "--t-max", "400"], "regenerations.csv"),
        ("estimate-h", vec!["--runs", "4", "--t-max", "200", "--n-inner", "20", "--audit-t", "40", "--audit-runs", "10"], "audit.csv"),
        ("invariant-check", vec!["--trees", "3", "--depth", "2"], "balance.csv"),
        ("forward-explore", vec!["--x", "3", "--l1", "2", "--w-min", "0.01"], "components.csv"),
        ("pihat", vec!["--samples", "2000", "--m", "10", "--s0", "40"], "pihat.csv"),
    ];
    for (cmd, extra, csv) in cases {
        let mut args = vec![cmd, "--spec", spec];
        args.extend(extra);
        let o = run(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with(&format!("{cmd}:")), "{cmd}");
        let dir = run_dir(tmp.path(), cmd, 1);
        let body = fs::read_to_string(dir.join(csv)).unwrap();
        assert!(body.lines().count() >= 2, "{cmd}: {csv} has no rows");
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["command"], cmd);
        assert_eq!(manifest["config"]["spec"], spec);
        let names: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
        assert!(names.contains(&csv), "{cmd}");
    }
}

#[test]
fn nice_audit_runs_on_a_family() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = family(tmp.path());
    let o = run(
        tmp.path(),
        &["nice-audit", "--spec", spec.to_str().unwrap(), "--n", "4096", "--h", "0.0347", "--d", "0.1", "--runs", "3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(run_dir(tmp.path(), "nice-audit", 1).join("runs.csv")).unwrap();
    assert!(body.starts_with("run,start,nice,kappa,reasons"));
    assert_eq!(body.lines().count(), 4);
}

#[test]
fn counterexample_plants_a_trap() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["counterexample", "--delta", "0.05", "--l", "5", "--plant", "--copies", "64", "--budget", "0", "--no-escape"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mode=Planted isomorphic=true"));
    let trap: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir(tmp.path(), "counterexample", 1).join("trap.json")).unwrap()).unwrap();
    assert_eq!(trap["result"]["depth"], 5);
    assert_eq!(trap["result"]["tree_size"], 22);
}

#[test]
fn counterexample_escape_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["counterexample", "--delta", "0.05", "--l", "2", "--plant", "--copies", "16", "--budget", "0", "--t-exp", "4", "--typical-starts", "2"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(run_dir(tmp.path(), "counterexample", 1).join("escape.csv")).unwrap();
    assert!(body.starts_with("curve,t,survival"));
    assert_eq!(body.lines().count(), 1 + 2 * 5);
}

#[test]
fn search_without_planting_exhausts_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["counterexample", "--delta", "0.05", "--l", "5", "--copies", "16", "--budget", "10", "--no-escape"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!tmp.path().join("counterexample").exists());
}
