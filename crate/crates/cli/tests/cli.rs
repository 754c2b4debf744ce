use std::fs;
use std::process::Command;

fn prlc(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_prlc")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &std::path::Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY_MDP: &str = r#"{"task": "mdp-bridge", "train": {"iterations": 10}, "mdp_bridge": {"n_demos": 300}}"#;

#[test]
fn run_writes_outputs_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_MDP);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let (code, first, err) = prlc(&["run", "--config", &cfg, "--seed", "3", "--out", out, "--selector", "full"]);
    assert_eq!(code, 0, "{err}");
    for name in
        ["mdp-bridge-full-seed3.csv", "mdp-bridge-full-seed3.summary.json", "mdp-bridge-full-seed3.correspondence.json", "mdp-bridge-plot.csv"]
    {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    let csv = fs::read_to_string(dir.path().join("out/mdp-bridge-full-seed3.csv")).unwrap();
    let (_, second, _) = prlc(&["run", "--config", &cfg, "--seed", "3", "--out", out, "--selector", "full"]);
    assert_eq!(first, second);
    assert_eq!(csv, fs::read_to_string(dir.path().join("out/mdp-bridge-full-seed3.csv")).unwrap());
    assert!(first.contains("\"wall_time\": null"));

    let (code, table, _) = prlc(&["report", "--out", out]);
    assert_eq!(code, 0);
    assert!(table.contains("q-max-abs-deviation"));
}

#[test]
fn sweep_covers_every_selector() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"task": "mdp-bridge", "train": {"iterations": 5}, "sweep": {"selectors": ["base-only", "full"], "seeds": [0, 1]}}"#,
    );
    let out = dir.path().join("out");
    let (code, table, err) = prlc(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(table.contains("base-only") && table.contains("full"));
    let plot = fs::read_to_string(out.join("mdp-bridge-plot.csv")).unwrap();
    assert_eq!(plot.lines().next().unwrap(), "iteration,base-only-seed0,base-only-seed1,full-seed0,full-seed1");
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["{", r#"{"task": "grid", "grid": {"noise": 3}}"#, r#"{"task": "infill", "metric": "grid-ssim-lite"}"#] {
        let cfg = write_config(dir.path(), text);
        let (code, _, err) = prlc(&["run", "--config", &cfg]);
        assert_eq!(code, 2, "{text}: {err}");
    }
    let cfg = write_config(dir.path(), TINY_MDP);
    assert_eq!(prlc(&["run", "--config", &cfg, "--selector", "greedy"]).0, 2);
    assert_eq!(prlc(&["run", "--config", "/nonexistent/config.json"]).0, 2);
    assert_eq!(prlc(&["bogus"]).0, 2);
}

#[test]
fn oracle_checks_report_and_fail_on_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = prlc(&["check-oracles", "--only", "1,5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("check-report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let (code, stdout, _) = prlc(&["check-oracles", "--only", "3", "--corrupt-maxent-sign"]);
    assert_eq!(code, 1, "{stdout}");
    assert!(stdout.starts_with("[FAIL]"));

    let (code, stdout, _) = prlc(&["check-oracles", "--only", "1,3", "--alpha-override", "0"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("[SKIP]"));
}
