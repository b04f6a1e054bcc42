use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn memctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memctl"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = memctl(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &[
            "--seed",
            "3",
            "simulate",
            "--tau-z",
            "2",
            "--payload",
            "0.5",
        ],
    );
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["diverged"], false);
    assert!(summary["rmse"].as_f64().unwrap() > 0.0);
    let csv = dir
        .path()
        .join("trajectory__fixed_gain__tz2.0s__p0.5__seed3.csv");
    let text = fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 501);
}

#[test]
fn evaluate_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = "42,43,44";
    for controller in ["baseline", "shielded-random"] {
        ok(
            dir.path(),
            &[
                "evaluate",
                "--controller",
                controller,
                "--tau-z",
                "1",
                "--seeds",
                seeds,
                "--rollouts",
                "2",
            ],
        );
    }
    assert!(dir.path().join("fixed_gain__tz1.0s__seed42.json").exists());
    assert!(dir
        .path()
        .join("shielded_random__tz1.0s__seed44.json")
        .exists());

    let pattern = format!("{}/*.json", dir.path().display());
    let md = ok(
        dir.path(),
        &["compare", "--inputs", &pattern, "--metric", "rmse-mean"],
    );
    assert!(md.contains("| fixed_gain | shielded_random |"), "{md}");
    assert!(dir.path().join("compare.csv").exists());
}

#[test]
fn analysis_scans_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(
        &config,
        "[markov_gap]\nn_train = 30\nn_eval = 10\n\n[phase1]\nn_samples = 16\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();

    let sigma = ok(
        dir.path(),
        &["sigma-scan", "--tau-z", "0.5,1", "--n-traj", "1000"],
    );
    assert!(sigma.starts_with("tau_z,closed_form,monte_carlo"));
    assert_eq!(sigma.lines().count(), 3);

    let phase1 = ok(dir.path(), &["--config", cfg, "phase1", "--tau-z", "1,2"]);
    let first: serde_json::Value = serde_json::from_str(phase1.lines().next().unwrap()).unwrap();
    assert!(first["K_star"].as_u64().unwrap() >= 1);
    assert!(dir.path().join("phase1.jsonl").exists());

    ok(
        dir.path(),
        &[
            "--config",
            cfg,
            "rank-scan",
            "--tau-z",
            "1",
            "--export-operators",
        ],
    );
    assert!(dir.path().join("operator__tz1.0s.csv").exists());

    let gap = ok(
        dir.path(),
        &["--config", cfg, "markov-gap", "--tau-z", "0.2"],
    );
    assert!(gap.starts_with("tau_z,sigma_z2_mc"));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[plantt]\nm1 = 1.0\n").unwrap();
    let out = memctl(
        dir.path(),
        &["--config", config.to_str().unwrap(), "simulate"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading"));

    let out = memctl(dir.path(), &["simulate", "--payload", "9"]);
    assert!(!out.status.success());

    let pattern = format!("{}/nothing*.json", dir.path().display());
    let out = memctl(dir.path(), &["compare", "--inputs", &pattern]);
    assert!(!out.status.success());
}
