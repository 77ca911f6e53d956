use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn subsel(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subsel"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SUBSEL_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = subsel(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth_dump(cwd: &Path) {
    ok(&["synth", "dump", "--out", "dump", "--samples", "100", "--seed", "4"], cwd);
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_selects_budget_and_records_rank() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    ok(&["pipeline", "dump", "--out", "run", "--budget", "16"], dir.path());
    let ids = fs::read_to_string(dir.path().join("run/selected.ids")).unwrap();
    assert_eq!(ids.lines().count(), 16);
    let m = manifest(&dir.path().join("run/run_manifest.json"));
    assert_eq!(m["command"], "pipeline");
    assert_eq!(m["seed"], 0);
    assert!(m["k_used"].as_u64().unwrap() >= 1);
    assert!(m["energy_ratio"].as_f64().unwrap() >= 0.9);
    assert_eq!(m["config"]["budget"], 16);
    assert_eq!(m["config"]["tau"], 0.9);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    let base = ["--mode", "leverage-sample", "--budget", "16%", "--seed", "9"];
    ok(&[&["pipeline", "dump", "--out", "a"][..], &base].concat(), dir.path());
    ok(&[&["pipeline", "dump", "--out", "b", "--workers", "3"][..], &base].concat(), dir.path());
    for f in ["repr.json", "repr.f64", "repr.ids", "selected.ids", "scores.jsonl", "selection.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn manifest_config_reproduces_selection() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    ok(
        &["pipeline", "dump", "--out", "first", "--mode", "leverage-sample", "--seed", "5", "--tau", "0.8", "--budget", "20"],
        dir.path(),
    );
    ok(&["pipeline", "dump", "--out", "again", "--config", "first/run_manifest.json"], dir.path());
    assert_eq!(
        fs::read(dir.path().join("first/selected.ids")).unwrap(),
        fs::read(dir.path().join("again/selected.ids")).unwrap()
    );
    // the reprs written by the pipeline feed the select command too
    ok(&["select", "first", "--out", "third", "--config", "first/run_manifest.json"], dir.path());
    assert_eq!(
        fs::read(dir.path().join("first/selected.ids")).unwrap(),
        fs::read(dir.path().join("third/selected.ids")).unwrap()
    );
}

#[test]
fn usage_errors_exit_two_with_single_line() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    ok(&["reprs", "dump", "--out", "reprs"], dir.path());
    for args in [
        &["select", "reprs", "--out", "o", "--budget", "0"][..],
        &["select", "reprs", "--out", "o", "--budget", "150%"],
        &["select", "reprs", "--out", "o", "--energy-threshold", "1.5"],
        &["select", "reprs", "--out", "o", "--mode", "random"],
        &["pipeline", "dump", "--out", "o", "--tau", "0"],
        &["select", "reprs", "--unknown"],
    ] {
        let out = subsel(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
    assert!(!dir.path().join("o/selected.ids").exists());
}

#[test]
fn data_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = subsel(&["select", "nowhere", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: "));

    synth_dump(dir.path());
    let shard = dir.path().join("dump/shard-00000.ssdp");
    let bytes = fs::read(&shard).unwrap();
    fs::write(&shard, &bytes[..bytes.len() - 3]).unwrap();
    let out = subsel(&["validate", "dump"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = subsel(&["pipeline", "dump", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_reports_clean_dump() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    let out = ok(&["validate", "dump", "--json", "--out", "check"], dir.path());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["num_samples"], 100);
    assert_eq!(report["error_count"], 0);
    assert!(dir.path().join("check/run_manifest.json").is_file());
}

#[test]
fn report_commands_write_three_formats() {
    let dir = tempfile::tempdir().unwrap();
    synth_dump(dir.path());
    ok(&["tau-sweep", "dump", "--out", "sweep", "--taus", "0.85,0.9,0.95", "--budget", "10"], dir.path());
    ok(&["verify", "--out", "verify", "--rows", "300", "--dim", "24", "--rank", "3", "--trials", "5"], dir.path());
    ok(&["bench", "--out", "bench", "--sizes", "500,1000", "--dim", "8", "--repetitions", "3", "--budget", "5"], dir.path());
    for (sub, name) in [("sweep", "tau_sweep"), ("verify", "verify"), ("bench", "scaling")] {
        for ext in ["json", "txt", "csv"] {
            assert!(dir.path().join(sub).join(format!("{name}.{ext}")).is_file(), "{sub}/{name}.{ext}");
        }
        assert!(dir.path().join(sub).join("run_manifest.json").is_file());
    }
    let sweep = manifest(&dir.path().join("sweep/tau_sweep.json"));
    let ratios: Vec<f64> = sweep["rows"].as_array().unwrap().iter().map(|r| r["mean_retained_ratio"].as_f64().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn planted_matrix_feeds_select() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["synth", "planted", "--out", "pl", "--rows", "400", "--dim", "16", "--spectrum", "6,5,4", "--residual", "0.05"],
        dir.path(),
    );
    ok(&["select", "pl", "--out", "sel", "--budget", "auto", "--svd", "dense"], dir.path());
    let m = manifest(&dir.path().join("sel/run_manifest.json"));
    assert_eq!(m["k_used"], 3);
    // ceil(4 * 3 ln 3 / 0.25) = 53
    assert_eq!(fs::read_to_string(dir.path().join("sel/selected.ids")).unwrap().lines().count(), 53);
}
