use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn frl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frl"))
        .args(args)
        .current_dir(dir)
        .env("FRL_OUTPUT_ROOT", dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[agent]\nlearning_rat = 0.1\n").unwrap();
    let out = frl(dir.path(), &["-c", "bad.toml", "show-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = frl(dir.path(), &["-c", "absent.toml", "show-config"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = frl(dir.path(), &["show-config"]);
    assert!(out.status.success());
    fs::write(dir.path().join("resolved.toml"), &out.stdout).unwrap();
    let again = frl(dir.path(), &["-c", "resolved.toml", "show-config"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn simulate_writes_one_csv_per_space() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[simulate]\ninner_reps = 50\nouter_reps = 2\nspaces = [{ dims = 2, sub_actions = 2 }]\n";
    fs::write(dir.path().join("sim.toml"), cfg).unwrap();
    let out = frl(dir.path(), &["-c", "sim.toml", "simulate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("runs/simulate/sim_N2_n2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(dir.path().join("runs/simulate/config.toml").exists());
}

#[test]
fn report_without_results_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = frl(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn collect_without_checkpoints_under_no_train_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[online]\nno_train = true\n").unwrap();
    let out = frl(dir.path(), &["-c", "c.toml", "collect"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load expert"));
}
