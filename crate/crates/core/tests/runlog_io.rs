mod common;

use std::fs;
use std::path::Path;

use fdilsim_core::config::{parse_config, parse_config_str};
use fdilsim_core::experiment::run_experiment;
use fdilsim_core::runlog::{
    compare_dirs, emit_runlog, read_accuracy, read_rounds, read_summary, verify_dir, ACCURACY_FILE,
    BOUNDS_FILE, CONFIG_FILE, ROUNDS_FILE, SUMMARY_FILE,
};

fn emit(dir: &Path, text: &str) {
    let art = run_experiment(text).unwrap();
    emit_runlog(&art, dir).unwrap();
}

#[test]
fn emitted_log_verifies_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("nested/deeper/run");
    emit(&dir, common::SMALL);
    for f in [
        ROUNDS_FILE,
        ACCURACY_FILE,
        SUMMARY_FILE,
        BOUNDS_FILE,
        CONFIG_FILE,
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(verify_dir(&dir).unwrap(), Vec::<String>::new());
    assert_eq!(
        fs::read_to_string(dir.join(CONFIG_FILE)).unwrap(),
        common::SMALL
    );
}

#[test]
fn read_back_matches_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let art = run_experiment(common::SMALL).unwrap();
    emit_runlog(&art, tmp.path()).unwrap();
    let rows = read_rounds(&tmp.path().join(ROUNDS_FILE)).unwrap();
    assert_eq!(rows.len(), art.log.rounds.len());
    let acc = read_accuracy(&tmp.path().join(ACCURACY_FILE), 2).unwrap();
    assert_eq!(acc, art.log.accuracy);
    let summary = read_summary(&tmp.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary["tasks"], "2");
    assert_eq!(summary["rounds"], "20");
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    emit(&a, common::SMALL);
    emit(&b, common::SMALL);
    assert!(compare_dirs(&a, &b).unwrap().is_empty());
    for f in [ROUNDS_FILE, ACCURACY_FILE, SUMMARY_FILE, BOUNDS_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = tmp.path().join("c");
    emit(&c, &common::SMALL.replace("seed = 3", "seed = 4"));
    assert!(!compare_dirs(&a, &c).unwrap().is_empty());
}

#[test]
fn tampered_drift_is_caught() {
    let tmp = tempfile::tempdir().unwrap();
    emit(tmp.path(), common::SMALL);
    let path = tmp.path().join(ROUNDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let last = lines.len() - 1;
    let mut cols: Vec<String> = lines[last].split(',').map(str::to_string).collect();
    cols[4] = "1.0e3".into();
    lines[last] = cols.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(!verify_dir(tmp.path()).unwrap().is_empty());
}

#[test]
fn tampered_accuracy_is_caught() {
    let tmp = tempfile::tempdir().unwrap();
    emit(tmp.path(), common::SMALL);
    let path = tmp.path().join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let edited: String = text
        .lines()
        .map(|l| {
            if l.starts_with("acc=") {
                "acc=1.0e0".to_string()
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&path, edited + "\n").unwrap();
    assert!(!verify_dir(tmp.path()).unwrap().is_empty());
}

#[test]
fn truncated_log_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    emit(tmp.path(), common::SMALL);
    let path = tmp.path().join(ROUNDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    if let Ok(v) = verify_dir(tmp.path()) {
        assert!(!v.is_empty());
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let err = verify_dir(Path::new("/nonexistent/run")).unwrap_err();
    assert!(matches!(err, fdilsim_core::Error::Io { .. }));
}

#[test]
fn config_survives_a_round_trip() {
    let cfg = parse_config_str(common::SMALL).unwrap();
    assert_eq!(parse_config_str(&cfg.to_toml()).unwrap(), cfg);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(parse_config(&path).unwrap(), cfg);
}
