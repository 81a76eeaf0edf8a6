use std::fs;
use std::process::{Command, Output};

fn qfeedback(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfeedback")).args(args).output().expect("run qfeedback")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn analytic_to_stdout() {
    let o = qfeedback(&["analytic", "--protocol", "XP", "-s", "lambda=0.1", "-s", "gamma=0.2", "-s", "b=1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("# qfeedback 0.1.0 command=analytic protocol=XP"));
    let row = out.lines().nth(2).unwrap();
    assert!(row.starts_with("XP,1.0,0.2,0.1,1.0,1.0,"), "{row}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let o = qfeedback(&["analytic", "-s", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error code=2 kind=config"));
    assert!(o.stdout.is_empty());
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "command = analytic\n[protocol]\nprotocol = X\nlambda = -1\ngamma = 1\nb = 0.5\n").unwrap();
    let o = qfeedback(&["--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn oversized_step_is_a_numeric_error() {
    let o = qfeedback(&[
        "ensemble", "--protocol", "X", "-s", "lambda=0.1", "-s", "gamma=0.5", "-s", "b=0.5", "--dt", "0.5", "--t-final",
        "1", "--n-traj", "4",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error code=3 kind=numeric"));
}

#[test]
fn unwritable_output_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent").join("out.csv");
    let o = qfeedback(&["analytic", "--protocol", "X", "-s", "lambda=0.1", "-s", "gamma=1", "-s", "b=0.5", "-o", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn moments_writes_spectrum_sibling() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = qfeedback(&[
        "moments", "--protocol", "X", "-s", "lambda=0.1", "-s", "gamma=1", "-s", "b=0.5", "--t-final", "1", "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["m.csv", "m.csv.spectrum.csv"]);
}

#[test]
fn validate_passes() {
    let o = qfeedback(&["validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let all = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(all.contains("PASS"));
}

#[test]
fn failed_second_table_removes_the_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    // a directory where the spectrum table should go
    fs::create_dir(dir.path().join("m.csv.spectrum.csv")).unwrap();
    let o = qfeedback(&[
        "moments", "--protocol", "X", "-s", "lambda=0.1", "-s", "gamma=1", "-s", "b=0.5", "--t-final", "1", "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert!(!dir.path().join("m.csv.partial").exists());
    assert!(!dir.path().join("m.csv.spectrum.csv.partial").exists());
}
