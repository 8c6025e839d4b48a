use std::fs;
use std::process::Command;

fn wgpath() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wgpath"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn lists_and_prints_presets() {
    let out = wgpath().arg("preset").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "ou2d-isotropic"));
    let out = wgpath().args(["preset", "zero-energy"]).output().unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("name = \"zero-energy\""));
    assert!(!wgpath().args(["preset", "nope"]).status().unwrap().success());
}

#[test]
fn run_validate_and_compare_zero_energy() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let status = wgpath()
        .args(["run", "zero-energy", "--seed", "3", "--out"])
        .arg(&run_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let out = wgpath().arg("validate-only").arg(&run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("reproduced exactly"));
    // A stationary path has no physical time.
    assert_eq!(wgpath().arg("recover-time").arg(&run_dir).status().unwrap().code(), Some(2));
    let out = wgpath().arg("compare-meshes").arg(&run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("degenerate path"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let text = String::from_utf8(wgpath().args(["preset", "zero-energy"]).output().unwrap().stdout).unwrap();

    let failing = dir.path().join("failing.toml");
    fs::write(&failing, text.replace("max_segment = 0.000001", "max_segment = -1.0")).unwrap();
    let status = wgpath().arg("run").arg(&failing).arg("--out").arg(dir.path().join("a")).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, text.replace("version = 1", "version = 9")).unwrap();
    let out = wgpath().arg("run").arg(&invalid).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("version"));
}
