use std::path::Path;
use std::process::{Command, Output};

fn gda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gda")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_then_validate_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gda(&["synth", "--out-dir", out, "--classes", "4", "--domains", "2", "--per-cell", "3", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = Path::new(out).join("manifest.csv");
    let rows = std::fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(rows, 1 + 4 * 2 * 3);
    let m = manifest.to_str().unwrap();

    // Fully labeled, visible domains: no adaptation setting.
    let o = gda(&["scenario", "validate", "--manifest", m]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "(no named setting)");

    let o = gda(&["scenario", "validate", "--manifest", m, "--split", "d0(0-1), d1(2-3)"]);
    assert_eq!(stdout(&o).trim(), "GDA1");
    let o = gda(&[
        "scenario", "validate", "--manifest", m, "--split", "d0(0-3)", "--show-domains",
    ]);
    assert!(o.status.success());
    let o = gda(&[
        "scenario", "validate", "--manifest", m, "--split", "d0(0-1), d1(2-3)", "--labeled-fraction", "0.5",
    ]);
    assert_eq!(stdout(&o).trim(), "GDA2");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[scenario]\nsplit = \"d0(\"\n").unwrap();
    let o = gda(&["run", "--config", bad.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:"), "{err}");

    let o = gda(&["plot", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no plottable artifacts"));
}

#[test]
fn smoke_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let o = gda(&["run", "--config", config, "--out-dir", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("scenario: GDA1") && text.contains("HOS"), "{text}");

    let o = gda(&["evaluate", "--config", config, "--out-dir", out, "--checkpoint", &format!("{out}/classifier.ckpt")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = gda(&["plot", "--out-dir", out]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("confusion.png"));
}
