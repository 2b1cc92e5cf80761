use std::path::Path;
use std::process::Command;

const QUICKSTART: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/quickstart.json");

fn mtwf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtwf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_into(dir: &Path) -> Vec<u8> {
    let out = mtwf(&[
        "run",
        "--config",
        QUICKSTART,
        "--threads",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    std::fs::read(dir.join("report.json")).unwrap()
}

#[test]
fn quickstart_reports_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_into(a.path());
    assert_eq!(first, run_into(b.path()));
    for file in [
        "run.json",
        "history.csv",
        "report.txt",
        "model.json",
        "features.f32",
    ] {
        assert!(a.path().join(file).exists(), "missing {file}");
    }
}

#[test]
fn stages_can_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for stage in ["synth", "defend", "aggregate", "train", "eval", "report"] {
        let o = mtwf(&[stage, "--config", QUICKSTART, "--out", out]);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(
        String::from_utf8(std::fs::read(dir.path().join("report.txt")).unwrap())
            .unwrap()
            .contains("MAP@2")
    );
}

#[test]
fn bad_split_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"training": {"split": {"train": 0.8, "val": 0.2, "test": 0.2}}}"#,
    )
    .unwrap();
    let o = mtwf(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[config]"));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtwf(&[
        "train",
        "--config",
        QUICKSTART,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[train]"));
}
