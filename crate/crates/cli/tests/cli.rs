use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsnet"))
        .args(args)
        .env("TSNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = r#"{"train": {"epochs": 2, "mu_hidden": [6], "sigma_hidden": [4], "embed_levels": 1}}"#;

#[test]
fn help_succeeds() {
    let o = tsnet(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["toy1d", "toy2d", "compare", "antinoise", "active", "ablate", "predict"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad_key = write(dir.path(), "a.json", r#"{"train": {"epoch": 2}}"#);
    assert_eq!(code(&tsnet(&["toy1d", "--config", &bad_key])), 2);
    let missing = write(
        dir.path(),
        "b.json",
        r#"{"data": {"kind": "csv", "path": "nope.csv", "schema": "nope.json"}}"#,
    );
    assert_eq!(code(&tsnet(&["compare", "--config", &missing])), 2);
    assert_eq!(code(&tsnet(&["toy1d", "--seed", "x"])), 2);
    assert_eq!(code(&tsnet(&["frobnicate"])), 2);
}

#[test]
fn malformed_data_exits_3() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "d.csv", "a,b,y\n1,2,3\n4,oops,6\n");
    write(dir.path(), "s.json", r#"{"target": "y"}"#);
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"data": {"kind": "csv", "path": "d.csv", "schema": "s.json"}}"#,
    );
    let o = tsnet(&["compare", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
}

#[test]
fn divergence_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"train": {"epochs": 3, "lr": 1e300, "mu_hidden": [4], "sigma_hidden": [4], "variant": "mlp"}}"#,
    );
    let out = dir.path().join("out");
    let o = tsnet(&["toy1d", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(report.contains("\"divergence\""));
}

#[test]
fn toy1d_run_then_predict() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let out = dir.path().join("run");
    let o = tsnet(&["toy1d", "--config", &cfg, "--seed", "3,4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "predictions.csv", "history.csv", "model.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("x,mu_y,var_y,k_d"));
    assert_eq!(lines.count(), 300);
    let hist = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss_total,loss_cl,loss_kl,loss_hmse,val_mse,val_mae,val_nll,wall_secs\n"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([3, 4]));

    let input = write(dir.path(), "in.csv", "x\n-1\n0\n2.5\n");
    let pout = dir.path().join("pred");
    let o = tsnet(&[
        "predict",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--input",
        &input,
        "--out",
        pout.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p = std::fs::read_to_string(pout.join("predictions.csv")).unwrap();
    assert_eq!(p.lines().count(), 4);
}

#[test]
fn toy2d_grid_has_2500_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let out = dir.path().join("run");
    let o = tsnet(&["toy2d", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("x,y,mu_z,var_z,k_d"));
    assert_eq!(preds.lines().count(), 2501);
}

#[test]
fn predict_rejects_missing_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", TINY);
    let out = dir.path().join("run");
    assert_eq!(code(&tsnet(&["toy1d", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()])), 0);
    let input = write(dir.path(), "in.csv", "w\n1\n");
    let o = tsnet(&["predict", "--model", out.join("model.json").to_str().unwrap(), "--input", &input]);
    assert_eq!(code(&o), 3);
}
