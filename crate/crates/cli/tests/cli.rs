use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_boemit");

const CLAMPED: &str = r#"
eps = [0.25, 0.125, 0.0625]
t = 0.25
batch = 2
samples = 4

[model]
n_points = 16
uv_cutoff = 4.0

[model.fiber]
kind = "constant"
gap = 1.0
dipole = 1.0
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn status(args: &[&str]) -> i32 {
    Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLAMPED);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(status(&["decay", "--config", cfg, "--out", out]), 0);
    assert!(dir.path().join("out/results.csv").exists());
    assert_eq!(status(&["decay", "--config", cfg, "--out", out, "--beta", "0.5"]), 2);
    assert_eq!(status(&["decay", "--config", cfg, "--out", out, "--beta", "0.5", "--unsafe-beta"]), 0);
    assert_eq!(status(&["scan-adiabatic", "--config", cfg, "--out", out, "--eps", "0.25,0.125"]), 2);
    assert_eq!(status(&["propagate-full", "--config", cfg, "--out", out, "--eps", "0.0001"]), 3);
    let broken = write_config(dir.path(), "beta = [\n");
    assert_eq!(status(&["bands", "--config", broken.to_str().unwrap(), "--out", out]), 2);
}

#[test]
fn fit_reads_back_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLAMPED);
    let out = dir.path().join("out");
    assert_eq!(status(&["decay", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--method", "rate-formula"]), 0);
    assert_eq!(status(&["fit", "--input", out.join("results.csv").to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let fits = std::fs::read_to_string(out.join("fits.json")).unwrap();
    // the constant rate probability at fixed t scales as eps^(3 beta - 1) = eps^2
    let v: serde_json::Value = serde_json::from_str(&fits).unwrap();
    let e = v["rate-formula/probability/t=2.5e-1"]["exponent"].as_f64().unwrap();
    assert!((e - 2.0).abs() < 1e-9, "{e}");
}
