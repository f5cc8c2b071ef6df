use bo_emission::harness::{parse_config_str, run, ExperimentConfig, Task};
use bo_emission::Error;

fn config(text: &str, task: Task) -> ExperimentConfig {
    let mut c = parse_config_str(text).unwrap();
    c.task = Some(task);
    c
}

const CONSTANT: &str = r#"
eps = [0.25, 0.125, 0.0625]
t = 0.25
batch = 2
samples = 8

[model]
n_points = 32
uv_cutoff = 4.0

[model.fiber]
kind = "constant"
gap = 1.0
dipole = 0.8
"#;

const ROTATION: &str = r#"
eps = [0.25, 0.125, 0.0625]
t = 0.5
batch = 2
modes = 16
samples = 4

[model]
n_points = 64

[model.fiber]
kind = "rotation"
gap_modulation = 0.2
"#;

#[test]
fn adiabatic_scan_on_constant_fiber_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config(CONSTANT, Task::ScanAdiabatic), dir.path()).unwrap();
    let fit = &rec.fits["adiabatic_error"];
    assert!(fit.degenerate, "{fit:?}");
    assert_eq!(fit.excluded.len(), 3);
    let values: Vec<f64> = rec.rows.iter().filter(|r| r.quantity == "adiabatic_error").map(|r| r.value).collect();
    assert!(values.iter().all(|v| *v < 1e-9), "{values:?}");
}

#[test]
fn clamped_decay_matches_static_golden_rule() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config(CONSTANT, Task::Decay), dir.path()).unwrap();
    let pick = |m: &str| -> Vec<f64> {
        rec.rows.iter().filter(|r| r.method == m && r.eps == Some(0.0625) && r.quantity == "probability").map(|r| r.value).collect()
    };
    let (th, fgr) = (pick("rate-formula"), pick("fgr-static"));
    assert_eq!(th.len(), 9);
    assert!((th[8] - fgr[8]).abs() <= 0.1 * fgr[8], "{} {}", th[8], fgr[8]);
    assert!(th[8] > 0.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    for task in [Task::ScanSuperadiabatic, Task::Decay, Task::Bands] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut cfg = config(ROTATION, task);
        cfg.seed = 11;
        cfg.methods = Some(vec![bo_emission::decay::Method::RateFormula, bo_emission::decay::Method::Oracle]);
        let ra = run(&cfg, a.path()).unwrap();
        run(&cfg, b.path()).unwrap();
        for f in &ra.files {
            let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
            assert!(x == y, "{} differs for {}", f, task.name());
        }
        let csv = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.starts_with(&ra.config_hash) && l.split(',').count() == 7));
    }
}

#[test]
fn budget_is_checked_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(ROTATION, Task::Oracle);
    cfg.budget.max_state_dim = 64 * 2 * 8;
    let start = std::time::Instant::now();
    assert!(matches!(run(&cfg, dir.path()), Err(Error::BudgetExceeded(_))));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(std::fs::read_dir(dir.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn cutoff_must_exceed_gap() {
    let mut cfg = config(ROTATION, Task::Bands);
    cfg.model.uv_cutoff = 2.0;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run(&cfg, dir.path()), Err(Error::Validation(_))));
}
