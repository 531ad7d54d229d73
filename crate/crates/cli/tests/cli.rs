use std::fs;
use std::path::Path;
use std::process::Command;

use eady_cli::output::{self, Snapshot};
use eady_cli::{run_experiment, ExperimentConfig, Overrides, Preset};
use eady_core::RunParams;

fn eady(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_eady")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut e = Preset::Control.experiment();
    e.params = RunParams { nx: 8, nz: 4, days: 0.05, cadence: 7, ..RunParams::default() };
    e.breed_threshold = 0.0;
    e.snapshot_days = vec![0.0, 0.03];
    ExperimentConfig { name: "tiny".into(), experiment: e, output_dir: dir.to_path_buf() }
}

#[test]
fn zero_days_writes_header_and_initial_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = eady(&["run", "control", "--days", "0", "--nx", "12", "--nz", "6", "--output-dir", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
    assert_eq!(csv, "time_days,E,K_u,K_v,P,rmsv,eta_l2,max_rv,eps_cum\n");
    for f in ["v", "b"] {
        let s = Snapshot::read(&dir.path().join(output::snapshot_name(f, 0.0))).unwrap();
        assert_eq!((s.nx, s.nz, s.time_days), (48, 24, 0.0));
        assert_eq!(s.field, f);
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    let ratio: f64 = summary.split("(ratio ").nth(1).unwrap().split(')').next().unwrap().parse().unwrap();
    assert!(ratio <= 1e-6, "{summary}");
    let echo = Overrides::parse(&fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(echo.days, Some(0.0));
    assert_eq!(echo.nx, Some(12));
}

#[test]
fn bad_alpha_is_a_usage_error() {
    let o = eady(&["run", "control", "--alpha", "0.3", "--days", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "nx = 10\nwibble = 2\n").unwrap();
    let o = eady(&["run", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("wibble"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mine.toml");
    fs::write(&path, "nx = 10\nnz = 5\nbeta = 0.125\ndays = 0\n").unwrap();
    let c = eady_cli::resolve(path.to_str().unwrap(), Overrides { nz: Some(4), ..Default::default() }).unwrap();
    let p = &c.experiment.params;
    assert_eq!((p.nx, p.nz, p.dt), (10, 4, 25.0));
    assert_eq!(c.name, "mine");
}

#[test]
fn short_run_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(a.path())).unwrap();
    run_experiment(&tiny(b.path())).unwrap();
    for f in ["diagnostics.csv", "v_day0.03.txt", "b_day0.03.txt", "summary.txt"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let recs = output::read_diagnostics(&a.path().join("diagnostics.csv")).unwrap();
    assert_eq!(recs.len(), out.records.len());
    assert_eq!(recs.last().unwrap().e.to_bits(), out.records.last().unwrap().e.to_bits());
}

#[test]
fn report_reads_both_csv_kinds() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(dir.path())).unwrap();
    let sweep = dir.path().join("sweep.csv");
    fs::write(&sweep, "beta,dt,eta_l2\n1,50,1e-3\n0.5,50,2.5e-4\n0.25,50,6.25e-5\n").unwrap();
    let o = eady(&["report", dir.path().join("diagnostics.csv").to_str().unwrap(), sweep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("total energy loss"));
    assert!(text.contains("convergence slope: 2.0000"), "{text}");
}
