use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_riccati-obs"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_the_series_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("scenario1.cfg");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--set", "horizon=0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["log.csv", "positions.csv", "bias.csv", "lyapunov.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(header.starts_with("t,x1,x2,x3,xhat1,xhat2,xhat3,a1,a2,a3,ahat1,ahat2,ahat3,lyap,log_lyap,lam_min_P,lam_max_P\n"));
    assert_eq!(header.lines().count(), 502);
}

#[test]
fn seeds_fan_out_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("noisy.cfg");
    let o = run(&[
        "run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
        "--seed", "1", "--seed", "2", "--jobs", "2", "--set", "horizon=0.2",
    ]);
    assert!(o.status.success());
    let a = fs::read_to_string(dir.path().join("seed-1/log.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("seed-2/log.csv")).unwrap();
    assert_ne!(a, b);
    assert!(fs::read_to_string(dir.path().join("seed-2/summary.txt")).unwrap().contains("seed = 2"));
}

#[test]
fn check_static_reports_both_sides_of_the_dichotomy() {
    let o = run(&["check-static", "--sources", config("equalradius.cfg").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "DEGENERATE: w exists (w=0)");
    let o = run(&["check-static", "--sources", config("generic_static.cfg").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("NON-DEGENERATE"));
}

#[test]
fn sweep_pe_flags_the_circle_with_one_range_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("scenario2_range.cfg");
    let o = run(&["sweep-pe", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stability guaranteed: false"));
    let csv = fs::read_to_string(dir.path().join("pe_report.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("range_udot,") && row.ends_with(",false"), "{row}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("scenario1.cfg");
    let cfg = cfg.to_str().unwrap();

    let o = run(&["run", "--config", cfg, "--out", out, "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'bogus'"));

    let o = run(&["run", "--config", "/nonexistent.cfg", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[sources]\npoints = 0 0 0; 1 0 0; 0 1 0\nalpha = 0.5 0.5 0.5\n[observer]\nvariant = range_multi_unbiased\n").unwrap();
    let o = run(&["run", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    // an absurd initial covariance overwhelms the integrator
    let o = run(&["run", "--config", cfg, "--out", out, "--set", "horizon=0.05", "--set", "p0_scale=1e12"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("status = failed"));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bench_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--horizon", "0.05", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(stdout(&o).contains("range_alternate"));
}
