use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rcm_vio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcm-vio"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rcm_vio(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn summary_values(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let row = text.lines().nth(1).unwrap();
    row.split(',').map(|c| c.parse().unwrap()).collect()
}

#[test]
fn simulate_then_run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sweep");
    ok(&["simulate", "--preset", "fast-sweep-occlusion", "--out", p(&dir)]);
    for f in ["manifest.toml", "imu.csv", "tracks.csv", "groundtruth.csv", "ir.csv", "calibration.csv"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let stdout = ok(&["run", "--variant", "V3", "--gamma", "0.4", "--in", p(&dir)]);
    assert!(stdout.contains("median rot"));
    let run = dir.join("run-V3");
    for f in ["trajectory.csv", "solves.csv", "errors.csv", "summary.csv", "run_manifest.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(run.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("gamma = 0.4") && manifest.contains("variant = V3"));
}

#[test]
fn evaluate_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    ok(&["simulate", "--preset", "standard", "--duration", "3", "--out", p(&dir)]);
    let gt = dir.join("groundtruth.csv");
    let out = tmp.path().join("eval");
    let stdout = ok(&["evaluate", "--ref", p(&gt), "--est", p(&gt), "--out", p(&out)]);
    assert!(stdout.contains("median 0.000000e0 rad"));
    let v = summary_values(&out.join("summary.csv"));
    assert_eq!(v[0], 180.0);
    assert!(v[2..].iter().all(|x| *x == 0.0), "{v:?}");
    assert!(out.join("run_manifest.txt").is_file());
}

#[test]
fn run_manifest_reproduces_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    ok(&["simulate", "--preset", "standard", "--duration", "12", "--seed", "3", "--out", p(&dir)]);
    let first = tmp.path().join("a");
    ok(&["run", "--in", p(&dir), "--variant", "V4", "--set", "trigger=4", "--set", "window=6", "--gamma", "0.3", "--out", p(&first)]);
    let second = tmp.path().join("b");
    let manifest = first.join("run_manifest.txt");
    ok(&["run", "--in", p(&dir), "--config", p(&manifest), "--out", p(&second)]);
    for f in ["trajectory.csv", "solves.csv", "errors.csv", "summary.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let solves = fs::read_to_string(first.join("solves.csv")).unwrap();
    assert!(solves.lines().count() > 2);
}

#[test]
fn ablation_and_sweep_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = ["--preset", "inward-motion", "--duration", "10", "--seed", "11"];
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let ablate = tmp.path().join(format!("ablate-{name}"));
        let mut args = vec!["ablate"];
        args.extend(scenario);
        args.extend(["--out", p(&ablate)]);
        let stdout = ok(&args);
        assert_eq!(stdout.lines().filter(|l| l.contains("median rot")).count(), 4);
        let sweep = tmp.path().join(format!("sweep-{name}"));
        let mut args = vec!["sweep-gamma", "--grid", "0,0.4,1"];
        args.extend(scenario);
        args.extend(["--out", p(&sweep)]);
        ok(&args);
        outs.push((ablate, sweep));
    }
    let (a, b) = (&outs[0], &outs[1]);
    let body = |dir: &Path| -> String {
        let text = fs::read_to_string(dir.join("run_manifest.txt")).unwrap();
        text.lines().filter(|l| !l.starts_with('#')).collect()
    };
    assert_eq!(body(&a.0), body(&b.0));
    for f in ["ablation_series.csv", "ablation_summary.csv", "scenario.toml"] {
        assert_eq!(fs::read(a.0.join(f)).unwrap(), fs::read(b.0.join(f)).unwrap(), "{f}");
    }
    for f in ["gamma_delta.csv", "gamma_series.csv", "gamma_summary.csv"] {
        assert_eq!(fs::read(a.1.join(f)).unwrap(), fs::read(b.1.join(f)).unwrap(), "{f}");
    }
    let delta = fs::read_to_string(a.1.join("gamma_delta.csv")).unwrap();
    assert_eq!(delta.lines().count(), 4);
}

#[test]
fn calibration_commands_recover_the_injected_values() {
    let tmp = tempfile::tempdir().unwrap();
    let wand = tmp.path().join("wand");
    ok(&["simulate", "--preset", "calibration-wand", "--out", p(&wand)]);
    let cal = tmp.path().join("cal");
    ok(&["calibrate-imu", "--in", p(&wand.join("imu.csv")), "--out", p(&cal)]);
    assert!(cal.join("imu_calibration.csv").is_file());

    let sim = tmp.path().join("offset");
    ok(&[
        "simulate", "--preset", "standard", "--duration", "20", "--param", "imu_offset=0.166", "--out", p(&sim),
    ]);
    let off = tmp.path().join("time");
    let stdout = ok(&[
        "calibrate-time", "--imu", p(&sim.join("imu.csv")), "--poses", p(&sim.join("ir.csv")), "--out", p(&off),
    ]);
    assert!(stdout.contains("ms"));
    let text = fs::read_to_string(off.join("offset.csv")).unwrap();
    let offset: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((offset - 0.166).abs() <= 0.001 + 1e-12, "{offset}");
}

#[test]
fn stats_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("stats");
    let stdout = ok(&["stats", "--preset", "standard", "--duration", "8", "--out", p(&out)]);
    for kind in ["pivot", "accel", "mag", "reproj", "gyro"] {
        assert!(stdout.contains(kind));
    }
    let text = fs::read_to_string(out.join("residual_stats.csv")).unwrap();
    assert!(text.starts_with("kind,E,Var,N,unit"));
}

#[test]
fn help_is_available_everywhere() {
    let out = rcm_vio(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for cmd in [
        "simulate",
        "run",
        "calibrate-imu",
        "calibrate-time",
        "stats",
        "ablate",
        "sweep-gamma",
        "evaluate",
    ] {
        let out = rcm_vio(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--bogus"],
        vec!["frobnicate"],
        vec!["run", "--in", p(&missing)],
        vec!["evaluate", "--ref", p(&missing), "--est", p(&missing)],
        vec!["simulate", "--preset", "nope", "--out", p(&missing)],
        vec!["stats", "--preset", "standard", "--set", "nope=1", "--out", p(&missing)],
        vec!["sweep-gamma", "--preset", "standard", "--grid", "1.5", "--out", p(&missing)],
    ];
    for args in cases {
        let out = rcm_vio(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    assert!(!missing.exists());
}
