//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rcm_vio::camera::{self, CameraError};
use rcm_vio::eval::{self, EvalError};
use rcm_vio::io::{self, DataError};
use rcm_vio::odometry::{self, OdometryError, OdometryInput, RunOutput};
use rcm_vio::residuals::{ResidualError, ResidualKind};
use rcm_vio::sensors::{self, OffsetGrid, SensorError, TimedPose, TwistPart};
use rcm_vio::simulator::{self, SimError, Simulation};
use rcm_vio::tracks::{self, TrackError};
use rcm_vio::{ResidualStatistics, Scenario, Transform, VariantConfig, Vec3};
use thiserror::Error;

use crate::config::{ConfigError, Experiment};
use crate::{ExperimentArgs, Part, ScenarioArgs};

pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const SCENARIO_MANIFEST: &str = "scenario.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl CliError {
    /// 2 for usage and configuration mistakes, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("input not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| {
        CliError::Data(DataError::Io {
            path: dir.display().to_string(),
            source,
        })
    })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    io::write_text(&path, text)?;
    Ok(path)
}

fn experiment(args: &ExperimentArgs) -> Result<Experiment> {
    let mut e = Experiment::default();
    if let Some(path) = &args.config {
        e.apply_file(require(path)?)?;
    }
    if let Some(path) = &args.stats {
        e.set_stats(ResidualStatistics::read(require(path)?)?);
    }
    for kv in &args.overrides {
        e.apply_override(kv)?;
    }
    if let Some(v) = &args.variant {
        e.set("variant", v)?;
    }
    if let Some(g) = args.gamma {
        e.optimizer.weights.gamma = g;
    }
    if let Some(k) = args.trigger {
        e.optimizer.trigger = k;
    }
    if let Some(w) = args.window {
        e.optimizer.window = w;
    }
    if args.no_opt {
        e.variant = e.variant.with_optimization(false);
    }
    e.validate()?;
    Ok(e)
}

fn set_param(sc: &Scenario, kv: &str) -> Result<Scenario> {
    let (key, value) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("parameter `{kv}` is not of the form key=value")))?;
    let mut table = toml::Table::try_from(sc).map_err(|e| CliError::Usage(e.to_string()))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
    table.insert(key.trim().to_string(), parsed);
    Ok(Scenario::from_manifest(&table.to_string())?)
}

fn scenario(args: &ScenarioArgs) -> Result<Scenario> {
    let mut sc = match (&args.preset, &args.scenario, &args.input) {
        (Some(name), None, None) => Scenario::preset(name).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(path), None) => simulator::load_manifest(require(path)?)?,
        (None, None, Some(dir)) => simulator::load_manifest(require(&dir.join(simulator::MANIFEST_FILE))?)?,
        _ => return Err(CliError::Usage("give exactly one of --preset, --scenario or --in".into())),
    };
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(d) = args.duration {
        sc.duration = d;
    }
    for kv in &args.params {
        sc = set_param(&sc, kv)?;
    }
    sc.validate()?;
    Ok(sc)
}

/// Writes the experiment as a config file, headed by the command line.
fn write_manifest(dir: &Path, experiment: Option<&Experiment>, inputs: &[(&str, &Path)]) -> Result<PathBuf> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut text = format!("# rcm-vio {}\n", args.join(" "));
    for (name, path) in inputs {
        let _ = writeln!(text, "# {name}: {}", path.display());
    }
    if let Some(e) = experiment {
        text.push_str(&e.to_text());
    }
    write(dir, RUN_MANIFEST, &text)
}

fn print_summary_row(label: &str, s: &eval::ErrorSummary) {
    println!(
        "{label:<10} median rot {:.3e} rad  p95 rot {:.3e} rad  median trans {:.3e} m  p95 trans {:.3e} m",
        s.median_rotation, s.p95_rotation, s.median_translation, s.p95_translation
    );
}

pub fn simulate(args: &ScenarioArgs, out: &Path) -> Result<()> {
    let sc = scenario(args)?;
    let sim = simulator::generate(&sc)?;
    let files = simulator::emit(&sim, out)?;
    let tracks: usize = sim.frames.iter().map(|f| f.lenses[0].len() + f.lenses[1].len()).sum();
    println!(
        "scenario {} seed {}: {:.1} s, {} imu samples, {} frames, {} track rows, {} ir poses",
        sc.name,
        sc.seed,
        sc.duration,
        sim.imu.len(),
        sim.frames.len(),
        tracks,
        sim.ir.len()
    );
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn nearest_pose(poses: &[TimedPose], t: f64) -> Option<Transform> {
    poses
        .iter()
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .map(|p| p.pose)
}

fn solves_csv(output: &RunOutput) -> String {
    let mut out = String::from(
        "first,last,iterations,termination,final_lambda,cost_before,cost_after,df_pivot,df_accel,df_mag,df_reproj,df_gyro\n",
    );
    for r in &output.reports {
        let _ = write!(
            out,
            "{},{},{},{:?},{},{},{}",
            r.window.0, r.window.1, r.iterations, r.termination, r.final_lambda, r.before.total, r.after.total
        );
        for d in r.delta_f() {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
    }
    out
}

pub fn run(
    input: &Path,
    reference: Option<&Path>,
    imu_calibration: Option<&Path>,
    out: Option<&Path>,
    args: &ExperimentArgs,
) -> Result<()> {
    let e = experiment(args)?;
    require(input)?;
    let rig = camera::read_calibration(require(&input.join(simulator::CALIBRATION_FILE))?)?;
    let cal_path = imu_calibration.map_or_else(|| input.join(simulator::IMU_CALIBRATION_FILE), Path::to_path_buf);
    let calibration = sensors::parse_imu_calibration(&io::read_text(require(&cal_path)?)?)?;
    let imu = sensors::parse_imu_csv(&io::read_text(require(&input.join(simulator::IMU_FILE))?)?)?;
    let frames = tracks::parse_track_csv(
        &io::read_text(require(&input.join(simulator::TRACK_FILE))?)?,
        e.max_track_gap,
    )?;
    let ref_path = match reference {
        Some(p) => require(p)?.to_path_buf(),
        None => [simulator::GROUND_TRUTH_FILE, simulator::IR_FILE]
            .iter()
            .map(|f| input.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| CliError::Usage(format!("no reference trajectory in {}; pass --ref", input.display())))?,
    };
    let ref_poses = sensors::parse_pose_csv(&io::read_text(&ref_path)?)?;
    let first = frames
        .first()
        .ok_or_else(|| CliError::Usage("track file holds no frames".into()))?;
    let initial_pose = nearest_pose(&ref_poses, first.t)
        .ok_or_else(|| CliError::Usage("reference trajectory is empty".into()))?;

    let output = odometry::run(
        OdometryInput {
            rig: &rig,
            imu: &imu,
            calibration: &calibration,
            frames: &frames,
            initial_pose,
            pivot: Vec3::zeros(),
            imu_offset: e.imu_offset,
        },
        e.variant,
        &e.odometry,
        &e.optimizer,
    )?;

    let name = e.variant.name().unwrap_or("custom");
    let out = out.map_or_else(|| input.join(format!("run-{name}")), Path::to_path_buf);
    create_dir(&out)?;
    write(&out, "trajectory.csv", &odometry::format_trajectory_csv(&output.trajectory))?;
    write(&out, "solves.csv", &solves_csv(&output))?;
    match eval::residual_stats(&output.graph) {
        Ok(stats) => {
            write(&out, "residual_stats.csv", &stats.to_csv())?;
        }
        Err(err) => eprintln!("note: residual statistics unavailable: {err}"),
    }
    if let Some(p) = &output.pivot {
        write(
            &out,
            "pivot.csv",
            &format!("x,y,z,confidence\n{},{},{},{}\n", p.point.x, p.point.y, p.point.z, p.confidence),
        )?;
    }
    let errors = eval::trajectory_errors(&ref_poses, &output.trajectory)?;
    write(&out, "errors.csv", &errors.to_csv())?;
    let summary = errors.summary();
    write(&out, "summary.csv", &format!("{}\n{}\n", eval::ErrorSummary::csv_header(), summary.csv_row()))?;
    write_manifest(&out, Some(&e), &[("input", input), ("reference", &ref_path), ("imu_calibration", &cal_path)])?;

    let c = output.counters;
    println!(
        "{name}{} gamma {}: {} frames, {} keyframes, {} visual updates, {} lost, {} rejected, {} solves",
        if e.variant.use_optimization { " + optimization" } else { "" },
        e.optimizer.weights.gamma,
        c.frames,
        c.keyframes,
        c.visual_updates,
        c.lost,
        c.rejected,
        c.solves
    );
    print_summary_row(name, &summary);
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn calibrate_imu(input: &Path, out: &Path) -> Result<()> {
    let imu = sensors::parse_imu_csv(&io::read_text(require(input)?)?)?;
    let cal = sensors::calibrate_imu(&imu)?;
    create_dir(out)?;
    write(out, simulator::IMU_CALIBRATION_FILE, &sensors::format_imu_calibration(&cal))?;
    write_manifest(out, None, &[("imu", input)])?;
    println!(
        "accel bias ({:.5}, {:.5}, {:.5}) g  scale {:.5}  residual sigma {:.2e} g",
        cal.accel_bias.x, cal.accel_bias.y, cal.accel_bias.z, cal.accel_scale, cal.sigma_accel
    );
    println!(
        "mag bias ({:.4}, {:.4}, {:.4}) uT  scale {:.5}  residual sigma {:.2e} uT",
        cal.mag_bias.x, cal.mag_bias.y, cal.mag_bias.z, cal.mag_scale, cal.sigma_mag
    );
    Ok(())
}

pub fn calibrate_time(imu: &Path, poses: &Path, grid: (f64, f64, f64), part: Part, out: &Path) -> Result<()> {
    let samples = sensors::parse_imu_csv(&io::read_text(require(imu)?)?)?;
    let tracked = sensors::parse_pose_csv(&io::read_text(require(poses)?)?)?;
    // twists are taken in the body frame, so poses are inverted to world ← camera
    let body: Vec<TimedPose> = tracked
        .iter()
        .map(|p| TimedPose {
            t: p.t,
            pose: p.pose.inverse(),
        })
        .collect();
    let part = match part {
        Part::Full => TwistPart::Full,
        Part::Angular => TwistPart::Angular,
    };
    let grid = OffsetGrid {
        min: grid.0,
        max: grid.1,
        step: grid.2,
    };
    let est = sensors::estimate_time_offset(
        &sensors::gyro_twists(&samples),
        &sensors::twist_from_trajectory(&body)?,
        &grid,
        part,
    )?;
    create_dir(out)?;
    write(out, "offset.csv", &format!("offset_s,unreliable\n{},{}\n", est.offset, est.unreliable))?;
    let mut curve = String::from("offset_s,cost\n");
    for (dt, c) in &est.curve {
        let _ = writeln!(curve, "{dt},{c}");
    }
    write(out, "offset_curve.csv", &curve)?;
    write_manifest(out, None, &[("imu", imu), ("poses", poses)])?;
    println!(
        "imu clock minus pose clock: {:.1} ms{}",
        est.offset * 1e3,
        if est.unreliable { " (unreliable: flat cost curve)" } else { "" }
    );
    Ok(())
}

fn generate(args: &ScenarioArgs, out: &Path) -> Result<(Scenario, Simulation)> {
    let sc = scenario(args)?;
    let sim = simulator::generate(&sc)?;
    create_dir(out)?;
    write(out, SCENARIO_MANIFEST, &sc.to_manifest())?;
    Ok((sc, sim))
}

pub fn stats(args: &ScenarioArgs, exp: &ExperimentArgs, out: &Path) -> Result<()> {
    let e = experiment(exp)?;
    let (sc, sim) = generate(args, out)?;
    let variant = e.variant.with_optimization(false);
    let output = eval::run_simulation(&sim, variant, &e.odometry, &e.optimizer)?;
    let stats = eval::residual_stats(&output.graph)?;
    write(out, "residual_stats.csv", &stats.to_csv())?;
    write_manifest(out, Some(&e), &[("scenario", &out.join(SCENARIO_MANIFEST))])?;
    println!("residual statistics of {} seed {} ({} keyframes)", sc.name, sc.seed, output.graph.keyframes.len());
    println!("{:<8} {:>12} {:>12} {:>9}  unit", "kind", "E", "Var", "N");
    for kind in ResidualKind::ALL {
        let s = stats.get(kind);
        println!("{:<8} {:>12.4e} {:>12.4e} {:>9}  {}", kind.name(), s.mean, s.variance, s.count, kind.unit());
    }
    Ok(())
}

pub fn ablate(args: &ScenarioArgs, exp: &ExperimentArgs, out: &Path) -> Result<()> {
    let e = experiment(exp)?;
    let (sc, sim) = generate(args, out)?;
    let opt = e.variant.use_optimization;
    let variants: Vec<(String, VariantConfig)> = VariantConfig::ALL
        .iter()
        .map(|(n, v)| (if opt { format!("{n}+opt") } else { n.to_string() }, v.with_optimization(opt)))
        .collect();
    let rows = eval::ablation(&sim, &variants, &e.odometry, &e.optimizer)?;
    write(out, "ablation_series.csv", &eval::ablation_series_csv(&rows))?;
    write(out, "ablation_summary.csv", &eval::ablation_summary_csv(&rows))?;
    write_manifest(out, Some(&e), &[("scenario", &out.join(SCENARIO_MANIFEST))])?;
    println!("ablation on {} seed {}", sc.name, sc.seed);
    for row in &rows {
        print_summary_row(&row.name, &row.summary);
    }
    Ok(())
}

pub fn sweep_gamma(args: &ScenarioArgs, exp: &ExperimentArgs, grid: &[f64], out: &Path) -> Result<()> {
    let e = experiment(exp)?;
    let grid = if grid.is_empty() { eval::default_gamma_grid() } else { grid.to_vec() };
    if let Some(g) = grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(CliError::Usage(format!("gamma {g} outside [0, 1]")));
    }
    let (sc, sim) = generate(args, out)?;
    let results = eval::gamma_sweep(&sim, &grid, e.variant, &e.odometry, &e.optimizer)?;
    write(out, "gamma_delta.csv", &eval::gamma_delta_csv(&results))?;
    write(out, "gamma_series.csv", &eval::gamma_series_csv(&results))?;
    let mut summary = format!("gamma,{}\n", eval::ErrorSummary::csv_header());
    for r in &results {
        let _ = writeln!(summary, "{},{}", r.gamma, r.summary.csv_row());
    }
    write(out, "gamma_summary.csv", &summary)?;
    write_manifest(out, Some(&e), &[("scenario", &out.join(SCENARIO_MANIFEST))])?;
    println!("gamma sweep on {} seed {}", sc.name, sc.seed);
    println!("{:>6} {:>7} {:>12} {:>12} {:>12} {:>12}", "gamma", "solves", "df_reproj", "df_gyro", "med rot", "med trans");
    for r in &results {
        println!(
            "{:>6} {:>7} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            r.gamma,
            r.solves,
            r.mean_delta_f[ResidualKind::Reproj.index()],
            r.mean_delta_f[ResidualKind::Gyro.index()],
            r.summary.median_rotation,
            r.summary.median_translation
        );
    }
    Ok(())
}

pub fn evaluate(reference: &Path, estimate: &Path, out: Option<&Path>) -> Result<()> {
    let r = sensors::parse_pose_csv(&io::read_text(require(reference)?)?)?;
    let est = sensors::parse_pose_csv(&io::read_text(require(estimate)?)?)?;
    let errors = eval::trajectory_errors(&r, &est)?;
    let s = errors.summary();
    if let Some(dir) = out {
        create_dir(dir)?;
        write(dir, "errors.csv", &errors.to_csv())?;
        write(dir, "summary.csv", &format!("{}\n{}\n", eval::ErrorSummary::csv_header(), s.csv_row()))?;
        write_manifest(dir, None, &[("reference", reference), ("estimate", estimate)])?;
    }
    println!("{} samples matched, {} skipped", s.count, s.skipped);
    println!("rotation    median {:.6e} rad  p95 {:.6e} rad  max {:.6e} rad", s.median_rotation, s.p95_rotation, s.max_rotation);
    println!(
        "translation median {:.6e} m  p95 {:.6e} m  max {:.6e} m",
        s.median_translation, s.p95_translation, s.max_translation
    );
    Ok(())
}
