//! `rcm-vio` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "rcm-vio", version, about = "Visual-inertial localization for RCM-constrained laparoscopes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment settings shared by every command that runs the tracker.
#[derive(Debug, Args, Clone, Default)]
pub struct ExperimentArgs {
    /// `key = value` config file, applied before any flag.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Single config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Residual statistics CSV (kind,E,Var,N,unit) used for normalization.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Variant name: V1, V2, V3 or V4.
    #[arg(long)]
    pub variant: Option<String>,
    /// Gyro versus reprojection trade-off in [0, 1].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Solve every TRIGGER keyframes.
    #[arg(long)]
    pub trigger: Option<usize>,
    /// Keyframes per optimization window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Disable the windowed optimization.
    #[arg(long)]
    pub no_opt: bool,
}

/// Where a synthetic scenario comes from.
#[derive(Debug, Args, Clone, Default)]
pub struct ScenarioArgs {
    /// Named preset scenario.
    #[arg(long, conflicts_with_all = ["scenario", "input"])]
    pub preset: Option<String>,
    /// Scenario manifest (TOML).
    #[arg(long, value_name = "FILE", conflicts_with = "input")]
    pub scenario: Option<PathBuf>,
    /// Directory written by `simulate`; its manifest is regenerated.
    #[arg(long = "in", value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the scenario duration, s.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Scenario field override, repeatable (TOML value syntax).
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Part {
    Full,
    Angular,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario and write its streams.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the tracker on a stream directory.
    Run {
        /// Directory holding calibration.csv, imu_calibration.csv, imu.csv and tracks.csv.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Reference trajectory for the initial pose and the error report
        /// [default: DIR/groundtruth.csv, else DIR/ir.csv].
        #[arg(long = "ref", value_name = "FILE")]
        reference: Option<PathBuf>,
        /// IMU calibration [default: DIR/imu_calibration.csv].
        #[arg(long, value_name = "FILE")]
        imu_calibration: Option<PathBuf>,
        /// Output directory [default: DIR/run-VARIANT].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Fit accelerometer and magnetometer bias and scale from an IMU stream.
    CalibrateImu {
        /// IMU CSV.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Estimate the IMU-to-tracker clock offset from twist streams.
    CalibrateTime {
        #[arg(long, value_name = "FILE")]
        imu: PathBuf,
        /// Tracker poses (camera from world).
        #[arg(long, value_name = "FILE")]
        poses: PathBuf,
        #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 0.001)]
        step: f64,
        #[arg(long, value_enum, default_value_t = Part::Angular)]
        part: Part,
        /// Output directory for offset.csv and the cost curve.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Residual statistics from an unoptimized run.
    Stats {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run V1 to V4 on one scenario and compare their errors.
    Ablate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Optimized runs over a grid of gamma values.
    SweepGamma {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Comma-separated gamma values [default: 0, 0.1, ..., 1].
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Rotational and translational errors of an estimate against a reference.
    Evaluate {
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long = "est", value_name = "FILE")]
        estimate: PathBuf,
        /// Directory for errors.csv, summary.csv and the manifest.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, out } => commands::simulate(&scenario, &out),
        Command::Run {
            input,
            reference,
            imu_calibration,
            out,
            experiment,
        } => commands::run(&input, reference.as_deref(), imu_calibration.as_deref(), out.as_deref(), &experiment),
        Command::CalibrateImu { input, out } => commands::calibrate_imu(&input, &out),
        Command::CalibrateTime {
            imu,
            poses,
            min,
            max,
            step,
            part,
            out,
        } => commands::calibrate_time(&imu, &poses, (min, max, step), part, &out),
        Command::Stats { scenario, experiment, out } => commands::stats(&scenario, &experiment, &out),
        Command::Ablate { scenario, experiment, out } => commands::ablate(&scenario, &experiment, &out),
        Command::SweepGamma {
            scenario,
            experiment,
            grid,
            out,
        } => commands::sweep_gamma(&scenario, &experiment, &grid, &out),
        Command::Evaluate { reference, estimate, out } => commands::evaluate(&reference, &estimate, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
