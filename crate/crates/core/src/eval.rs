//! Pose error metrics, residual statistics over keyframe graphs, and the
//! variant ablation and γ-sweep harnesses.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Lens;
use crate::geometry::{ominus, GeometryError, Transform};
use crate::odometry::{self, Keyframe, KeyframeGraph, OdometryConfig, OdometryError, OdometryInput, RunOutput, VariantConfig};
use crate::optimizer::{enumerate_measurements, OptimizerConfig};
use crate::residuals::{
    Landmark, Observation, ResidualBlock, ResidualContext, ResidualError, ResidualKind,
    ResidualStatistics, Robustifier, StatisticsAccumulator,
};
use crate::sensors::{integrate_gyro_between, PreintegratedGyro, TimedPose};
use crate::simulator::Simulation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimate sample has a reference pose within {tolerance:.4} s")]
    NoMatches { tolerance: f64 },
    #[error("reference trajectory needs at least two poses")]
    ShortReference,
    #[error("gamma {0} outside [0, 1]")]
    BadGamma(f64),
    #[error("keyframe stride must be a positive multiple of {0} frames")]
    BadStride(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
}

/// Rotational and translational norms of `T_ref ⊖ T_est`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub t: f64,
    pub rotation: f64,
    pub translation: f64,
}

pub fn pose_error(reference: &Transform, estimate: &Transform) -> Result<PoseError, EvalError> {
    let xi = ominus(reference, estimate)?;
    Ok(PoseError {
        t: 0.0,
        rotation: xi.omega.norm(),
        translation: xi.upsilon.norm(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub errors: Vec<PoseError>,
    /// Estimate samples without a reference within tolerance.
    pub skipped: usize,
}

/// Pairs each estimate with the nearest reference sample within half the
/// reference sampling period.
pub fn trajectory_errors(reference: &[TimedPose], estimate: &[TimedPose]) -> Result<ErrorSeries, EvalError> {
    if reference.len() < 2 {
        return Err(EvalError::ShortReference);
    }
    let mut periods: Vec<f64> = reference.windows(2).map(|w| w[1].t - w[0].t).collect();
    periods.sort_by(f64::total_cmp);
    let tolerance = 0.5 * periods[periods.len() / 2] + 1e-9;
    let mut errors = Vec::with_capacity(estimate.len());
    let mut skipped = 0;
    for est in estimate {
        let i = reference.partition_point(|r| r.t < est.t);
        let nearest = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| reference.get(j))
            .min_by(|a, b| (a.t - est.t).abs().total_cmp(&(b.t - est.t).abs()));
        match nearest {
            Some(r) if (r.t - est.t).abs() <= tolerance => {
                let mut e = pose_error(&r.pose, &est.pose)?;
                e.t = est.t;
                errors.push(e);
            }
            _ => skipped += 1,
        }
    }
    if errors.is_empty() {
        return Err(EvalError::NoMatches { tolerance });
    }
    Ok(ErrorSeries { errors, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub count: usize,
    pub skipped: usize,
    pub median_rotation: f64,
    pub p95_rotation: f64,
    pub max_rotation: f64,
    pub final_rotation: f64,
    pub median_translation: f64,
    pub p95_translation: f64,
    pub max_translation: f64,
    pub final_translation: f64,
}

/// Nearest-rank percentile of a non-empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ErrorSeries {
    pub fn summary(&self) -> ErrorSummary {
        let rot: Vec<f64> = self.errors.iter().map(|e| e.rotation).collect();
        let tr: Vec<f64> = self.errors.iter().map(|e| e.translation).collect();
        let last = self.errors.last().copied().unwrap_or(PoseError {
            t: 0.0,
            rotation: 0.0,
            translation: 0.0,
        });
        ErrorSummary {
            count: self.errors.len(),
            skipped: self.skipped,
            median_rotation: median(&rot),
            p95_rotation: percentile(&rot, 95.0),
            max_rotation: rot.iter().copied().fold(0.0, f64::max),
            final_rotation: last.rotation,
            median_translation: median(&tr),
            p95_translation: percentile(&tr, 95.0),
            max_translation: tr.iter().copied().fold(0.0, f64::max),
            final_translation: last.translation,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp_s,rot_err_rad,trans_err_m\n");
        for e in &self.errors {
            let _ = writeln!(out, "{},{},{}", e.t, e.rotation, e.translation);
        }
        out
    }
}

impl ErrorSummary {
    pub fn csv_header() -> &'static str {
        "count,skipped,median_rot_rad,p95_rot_rad,max_rot_rad,final_rot_rad,median_trans_m,p95_trans_m,max_trans_m,final_trans_m"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.count,
            self.skipped,
            self.median_rotation,
            self.p95_rotation,
            self.max_rotation,
            self.final_rotation,
            self.median_translation,
            self.p95_translation,
            self.max_translation,
            self.final_translation
        )
    }
}

// ---------------------------------------------------------------------------
// residual statistics

/// Unscaled residual components of every measurement in the graph, by kind.
pub fn graph_residuals(graph: &KeyframeGraph) -> Result<[Vec<f64>; 5], EvalError> {
    let mut out: [Vec<f64>; 5] = Default::default();
    if graph.keyframes.is_empty() {
        return Ok(out);
    }
    let ctx = ResidualContext {
        rig: &graph.rig,
        refs: &graph.refs,
    };
    for m in enumerate_measurements(graph, 0, graph.keyframes.len() - 1) {
        let kind = m.measurement.kind();
        let block = ResidualBlock::new(m.keyframes.clone(), m.measurement, 1.0, Robustifier::Identity)?;
        let poses: Vec<&Transform> = m.keyframes.iter().map(|&k| &graph.keyframes[k].pose).collect();
        // a landmark that left the front of its observer has no residual
        let Ok(r) = block.residual(&poses, &ctx) else {
            continue;
        };
        out[kind.index()].extend(r.iter().take(kind.dim()));
    }
    Ok(out)
}

/// Mean, variance and count per kind, pooling scalar components.
pub fn residual_stats(graph: &KeyframeGraph) -> Result<ResidualStatistics, EvalError> {
    let residuals = graph_residuals(graph)?;
    let mut acc = StatisticsAccumulator::default();
    for kind in ResidualKind::ALL {
        acc.push(kind, &residuals[kind.index()]);
    }
    Ok(acc.finish())
}

/// Moments of `(r − E)/√Var` per kind: `(mean, variance, count)`.
pub fn normalized_moments(
    residuals: &[Vec<f64>; 5],
    stats: &ResidualStatistics,
) -> [(f64, f64, usize); 5] {
    std::array::from_fn(|k| {
        let s = stats.get(ResidualKind::ALL[k]);
        let sd = s.variance.sqrt();
        let z: Vec<f64> = residuals[k].iter().map(|r| (r - s.mean) / sd).collect();
        let n = z.len();
        if n == 0 {
            return (0.0, 0.0, 0);
        }
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        (mean, var, n)
    })
}

// ---------------------------------------------------------------------------
// simulator plumbing

/// Odometry input for a simulation: true initial pose, injected IMU
/// calibration and the pivot at the world origin.
pub fn simulation_input(sim: &Simulation) -> OdometryInput<'_> {
    OdometryInput {
        rig: &sim.rig,
        imu: &sim.imu,
        calibration: &sim.truth.calibration,
        frames: &sim.frames,
        initial_pose: sim.truth.frame_poses[0].pose,
        pivot: crate::geometry::Vec3::zeros(),
        imu_offset: sim.truth.imu_offset,
    }
}

/// Frames per IMU-aligned keyframe step: video and IMU ticks coincide every
/// `frames_per_alignment` frames.
fn alignment(sim: &Simulation) -> usize {
    let (v, i) = (sim.scenario.video_rate, sim.scenario.imu_rate);
    (1..=1000)
        .find(|k| {
            let ticks = *k as f64 * i / v;
            (ticks - ticks.round()).abs() < 1e-9
        })
        .unwrap_or(1)
}

/// Keyframe graph on ground-truth poses every `stride` frames, with
/// landmarks at their true positions and measurements from the streams.
/// `stride` must keep keyframes on IMU ticks.
pub fn ground_truth_graph(sim: &Simulation, stride: usize) -> Result<KeyframeGraph, EvalError> {
    let align = alignment(sim);
    if stride == 0 || !stride.is_multiple_of(align) {
        return Err(EvalError::BadStride(align));
    }
    let cal = &sim.truth.calibration;
    let off = sim.truth.imu_offset;
    let mut graph = KeyframeGraph::new(sim.rig, sim.refs, crate::geometry::Vec3::zeros());
    let mut landmark_of: HashMap<u64, u64> = HashMap::new();
    for k in (0..sim.frames.len()).step_by(stride) {
        let frame = &sim.frames[k];
        let pose = sim.truth.frame_poses[k].pose;
        let id = graph.keyframes.len();
        let gyro = match graph.keyframes.last() {
            Some(prev) => {
                let mut g = integrate_gyro_between(&sim.imu, prev.t + off, frame.t + off);
                g.t_start = prev.t;
                g.t_end = frame.t;
                g
            }
            None => PreintegratedGyro::identity(frame.t),
        };
        let (accel, mag) = odometry::calibrated_vectors_at(&sim.imu, cal, frame.t + off)
            .expect("imu stream");
        let mut observations = Vec::new();
        for track in frame.stereo_ids() {
            let truth = sim.truth.tracks[&track];
            let landmark = *landmark_of.entry(track).or_insert_with(|| {
                let lid = graph.landmarks.len() as u64;
                let world = sim.truth.scene.point(truth.points[0], frame.t);
                graph.landmarks.insert(
                    lid,
                    Landmark {
                        id: lid,
                        anchor: id,
                        position: pose.act(&world),
                    },
                );
                lid
            });
            for lens in Lens::BOTH {
                observations.push(Observation {
                    landmark,
                    keyframe: id,
                    lens,
                    pixel: frame.get(lens, track).expect("stereo").pixel,
                });
            }
        }
        graph.keyframes.push(Keyframe {
            id,
            t: frame.t,
            pose,
            observations,
            gyro,
            accel,
            mag,
        });
    }
    Ok(graph)
}

/// Runs one variant on a simulation.
pub fn run_simulation(
    sim: &Simulation,
    variant: VariantConfig,
    cfg: &OdometryConfig,
    opt: &OptimizerConfig,
) -> Result<RunOutput, EvalError> {
    Ok(odometry::run(simulation_input(sim), variant, cfg, opt)?)
}

/// Ground-truth poses at the frame times.
pub fn reference(sim: &Simulation) -> &[TimedPose] {
    &sim.truth.frame_poses
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub variant: VariantConfig,
    pub errors: ErrorSeries,
    pub summary: ErrorSummary,
    pub output: RunOutput,
}

/// Runs each named variant on the same simulation, in parallel.
pub fn ablation(
    sim: &Simulation,
    variants: &[(String, VariantConfig)],
    cfg: &OdometryConfig,
    opt: &OptimizerConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    variants
        .par_iter()
        .map(|(name, variant)| {
            let output = run_simulation(sim, *variant, cfg, opt)?;
            let errors = trajectory_errors(reference(sim), &output.trajectory)?;
            Ok(AblationRow {
                name: name.clone(),
                variant: *variant,
                summary: errors.summary(),
                errors,
                output,
            })
        })
        .collect()
}

pub fn ablation_series_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,timestamp_s,rot_err_rad,trans_err_m\n");
    for row in rows {
        for e in &row.errors.errors {
            let _ = writeln!(out, "{},{},{},{}", row.name, e.t, e.rotation, e.translation);
        }
    }
    out
}

pub fn ablation_summary_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,{}\n", ErrorSummary::csv_header());
    for row in rows {
        let _ = writeln!(out, "{},{}", row.name, row.summary.csv_row());
    }
    out
}

/// The default grid `{0, 0.1, …, 1}`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct GammaResult {
    pub gamma: f64,
    pub errors: ErrorSeries,
    pub summary: ErrorSummary,
    /// Mean over solves of `f_k(after) − f_k(before)`.
    pub mean_delta_f: [f64; 5],
    pub solves: usize,
}

/// Runs `variant` with optimization for every γ of the grid.
pub fn gamma_sweep(
    sim: &Simulation,
    gammas: &[f64],
    variant: VariantConfig,
    cfg: &OdometryConfig,
    opt: &OptimizerConfig,
) -> Result<Vec<GammaResult>, EvalError> {
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(EvalError::BadGamma(*g));
    }
    gammas
        .par_iter()
        .map(|&gamma| {
            let mut o = opt.clone();
            o.weights.gamma = gamma;
            let output = run_simulation(sim, variant.with_optimization(true), cfg, &o)?;
            let errors = trajectory_errors(reference(sim), &output.trajectory)?;
            let n = output.reports.len();
            let mut mean = [0.0; 5];
            for r in &output.reports {
                for (m, d) in mean.iter_mut().zip(r.delta_f()) {
                    *m += d / n as f64;
                }
            }
            Ok(GammaResult {
                gamma,
                summary: errors.summary(),
                errors,
                mean_delta_f: mean,
                solves: n,
            })
        })
        .collect()
}

pub fn gamma_delta_csv(results: &[GammaResult]) -> String {
    let mut out = String::from("gamma,solves,df_pivot,df_accel,df_mag,df_reproj,df_gyro\n");
    for r in results {
        let _ = write!(out, "{},{}", r.gamma, r.solves);
        for d in r.mean_delta_f {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
    }
    out
}

pub fn gamma_series_csv(results: &[GammaResult]) -> String {
    let mut out = String::from("gamma,timestamp_s,rot_err_rad,trans_err_m\n");
    for r in results {
        for e in &r.errors.errors {
            let _ = writeln!(out, "{},{},{},{}", r.gamma, e.t, e.rotation, e.translation);
        }
    }
    out
}
