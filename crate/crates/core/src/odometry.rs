//! The tracking loop: gyro propagation on the pivot sphere, PnP-RANSAC
//! refinement against anchored landmarks, keyframe selection, stereo
//! landmark initialization and the windowed optimization trigger.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix2x6, Matrix6, SymmetricEigen, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{self, CameraError, Lens, PixelPoint, StereoRig};
use crate::geometry::{hat, Frame, Mat3, Transform, Twist, Vec3};
use crate::optimizer::{self, OptimizerConfig, OptimizerError, SolveReport};
use crate::residuals::{r_pivot, Landmark, Observation, ResidualError};
use crate::sensors::{
    integrate_gyro_between, nearest_sample, ImuCalibration, ImuSample, PreintegratedGyro,
    SensorError, TimedPose, WorldReferences,
};
pub use crate::tracks::{parse_track_csv, format_track_csv, TrackError, TrackFrame, TrackPoint};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("need at least {need} correspondences, got {got}")]
    InsufficientData { got: usize, need: usize },
    #[error("tracking lost: inlier ratio {ratio:.2}")]
    TrackingLost { ratio: f64 },
    #[error("pivot estimate is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },
    #[error("variant must enable the gyro update, the visual update or both")]
    NoUpdatePath,
    #[error("unknown variant '{0}' (expected V1, V2, V3 or V4)")]
    UnknownVariant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no track frames to process")]
    EmptyInput,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

/// Which parts of the loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantConfig {
    pub use_gyro_update: bool,
    pub use_visual_update: bool,
    pub pivot_online: bool,
    pub use_optimization: bool,
}

impl VariantConfig {
    pub const V1: Self = Self::new(true, false, false);
    pub const V2: Self = Self::new(false, true, false);
    pub const V3: Self = Self::new(true, true, false);
    pub const V4: Self = Self::new(true, true, true);
    pub const ALL: [(&'static str, Self); 4] =
        [("V1", Self::V1), ("V2", Self::V2), ("V3", Self::V3), ("V4", Self::V4)];

    const fn new(gyro: bool, visual: bool, pivot: bool) -> Self {
        Self {
            use_gyro_update: gyro,
            use_visual_update: visual,
            pivot_online: pivot,
            use_optimization: false,
        }
    }

    pub fn from_name(name: &str) -> Result<Self, OdometryError> {
        Self::ALL
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| *v)
            .ok_or_else(|| OdometryError::UnknownVariant(name.to_string()))
    }

    pub fn with_optimization(self, on: bool) -> Self {
        Self {
            use_optimization: on,
            ..self
        }
    }

    /// Name of the matching table variant, ignoring the optimization flag.
    pub fn name(&self) -> Option<&'static str> {
        let base = self.with_optimization(false);
        Self::ALL.iter().find(|(_, v)| *v == base).map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<(), OdometryError> {
        if self.use_gyro_update || self.use_visual_update {
            Ok(())
        } else {
            Err(OdometryError::NoUpdatePath)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold on the reprojection error, px.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Stop once an all-inlier sample has been drawn with this probability.
    pub confidence: f64,
    pub min_inlier_ratio: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            max_iterations: 200,
            confidence: 0.999,
            min_inlier_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryConfig {
    pub ransac: RansacConfig,
    /// Tracked-landmark count below which a keyframe is inserted.
    pub n_min: usize,
    /// Landmark age (frames since anchoring) that triggers a keyframe and
    /// re-anchoring.
    pub a_max: usize,
    pub theta_kf_deg: f64,
    pub d_kf: f64,
    pub theta_max_deg: f64,
    pub d_max: f64,
    /// Threshold on `|x0ᵀ E x1|` for unit bearings.
    pub epipolar_threshold: f64,
    pub min_landmark_depth: f64,
    pub max_landmark_depth: f64,
    /// Maximum stereo reprojection error of a new landmark, px.
    pub max_triangulation_error: f64,
    pub pivot_min_keyframes: usize,
    pub pivot_window: usize,
    pub pivot_max_condition: f64,
    /// IMU span after the first frame averaged into the magnetic reference, s.
    pub mag_reference_span: f64,
    pub seed: u64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            n_min: 50,
            a_max: 30,
            theta_kf_deg: 10.0,
            d_kf: 0.01,
            theta_max_deg: 5.0,
            d_max: 0.005,
            epipolar_threshold: 2e-3,
            min_landmark_depth: 0.01,
            max_landmark_depth: 1.0,
            max_triangulation_error: 2.0,
            pivot_min_keyframes: 10,
            pivot_window: 40,
            pivot_max_condition: 1e6,
            mag_reference_span: 0.5,
            seed: 0,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        let r = &self.ransac;
        let checks = [
            (r.threshold > 0.0, "ransac threshold must be positive"),
            (r.max_iterations > 0, "ransac iterations must be positive"),
            (r.confidence > 0.0 && r.confidence < 1.0, "ransac confidence must lie in (0, 1)"),
            ((0.0..=1.0).contains(&r.min_inlier_ratio), "min inlier ratio must lie in [0, 1]"),
            (self.theta_kf_deg > 0.0 && self.d_kf > 0.0, "keyframe thresholds must be positive"),
            (self.theta_max_deg > 0.0 && self.d_max > 0.0, "sanity thresholds must be positive"),
            (self.epipolar_threshold > 0.0, "epipolar threshold must be positive"),
            (
                0.0 < self.min_landmark_depth && self.min_landmark_depth < self.max_landmark_depth,
                "landmark depth range is empty",
            ),
            (self.pivot_min_keyframes >= 3, "pivot estimation needs at least 3 keyframes"),
            (self.mag_reference_span >= 0.0, "magnetic reference span must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(OdometryError::Config(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// A keyframe of the graph handed to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub t: f64,
    /// `C ← T`.
    pub pose: Transform,
    pub observations: Vec<Observation>,
    /// Gyro rotation from the previous keyframe; identity span for the first.
    pub gyro: PreintegratedGyro,
    /// Gravity in the camera frame, m/s².
    pub accel: Vec3,
    /// Calibrated magnetic field in the camera frame, μT.
    pub mag: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeGraph {
    pub keyframes: Vec<Keyframe>,
    pub landmarks: BTreeMap<u64, Landmark>,
    pub rig: StereoRig,
    pub refs: WorldReferences,
    /// Pivot position in the world frame.
    pub pivot: Vec3,
}

impl KeyframeGraph {
    pub fn new(rig: StereoRig, refs: WorldReferences, pivot: Vec3) -> Self {
        Self {
            keyframes: Vec::new(),
            landmarks: BTreeMap::new(),
            rig,
            refs,
            pivot,
        }
    }

    pub fn poses(&self) -> Vec<Transform> {
        self.keyframes.iter().map(|k| k.pose).collect()
    }

    /// Every anchor is a keyframe, every observation refers to a known
    /// landmark anchored no later than its observer, and gyro links chain.
    pub fn is_well_formed(&self) -> bool {
        let n = self.keyframes.len();
        let ids = self.keyframes.iter().enumerate().all(|(i, k)| k.id == i);
        let anchors = self.landmarks.values().all(|l| l.anchor < n);
        let obs = self.keyframes.iter().all(|k| {
            k.observations.iter().all(|o| {
                o.keyframe == k.id
                    && self
                        .landmarks
                        .get(&o.landmark)
                        .is_some_and(|l| l.anchor <= k.id)
            })
        });
        let links = self.keyframes.windows(2).all(|w| {
            w[1].gyro.t_start == w[0].t && w[1].gyro.t_end == w[1].t
        });
        ids && anchors && obs && links
    }
}

/// Calibrated gravity (m/s²) and magnetic field (μT) in the camera frame at
/// IMU time `t`: the nearest sample, rotated to `t` with the gyro.
pub fn calibrated_vectors_at(
    imu: &[ImuSample],
    calibration: &ImuCalibration,
    t: f64,
) -> Option<(Vec3, Vec3)> {
    let s = nearest_sample(imu, t)?;
    let (g, m) = (calibration.gravity_in_camera(&s.accel), calibration.correct_mag(&s.mag));
    let rot = if s.t <= t {
        integrate_gyro_between(imu, s.t, t).delta.transpose()
    } else {
        integrate_gyro_between(imu, t, s.t).delta
    };
    Some((rot * g, rot * m))
}

/// Mean calibrated magnetic field over `[t, t + span]`, each sample rotated
/// to the camera frame at `t`. Falls back to the nearest sample.
pub fn mean_magnetic_at(imu: &[ImuSample], calibration: &ImuCalibration, t: f64, span: f64) -> Option<Vec3> {
    let start = imu.partition_point(|s| s.t < t);
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for s in imu[start..].iter().take_while(|s| s.t <= t + span) {
        let rot = integrate_gyro_between(imu, t, s.t).delta;
        sum += rot * calibration.correct_mag(&s.mag);
        n += 1;
    }
    if n == 0 {
        return calibrated_vectors_at(imu, calibration, t).map(|(_, m)| m);
    }
    Some(sum / n as f64)
}

/// `C ← T` pose advanced by a body rotation: rotation pre-multiplied by
/// `ΔRᵀ`, translation kept.
pub fn gyro_pose_update(prev: &Transform, delta: &PreintegratedGyro) -> Transform {
    Transform::new(delta.delta.transpose() * *prev.rotation(), *prev.translation())
        .with_frames(Frame::Camera, Frame::World)
}

/// Same update for a pivot at `pivot` instead of the world origin.
pub fn gyro_pose_update_about(prev: &Transform, delta: &PreintegratedGyro, pivot: &Vec3) -> Transform {
    if *pivot == Vec3::zeros() {
        return gyro_pose_update(prev, delta);
    }
    let rot = delta.delta.transpose() * *prev.rotation();
    let centre = prev.act(pivot);
    Transform::new(rot, centre - rot * *pivot).with_frames(Frame::Camera, Frame::World)
}

// ---------------------------------------------------------------------------
// PnP

/// A 2D track position paired with a world-frame landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: Vec3,
    pub lens: Lens,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Transform,
    /// Indices into the correspondence slice.
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
    pub iterations: usize,
}

const PNP_MIN: usize = 4;

fn reprojection_error(pose: &Transform, c: &Correspondence, rig: &StereoRig) -> f64 {
    match rig.project(c.lens, &pose.act(&c.point)) {
        Ok(p) => (p.u - c.pixel.u).hypot(p.v - c.pixel.v),
        Err(_) => f64::INFINITY,
    }
}

/// Damped Gauss-Newton on the reprojection error of `subset`.
fn refine_pose(
    init: &Transform,
    corr: &[Correspondence],
    subset: &[usize],
    rig: &StereoRig,
    max_iterations: usize,
) -> Option<Transform> {
    let cost_of = |pose: &Transform| -> f64 {
        subset
            .iter()
            .map(|&i| reprojection_error(pose, &corr[i], rig).powi(2))
            .sum()
    };
    let mut pose = *init;
    let mut cost = cost_of(&pose);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-6;
    for _ in 0..max_iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let r = pose.rotation().matrix();
        for &i in subset {
            let c = &corr[i];
            let (p, dp) = rig.project_with_jacobian(c.lens, &pose.act(&c.point)).ok()?;
            let mut dx = nalgebra::Matrix3x6::zeros();
            dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * hat(&c.point)));
            dx.fixed_view_mut::<3, 3>(0, 3).copy_from(r);
            let j: Matrix2x6<f64> = dp * dx;
            let res = nalgebra::Vector2::new(p.u - c.pixel.u, p.v - c.pixel.v);
            h += j.transpose() * j;
            g += j.transpose() * res;
        }
        if g.amax() < 1e-12 {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * (h[(k, k)] + 1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -chol.solve(&g);
            let cand = pose.retract(&Twist::from_vector(&step));
            let c2 = cost_of(&cand);
            if c2 < cost {
                let rel = (cost - c2) / cost.max(f64::MIN_POSITIVE);
                pose = cand;
                cost = c2;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some(pose)
}

fn inliers_of(pose: &Transform, corr: &[Correspondence], rig: &StereoRig, threshold: f64) -> Vec<usize> {
    (0..corr.len())
        .filter(|&i| reprojection_error(pose, &corr[i], rig) < threshold)
        .collect()
}

/// Robust pose from 3D–2D correspondences. Hypotheses come from four-point
/// damped least squares seeded at `init`; the best consensus set is refined.
pub fn pnp_ransac(
    corr: &[Correspondence],
    init: &Transform,
    rig: &StereoRig,
    cfg: &RansacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PnpResult, OdometryError> {
    if corr.len() < PNP_MIN {
        return Err(OdometryError::InsufficientData {
            got: corr.len(),
            need: PNP_MIN,
        });
    }
    let n = corr.len();
    let mut best_pose = *init;
    let mut best = inliers_of(init, corr, rig, cfg.threshold);
    let mut needed = cfg.max_iterations;
    let mut iterations = 0;
    let update_needed = |inliers: usize| -> usize {
        let w = inliers as f64 / n as f64;
        let p_good = w.powi(PNP_MIN as i32);
        if p_good >= 1.0 - 1e-12 {
            return 0;
        }
        if p_good <= 0.0 {
            return cfg.max_iterations;
        }
        let k = (1.0 - cfg.confidence).ln() / (1.0 - p_good).ln();
        (k.ceil() as usize).min(cfg.max_iterations)
    };
    needed = needed.min(update_needed(best.len()));
    while iterations < needed {
        iterations += 1;
        let mut sample = [0usize; PNP_MIN];
        for k in 0..PNP_MIN {
            loop {
                let i = rng.random_range(0..n);
                if !sample[..k].contains(&i) {
                    sample[k] = i;
                    break;
                }
            }
        }
        let Some(hyp) = refine_pose(init, corr, &sample, rig, 10) else {
            continue;
        };
        let inl = inliers_of(&hyp, corr, rig, cfg.threshold);
        if inl.len() > best.len() {
            best = inl;
            best_pose = hyp;
            needed = needed.min(update_needed(best.len()));
        }
    }
    if best.len() < PNP_MIN {
        return Err(OdometryError::TrackingLost {
            ratio: best.len() as f64 / n as f64,
        });
    }
    // refine on the consensus set, then once more on its update
    let mut pose = refine_pose(&best_pose, corr, &best, rig, 20).unwrap_or(best_pose);
    let mut inliers = inliers_of(&pose, corr, rig, cfg.threshold);
    if inliers.len() >= PNP_MIN && inliers != best {
        pose = refine_pose(&pose, corr, &inliers, rig, 20).unwrap_or(pose);
        inliers = inliers_of(&pose, corr, rig, cfg.threshold);
    }
    let ratio = inliers.len() as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio || inliers.len() < PNP_MIN {
        return Err(OdometryError::TrackingLost { ratio });
    }
    Ok(PnpResult {
        pose: pose.with_frames(Frame::Camera, Frame::World),
        inliers,
        inlier_ratio: ratio,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// checks and decisions

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SanityVerdict {
    Accept,
    /// Angle between candidate and prediction, rad.
    RejectRotation(f64),
    /// Off-axis pivot violation, m.
    RejectPivot(f64),
}

pub fn sanity_check(
    candidate: &Transform,
    predicted: &Transform,
    pivot: &Vec3,
    cfg: &OdometryConfig,
) -> SanityVerdict {
    let angle = (candidate.rotation().transpose() * *predicted.rotation()).angle();
    if angle > cfg.theta_max_deg.to_radians() {
        return SanityVerdict::RejectRotation(angle);
    }
    let off = r_pivot(candidate, pivot).norm();
    if off > cfg.d_max {
        return SanityVerdict::RejectPivot(off);
    }
    SanityVerdict::Accept
}

/// Inputs of the keyframe decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeState<'a> {
    pub is_first: bool,
    pub tracked: usize,
    pub mean_age: f64,
    pub pose: &'a Transform,
    pub last_keyframe: Option<&'a Transform>,
}

pub fn keyframe_decision(state: &KeyframeState, cfg: &OdometryConfig) -> bool {
    let Some(last) = state.last_keyframe else {
        return true;
    };
    if state.is_first || state.tracked < cfg.n_min || state.mean_age > cfg.a_max as f64 {
        return true;
    }
    let angle = (last.rotation().transpose() * *state.pose.rotation()).angle();
    let moved = (camera_centre(last) - camera_centre(state.pose)).norm();
    angle > cfg.theta_kf_deg.to_radians() || moved > cfg.d_kf
}

/// Camera centre in the world for a `C ← T` pose.
pub fn camera_centre(pose: &Transform) -> Vec3 {
    pose.inverse().act(&Vec3::zeros())
}

/// A stereo track offered to landmark initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoPair {
    pub track: u64,
    pub left: PixelPoint,
    pub right: PixelPoint,
}

/// Triangulates epipolar-consistent pairs. Returned positions are in the
/// body frame `C` of the keyframe, paired with their track ids.
pub fn init_landmarks(
    pairs: &[StereoPair],
    rig: &StereoRig,
    cfg: &OdometryConfig,
) -> Vec<(u64, Vec3)> {
    let essential = rig.essential();
    pairs
        .iter()
        .filter_map(|p| {
            let b0 = rig.left.unproject(&p.left).ok()?;
            let b1 = rig.right.unproject(&p.right).ok()?;
            if (b0.transpose() * essential * b1)[(0, 0)].abs() > cfg.epipolar_threshold {
                return None;
            }
            let x0 = camera::triangulate_bearings(&b0, &b1, rig).ok()?;
            if !(cfg.min_landmark_depth..=cfg.max_landmark_depth).contains(&x0.z) {
                return None;
            }
            let x_c = rig.mount.act(&x0);
            for (lens, px) in [(Lens::Left, p.left), (Lens::Right, p.right)] {
                let q = rig.project(lens, &x_c).ok()?;
                if (q.u - px.u).hypot(q.v - px.v) > cfg.max_triangulation_error {
                    return None;
                }
            }
            Some((p.track, x_c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotEstimate {
    pub point: Vec3,
    /// Inverse condition number of the normal matrix, in (0, 1].
    pub confidence: f64,
}

/// Least-squares point closest to the camera x-axis lines of all poses.
pub fn estimate_pivot(poses: &[Transform], max_condition: f64) -> Result<PivotEstimate, OdometryError> {
    if poses.len() < 3 {
        return Err(OdometryError::IllConditioned {
            condition: f64::INFINITY,
        });
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for pose in poses {
        let dir = pose.rotation().transpose() * Vec3::x();
        let proj = Mat3::identity() - dir * dir.transpose();
        a += proj;
        b += proj * camera_centre(pose);
    }
    let eig = SymmetricEigen::new(a).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(OdometryError::IllConditioned { condition });
    }
    let point = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or(OdometryError::IllConditioned { condition })?;
    Ok(PivotEstimate {
        point,
        confidence: 1.0 / condition,
    })
}

// ---------------------------------------------------------------------------
// the loop

/// Calibrated streams and priors for one run. IMU timestamps are shifted by
/// `imu_offset` to meet the track clock.
#[derive(Debug, Clone, Copy)]
pub struct OdometryInput<'a> {
    pub rig: &'a StereoRig,
    pub imu: &'a [ImuSample],
    pub calibration: &'a ImuCalibration,
    pub frames: &'a [TrackFrame],
    /// `C ← T` pose at the first frame.
    pub initial_pose: Transform,
    /// Prior pivot position in the world frame.
    pub pivot: Vec3,
    pub imu_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunCounters {
    pub frames: usize,
    pub keyframes: usize,
    pub visual_updates: usize,
    pub lost: usize,
    pub rejected: usize,
    pub solves: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One `C ← T` pose per track frame.
    pub trajectory: Vec<TimedPose>,
    pub graph: KeyframeGraph,
    pub reports: Vec<SolveReport>,
    pub pivot: Option<PivotEstimate>,
    pub counters: RunCounters,
}

struct TrackedLandmark {
    landmark: u64,
    born: usize,
}

struct Tracker<'a> {
    input: OdometryInput<'a>,
    variant: VariantConfig,
    cfg: OdometryConfig,
    opt: &'a OptimizerConfig,
    graph: KeyframeGraph,
    track_map: HashMap<u64, TrackedLandmark>,
    next_landmark: u64,
    reports: Vec<SolveReport>,
    pivot_estimate: Option<PivotEstimate>,
    counters: RunCounters,
}

impl Tracker<'_> {
    fn correspondences(&self, frame: &TrackFrame) -> (Vec<Correspondence>, Vec<u64>) {
        let mut corr = Vec::new();
        let mut tracks = Vec::new();
        let mut world: HashMap<u64, Vec3> = HashMap::new();
        for lens in Lens::BOTH {
            for p in frame.lens(lens) {
                let Some(tl) = self.track_map.get(&p.id) else {
                    continue;
                };
                let point = *world.entry(tl.landmark).or_insert_with(|| {
                    let lm = &self.graph.landmarks[&tl.landmark];
                    self.graph.keyframes[lm.anchor].pose.inverse().act(&lm.position)
                });
                corr.push(Correspondence {
                    point,
                    lens,
                    pixel: p.pixel,
                });
                tracks.push(p.id);
            }
        }
        (corr, tracks)
    }

    fn add_keyframe(&mut self, k: usize, frame: &TrackFrame, pose: Transform, inlier_tracks: &[(u64, Lens)]) -> Result<(), OdometryError> {
        let id = self.graph.keyframes.len();
        let t = frame.t;
        let off = self.input.imu_offset;
        let gyro = match self.graph.keyframes.last() {
            Some(prev) => {
                let mut link = integrate_gyro_between(self.input.imu, prev.t + off, t + off);
                link.t_start = prev.t;
                link.t_end = t;
                link
            }
            None => PreintegratedGyro::identity(t),
        };
        let (accel, mag) = calibrated_vectors_at(self.input.imu, self.input.calibration, t + off)
            .unwrap_or((Vec3::zeros(), Vec3::zeros()));
        if id == 0 {
            let mean = mean_magnetic_at(self.input.imu, self.input.calibration, t + off, self.cfg.mag_reference_span)
                .unwrap_or(mag);
            self.graph.refs = WorldReferences::from_initial_magnetometer(&mean, &pose);
        }

        let mut observations: Vec<Observation> = inlier_tracks
            .iter()
            .filter_map(|&(track, lens)| {
                let tl = self.track_map.get(&track)?;
                Some(Observation {
                    landmark: tl.landmark,
                    keyframe: id,
                    lens,
                    pixel: frame.get(lens, track)?.pixel,
                })
            })
            .collect();

        // tracks without a landmark, with an expired one, or rejected as outliers
        let inlier_set: std::collections::HashSet<u64> = inlier_tracks.iter().map(|p| p.0).collect();
        let pairs: Vec<StereoPair> = frame
            .stereo_ids()
            .into_iter()
            .filter(|id| match self.track_map.get(id) {
                None => true,
                Some(tl) => k - tl.born > self.cfg.a_max || !inlier_set.contains(id),
            })
            .map(|track| StereoPair {
                track,
                left: frame.get(Lens::Left, track).expect("stereo id").pixel,
                right: frame.get(Lens::Right, track).expect("stereo id").pixel,
            })
            .collect();
        for p in &pairs {
            self.track_map.remove(&p.track);
        }
        for (track, position) in init_landmarks(&pairs, self.input.rig, &self.cfg) {
            let landmark = self.next_landmark;
            self.next_landmark += 1;
            self.graph.landmarks.insert(
                landmark,
                Landmark {
                    id: landmark,
                    anchor: id,
                    position,
                },
            );
            self.track_map.insert(track, TrackedLandmark { landmark, born: k });
            for lens in Lens::BOTH {
                observations.push(Observation {
                    landmark,
                    keyframe: id,
                    lens,
                    pixel: frame.get(lens, track).expect("stereo id").pixel,
                });
            }
        }
        self.graph.keyframes.push(Keyframe {
            id,
            t,
            pose,
            observations,
            gyro,
            accel,
            mag,
        });
        self.counters.keyframes += 1;

        if self.variant.pivot_online && self.graph.keyframes.len() >= self.cfg.pivot_min_keyframes {
            let from = self.graph.keyframes.len().saturating_sub(self.cfg.pivot_window);
            let poses: Vec<Transform> = self.graph.keyframes[from..].iter().map(|k| k.pose).collect();
            if let Ok(est) = estimate_pivot(&poses, self.cfg.pivot_max_condition) {
                self.graph.pivot = est.point;
                self.pivot_estimate = Some(est);
            }
        }
        Ok(())
    }

    fn maybe_optimize(&mut self) -> Result<bool, OdometryError> {
        let n = self.graph.keyframes.len();
        if !self.variant.use_optimization || n == 0 || !n.is_multiple_of(self.opt.trigger) {
            return Ok(false);
        }
        let window = (n.saturating_sub(self.opt.window), n - 1);
        let problem = optimizer::build_problem(&self.graph, window, &self.opt.weights)?;
        let (poses, report) = optimizer::solve(&problem, &self.opt.lm)?;
        problem.write_back(&poses, &mut self.graph);
        self.reports.push(report);
        self.counters.solves += 1;
        Ok(true)
    }
}

/// Runs the tracking loop over all frames.
pub fn run(
    input: OdometryInput,
    variant: VariantConfig,
    cfg: &OdometryConfig,
    opt: &OptimizerConfig,
) -> Result<RunOutput, OdometryError> {
    variant.validate()?;
    cfg.validate()?;
    opt.validate()?;
    if input.frames.is_empty() {
        return Err(OdometryError::EmptyInput);
    }
    let mut tr = Tracker {
        input,
        variant,
        cfg: *cfg,
        opt,
        graph: KeyframeGraph::new(*input.rig, WorldReferences::default(), input.pivot),
        track_map: HashMap::new(),
        next_landmark: 0,
        reports: Vec::new(),
        pivot_estimate: None,
        counters: RunCounters::default(),
    };
    let mut trajectory = Vec::with_capacity(input.frames.len());
    let mut pose = input.initial_pose.with_frames(Frame::Camera, Frame::World);
    let mut t_prev = input.frames[0].t;
    let off = input.imu_offset;

    for (k, frame) in input.frames.iter().enumerate() {
        tr.counters.frames += 1;
        let predicted = if k > 0 && variant.use_gyro_update {
            let delta = integrate_gyro_between(input.imu, t_prev + off, frame.t + off);
            gyro_pose_update_about(&pose, &delta, &tr.graph.pivot)
        } else {
            pose
        };
        pose = predicted;

        let (corr, corr_tracks) = tr.correspondences(frame);
        let mut inlier_tracks: Vec<(u64, Lens)> = Vec::new();
        if variant.use_visual_update && k > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            match pnp_ransac(&corr, &predicted, input.rig, &cfg.ransac, &mut rng) {
                Ok(res) => match sanity_check(&res.pose, &predicted, &tr.graph.pivot, cfg) {
                    SanityVerdict::Accept => {
                        pose = res.pose;
                        tr.counters.visual_updates += 1;
                        inlier_tracks = res
                            .inliers
                            .iter()
                            .map(|&i| (corr_tracks[i], corr[i].lens))
                            .collect();
                    }
                    _ => tr.counters.rejected += 1,
                },
                Err(_) => tr.counters.lost += 1,
            }
        } else if !variant.use_visual_update {
            inlier_tracks = corr.iter().zip(&corr_tracks).map(|(c, &t)| (t, c.lens)).collect();
        }

        let left_tracked: Vec<u64> = {
            let mut ids: Vec<u64> = inlier_tracks
                .iter()
                .filter(|(_, l)| *l == Lens::Left)
                .map(|(t, _)| *t)
                .collect();
            ids.dedup();
            ids
        };
        let mean_age = if left_tracked.is_empty() {
            0.0
        } else {
            left_tracked
                .iter()
                .map(|t| (k - tr.track_map[t].born) as f64)
                .sum::<f64>()
                / left_tracked.len() as f64
        };
        let last_pose = tr.graph.keyframes.last().map(|kf| kf.pose);
        let state = KeyframeState {
            is_first: k == 0,
            tracked: left_tracked.len(),
            mean_age,
            pose: &pose,
            last_keyframe: last_pose.as_ref(),
        };
        if keyframe_decision(&state, cfg) {
            tr.add_keyframe(k, frame, pose, &inlier_tracks)?;
            if tr.maybe_optimize()? {
                pose = tr.graph.keyframes.last().expect("keyframe added").pose;
            }
        }
        trajectory.push(TimedPose { t: frame.t, pose });
        t_prev = frame.t;
    }
    Ok(RunOutput {
        trajectory,
        graph: tr.graph,
        reports: tr.reports,
        pivot: tr.pivot_estimate,
        counters: tr.counters,
    })
}

/// The trajectory CSV uses the pose schema.
pub fn format_trajectory_csv(trajectory: &[TimedPose]) -> String {
    crate::sensors::format_pose_csv(trajectory)
}
