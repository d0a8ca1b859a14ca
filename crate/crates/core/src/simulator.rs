//! Deterministic synthetic trocar scenes: pivot-constrained trajectories,
//! landmark domes with a moving occluder, and the sensor streams observed by
//! an endoscope with IMU.
//!
//! The world frame `T` has its origin in the pivot. At zero angles the camera
//! x-axis points along world +z, so the lens looks down −z into the dome.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraIntrinsics, Lens, PixelPoint, StereoRig};
use crate::geometry::{
    exp_so3, expand_pivot, rot_x, rot_y, Frame, Mat3, PivotPose, Rotation, Transform, Vec3,
};
use crate::io::{self, DataError};
use crate::sensors::{self, ImuCalibration, ImuSample, TimedPose, WorldReferences, GRAVITY};
use crate::tracks::{self, TrackFrame, TrackPoint};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown preset '{0}' (known: standard, pure-rotation, inward-motion, fast-sweep-occlusion, calibration-wand)")]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// How the three rotation angles evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// Random smooth knots for all angles.
    Wander,
    /// Hold/sweep pattern on the left-right angle.
    Sweep,
    /// Static stances at random orientations joined by short turns.
    Stances,
}

/// Complete description of a synthetic run. Every field has a default, so a
/// manifest may list only the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub imu_rate: f64,
    pub video_rate: f64,
    pub ir_rate: f64,

    pub motion: Motion,
    /// Knot spacing of the angle splines, s.
    pub knot_spacing: f64,
    /// Peak swing angles about the pivot, rad.
    pub swing_amplitude: f64,
    pub roll_amplitude: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_knot_spacing: f64,
    /// Depth knots follow a steady insertion from `depth_min` to `depth_max`
    /// with a uniform wobble of `±depth_jitter`, instead of uniform draws.
    pub depth_ramp: bool,
    pub depth_jitter: f64,
    pub sweep_amplitude: f64,
    /// Duration of one hold or one sweep phase, s.
    pub sweep_phase: f64,
    pub stance_hold: f64,
    pub stance_turn: f64,

    pub landmark_count: usize,
    pub dome_radius_min: f64,
    pub dome_radius_max: f64,
    pub dome_half_angle_deg: f64,
    /// Fraction of landmarks that ride on the moving occluder.
    pub outlier_fraction: f64,
    pub occluder_radius: f64,
    pub occluder_depth: f64,
    pub occluder_travel: f64,
    pub occluder_period: f64,

    pub sigma_gyro: f64,
    pub gyro_bias: [f64; 3],
    /// Accelerometer noise in units of g.
    pub sigma_accel: f64,
    /// Magnetometer noise, μT.
    pub sigma_mag: f64,
    pub sigma_px: f64,
    /// Per-frame random-walk drift of each track, px.
    pub sigma_rw: f64,
    pub include_motion_acceleration: bool,

    pub accel_bias: [f64; 3],
    pub accel_scale: f64,
    pub mag_bias: [f64; 3],
    pub mag_scale: f64,

    /// IMU timestamps are `true time + imu_offset`.
    pub imu_offset: f64,
    pub ir_offset: f64,

    pub track_target: usize,
    /// Per-frame probability that a track terminates.
    pub track_drop_rate: f64,
    /// Tracks die when the true image motion exceeds this many px per frame.
    pub max_pixel_speed: f64,
    /// Probability that a new track pairs the left lens with a wrong point.
    pub cross_match_rate: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "standard".into(),
            seed: 7,
            duration: 60.0,
            imu_rate: 220.0,
            video_rate: 60.0,
            ir_rate: 20.0,
            motion: Motion::Wander,
            knot_spacing: 1.5,
            swing_amplitude: 0.3,
            roll_amplitude: 0.2,
            depth_min: 0.07,
            depth_max: 0.11,
            depth_knot_spacing: 3.0,
            depth_ramp: false,
            depth_jitter: 0.005,
            sweep_amplitude: 0.35,
            sweep_phase: 0.4,
            stance_hold: 1.0,
            stance_turn: 0.4,
            landmark_count: 1500,
            dome_radius_min: 0.17,
            dome_radius_max: 0.25,
            dome_half_angle_deg: 60.0,
            outlier_fraction: 0.0,
            occluder_radius: 0.015,
            occluder_depth: 0.14,
            occluder_travel: 0.035,
            occluder_period: 3.0,
            sigma_gyro: 0.005,
            gyro_bias: [0.002, -0.001, 0.0015],
            sigma_accel: 0.01,
            sigma_mag: 0.5,
            sigma_px: 0.5,
            sigma_rw: 0.1,
            include_motion_acceleration: true,
            accel_bias: [0.1, -0.05, 0.2],
            accel_scale: 1.03,
            mag_bias: [5.0, -3.0, 8.0],
            mag_scale: 0.97,
            imu_offset: 0.0,
            ir_offset: 0.0,
            track_target: 150,
            track_drop_rate: 0.01,
            max_pixel_speed: 30.0,
            cross_match_rate: 0.05,
        }
    }
}

pub const PRESETS: [&str; 5] = [
    "standard",
    "pure-rotation",
    "inward-motion",
    "fast-sweep-occlusion",
    "calibration-wand",
];

impl Scenario {
    pub fn preset(name: &str) -> Result<Self, SimError> {
        let base = Self {
            name: name.to_string(),
            ..Self::default()
        };
        Ok(match name {
            "standard" => base,
            "pure-rotation" => Self {
                depth_min: 0.09,
                depth_max: 0.09,
                knot_spacing: 1.0,
                swing_amplitude: 0.35,
                ..base
            },
            "inward-motion" => Self {
                depth_min: 0.06,
                depth_max: 0.12,
                depth_knot_spacing: 2.0,
                depth_ramp: true,
                swing_amplitude: 0.15,
                roll_amplitude: 0.1,
                ..base
            },
            "fast-sweep-occlusion" => Self {
                motion: Motion::Sweep,
                swing_amplitude: 0.1,
                roll_amplitude: 0.05,
                outlier_fraction: 0.1,
                ..base
            },
            "calibration-wand" => Self {
                motion: Motion::Stances,
                duration: 60.0,
                depth_min: 0.0,
                depth_max: 0.0,
                landmark_count: 0,
                sigma_gyro: 0.002,
                sigma_accel: 0.01,
                sigma_mag: 0.486,
                ..base
            },
            other => return Err(SimError::UnknownPreset(other.to_string())),
        })
    }

    /// Same scene with every noise source, offset, outlier and the motion
    /// acceleration term removed. Injected calibration errors stay.
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_gyro: 0.0,
            gyro_bias: [0.0; 3],
            sigma_accel: 0.0,
            sigma_mag: 0.0,
            sigma_px: 0.0,
            sigma_rw: 0.0,
            include_motion_acceleration: false,
            imu_offset: 0.0,
            ir_offset: 0.0,
            outlier_fraction: 0.0,
            cross_match_rate: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("duration", self.duration),
            ("imu_rate", self.imu_rate),
            ("video_rate", self.video_rate),
            ("ir_rate", self.ir_rate),
            ("knot_spacing", self.knot_spacing),
            ("depth_knot_spacing", self.depth_knot_spacing),
            ("sweep_phase", self.sweep_phase),
            ("stance_hold", self.stance_hold),
            ("stance_turn", self.stance_turn),
            ("accel_scale", self.accel_scale),
            ("mag_scale", self.mag_scale),
            ("occluder_period", self.occluder_period),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(SimError::Invalid(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        for (name, p) in [
            ("track_drop_rate", self.track_drop_rate),
            ("cross_match_rate", self.cross_match_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.depth_min < 0.0 || self.depth_max < self.depth_min {
            return Err(SimError::Invalid("need 0 ≤ depth_min ≤ depth_max".into()));
        }
        let sigmas = [
            self.sigma_gyro,
            self.sigma_accel,
            self.sigma_mag,
            self.sigma_px,
            self.sigma_rw,
            self.depth_jitter,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(SimError::Invalid("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn imu_calibration(&self) -> ImuCalibration {
        ImuCalibration {
            accel_bias: Vec3::from(self.accel_bias),
            accel_scale: self.accel_scale,
            mag_bias: Vec3::from(self.mag_bias),
            mag_scale: self.mag_scale,
            sigma_accel: self.sigma_accel,
            sigma_mag: self.sigma_mag,
        }
    }

    pub fn imu_count(&self) -> usize {
        (self.duration * self.imu_rate + 1e-9).floor() as usize
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.video_rate + 1e-9).floor() as usize
    }

    pub fn to_manifest(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn from_manifest(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Manifest(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// The laparoscope used by every preset.
pub fn default_rig() -> StereoRig {
    let left = CameraIntrinsics {
        fx: 1100.0,
        fy: 1100.0,
        cx: 960.0,
        cy: 540.0,
        k1: -0.12,
        k2: 0.03,
        width: 1920,
        height: 1080,
    };
    let right = CameraIntrinsics {
        fx: 1098.0,
        fy: 1099.0,
        cx: 955.0,
        cy: 545.0,
        k1: -0.118,
        k2: 0.028,
        ..left
    };
    // lens z (optical axis) along body −x, lens x along body y
    let mount_rot = Mat3::from_columns(&[Vec3::y(), -Vec3::z(), -Vec3::x()]);
    StereoRig::new(
        left,
        right,
        Transform::new(rot_y(0.5f64.to_radians()), Vec3::new(0.005, 0.0, 0.0)),
        Transform::new(Rotation::from_matrix_unchecked(mount_rot), Vec3::new(0.0, -0.0025, 0.0)),
    )
    .expect("default rig is valid")
}

// ---------------------------------------------------------------------------
// trajectory

/// Natural cubic spline through uniformly spaced knots.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    t0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(t0: f64, h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
                let (b, a) = (4.0, 1.0);
                if i == 0 {
                    c[i] = a / b;
                    d[i] = rhs / b;
                } else {
                    let den = b - a * c[i - 1];
                    c[i] = a / den;
                    d[i] = (rhs - a * d[i - 1]) / den;
                }
            }
            for i in (0..k).rev() {
                m[i + 1] = d[i] - if i + 1 < k { c[i] * m[i + 2] } else { 0.0 };
            }
        }
        Self { t0, h, y, m }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(0.0, 1.0, vec![v, v])
    }

    /// Value, first and second derivative; clamped outside the knot range.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.y.len();
        let s = ((t - self.t0) / self.h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let h = self.h;
        let a = (i + 1) as f64 - s; // weight of knot i
        let b = s - i as f64;
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let (yi, yj) = (self.y[i], self.y[i + 1]);
        let h2 = h * h;
        let v = a * yi + b * yj + ((a * a * a - a) * mi + (b * b * b - b) * mj) * h2 / 6.0;
        let d1 = (yj - yi) / h + ((1.0 - 3.0 * a * a) * mi + (3.0 * b * b - 1.0) * mj) * h / 6.0;
        let d2 = a * mi + b * mj;
        (v, d1, d2)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum RotationProfile {
    Angles {
        a: NaturalSpline,
        b: NaturalSpline,
        c: NaturalSpline,
    },
    Stances {
        stances: Vec<Rotation>,
        hold: f64,
        turn: f64,
    },
}

/// `T ← C` orientation at zero angles maps the camera x-axis onto world +z.
fn base_rotation() -> Rotation {
    rot_y(-std::f64::consts::FRAC_PI_2)
}

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

impl RotationProfile {
    /// Continuous `T ← C` orientation.
    fn orientation(&self, t: f64) -> Rotation {
        match self {
            RotationProfile::Angles { a, b, c } => {
                rot_x(a.value(t)) * rot_y(b.value(t)) * base_rotation() * rot_x(c.value(t))
            }
            RotationProfile::Stances { stances, hold, turn } => {
                let seg = hold + turn;
                let k = ((t / seg).floor().max(0.0) as usize).min(stances.len() - 1);
                let tau = t - k as f64 * seg;
                if tau <= *hold || k + 1 == stances.len() {
                    return stances[k];
                }
                let rel = (stances[k].transpose() * stances[k + 1]).log();
                stances[k] * exp_so3(&(rel * smootherstep((tau - hold) / turn)))
            }
        }
    }
}

/// Ground-truth motion. Between IMU ticks the orientation follows the
/// geodesic, so the gyro rate of each tick integrates exactly to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    profile: RotationProfile,
    depth: NaturalSpline,
    imu_rate: f64,
    ticks: Vec<Rotation>,
    rates: Vec<Vec3>,
}

impl Trajectory {
    fn new(profile: RotationProfile, depth: NaturalSpline, imu_rate: f64, n_ticks: usize) -> Self {
        let ticks: Vec<Rotation> = (0..=n_ticks)
            .map(|i| profile.orientation(i as f64 / imu_rate))
            .collect();
        let rates = ticks
            .windows(2)
            .map(|w| (w[0].transpose() * w[1]).log() * imu_rate)
            .collect();
        Self {
            profile,
            depth,
            imu_rate,
            ticks,
            rates,
        }
    }

    pub fn tick_count(&self) -> usize {
        self.rates.len()
    }

    /// Body angular rate held over `[i/rate, (i+1)/rate)`, rad/s.
    pub fn body_rate(&self, i: usize) -> Vec3 {
        self.rates[i.min(self.rates.len() - 1)]
    }

    /// `T ← C` orientation.
    pub fn orientation(&self, t: f64) -> Rotation {
        let s = (t * self.imu_rate).max(0.0);
        let i = (s.floor() as usize).min(self.rates.len() - 1);
        let tau = t - i as f64 / self.imu_rate;
        if tau == 0.0 {
            return self.ticks[i];
        }
        self.ticks[i] * exp_so3(&(self.rates[i] * tau))
    }

    pub fn depth(&self, t: f64) -> f64 {
        self.depth.value(t)
    }

    /// `C ← T` pose; satisfies the pivot constraint exactly.
    pub fn pose(&self, t: f64) -> Transform {
        expand_pivot(&PivotPose::new(self.depth(t), self.orientation(t).transpose()))
            .with_frames(Frame::Camera, Frame::World)
    }

    /// Camera centre in the world, using the smooth profile.
    fn center(&self, t: f64) -> Vec3 {
        -(self.profile.orientation(t) * (Vec3::x() * self.depth(t)))
    }

    /// World acceleration of the camera centre, m/s².
    pub fn acceleration(&self, t: f64) -> Vec3 {
        let h = 1e-3;
        let end = self.rates.len() as f64 / self.imu_rate;
        let t = t.clamp(h, (end - h).max(h));
        (self.center(t + h) - 2.0 * self.center(t) + self.center(t - h)) / (h * h)
    }
}

// ---------------------------------------------------------------------------
// scene

/// Landmarks on the tissue dome (static) and on the occluder (dynamic).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub static_points: Vec<Vec3>,
    /// Dynamic points as offsets from the occluder centre.
    pub occluder_points: Vec<Vec3>,
    occluder_radius: f64,
    occluder_depth: f64,
    occluder_travel: f64,
    occluder_period: f64,
}

impl Scene {
    pub fn point_count(&self) -> usize {
        self.static_points.len() + self.occluder_points.len()
    }

    pub fn is_dynamic(&self, idx: usize) -> bool {
        idx >= self.static_points.len()
    }

    pub fn occluder_center(&self, t: f64) -> Vec3 {
        let w = 2.0 * std::f64::consts::PI / self.occluder_period;
        Vec3::new(
            self.occluder_travel * (w * t).sin(),
            0.5 * self.occluder_travel * (1.3 * w * t).cos(),
            -self.occluder_depth,
        )
    }

    /// World position of landmark `idx` at time `t`.
    pub fn point(&self, idx: usize, t: f64) -> Vec3 {
        match self.static_points.get(idx) {
            Some(p) => *p,
            None => self.occluder_center(t) + self.occluder_points[idx - self.static_points.len()],
        }
    }

    fn occluded(&self, eye: &Vec3, target: &Vec3, center: &Vec3) -> bool {
        if self.occluder_points.is_empty() {
            return false;
        }
        let d = target - eye;
        let len2 = d.norm_squared();
        let s = ((center - eye).dot(&d) / len2).clamp(0.0, 1.0);
        // stop just short of the target so surface points do not hide themselves
        s < 1.0 - 1e-6 && (eye + d * s - center).norm() < self.occluder_radius
    }

    fn faces(&self, idx: usize, eye: &Vec3, center: &Vec3) -> bool {
        if !self.is_dynamic(idx) {
            return true;
        }
        let offset = self.occluder_points[idx - self.static_points.len()];
        offset.dot(&(eye - center)) > 0.2 * self.occluder_radius * (eye - center).norm()
    }
}

fn build_scene(sc: &Scenario, rng: &mut ChaCha8Rng) -> Scene {
    let n_dyn = (sc.outlier_fraction * sc.landmark_count as f64).round() as usize;
    let cos_max = sc.dome_half_angle_deg.to_radians().cos();
    let mut static_points = Vec::with_capacity(sc.landmark_count - n_dyn);
    while static_points.len() < sc.landmark_count - n_dyn {
        let d: [f64; 3] = UnitSphere.sample(rng);
        let d = Vec3::from(d);
        if -d.z < cos_max {
            continue;
        }
        let r = rng.random_range(sc.dome_radius_min..=sc.dome_radius_max);
        static_points.push(d * r);
    }
    let occluder_points = (0..n_dyn)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(rng);
            Vec3::from(d) * sc.occluder_radius
        })
        .collect();
    Scene {
        static_points,
        occluder_points,
        occluder_radius: sc.occluder_radius,
        occluder_depth: sc.occluder_depth,
        occluder_travel: sc.occluder_travel,
        occluder_period: sc.occluder_period,
    }
}

fn knots(n: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

fn build_trajectory(sc: &Scenario, rng: &mut ChaCha8Rng) -> Trajectory {
    let span = sc.duration + 1.0;
    let n_angle = (span / sc.knot_spacing).ceil() as usize + 2;
    let amp = sc.swing_amplitude;
    let profile = match sc.motion {
        Motion::Wander | Motion::Sweep => {
            let a = NaturalSpline::new(0.0, sc.knot_spacing, knots(n_angle, rng, -amp, amp));
            let c = NaturalSpline::new(
                0.0,
                sc.knot_spacing,
                knots(n_angle, rng, -sc.roll_amplitude, sc.roll_amplitude),
            );
            let b = if sc.motion == Motion::Sweep {
                // hold, sweep across, hold, sweep back
                let n = (span / sc.sweep_phase).ceil() as usize + 2;
                let y = (0..n)
                    .map(|i| {
                        if (i / 2) % 2 == 0 {
                            -sc.sweep_amplitude
                        } else {
                            sc.sweep_amplitude
                        }
                    })
                    .collect();
                NaturalSpline::new(-sc.sweep_phase, sc.sweep_phase, y)
            } else {
                NaturalSpline::new(0.0, sc.knot_spacing, knots(n_angle, rng, -amp, amp))
            };
            RotationProfile::Angles { a, b, c }
        }
        Motion::Stances => {
            let n = (span / (sc.stance_hold + sc.stance_turn)).ceil() as usize + 1;
            let stances = (0..n)
                .map(|_| {
                    let d: [f64; 3] = UnitSphere.sample(rng);
                    let angle = rng.random_range(0.0..std::f64::consts::PI);
                    exp_so3(&(Vec3::from(d) * angle))
                })
                .collect();
            RotationProfile::Stances {
                stances,
                hold: sc.stance_hold,
                turn: sc.stance_turn,
            }
        }
    };
    let depth = if sc.depth_max > sc.depth_min {
        let n = (span / sc.depth_knot_spacing).ceil() as usize + 2;
        let y = if sc.depth_ramp {
            let rise = (sc.depth_max - sc.depth_min) / sc.duration;
            knots(n, rng, -sc.depth_jitter, sc.depth_jitter)
                .into_iter()
                .enumerate()
                .map(|(i, w)| {
                    let t = i as f64 * sc.depth_knot_spacing;
                    (sc.depth_min + rise * t + w).clamp(sc.depth_min, sc.depth_max)
                })
                .collect()
        } else {
            knots(n, rng, sc.depth_min, sc.depth_max)
        };
        NaturalSpline::new(0.0, sc.depth_knot_spacing, y)
    } else {
        NaturalSpline::constant(sc.depth_min)
    };
    Trajectory::new(profile, depth, sc.imu_rate, sc.imu_count() + 1)
}

// ---------------------------------------------------------------------------
// generation

/// Which physical points a track follows in each lens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackTruth {
    pub points: [usize; 2],
}

impl TrackTruth {
    pub fn is_cross_match(&self) -> bool {
        self.points[0] != self.points[1]
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
    pub scene: Scene,
    /// `C ← T` poses at the video frame times.
    pub frame_poses: Vec<TimedPose>,
    pub tracks: BTreeMap<u64, TrackTruth>,
    pub calibration: ImuCalibration,
    pub imu_offset: f64,
    pub ir_offset: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: Scenario,
    pub rig: StereoRig,
    pub refs: WorldReferences,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<TrackFrame>,
    /// IR-style ground-truth stream, stamped with the IR offset.
    pub ir: Vec<TimedPose>,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy)]
enum Stream {
    Scene = 1,
    Trajectory = 2,
    Imu = 3,
    Tracks = 4,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

fn noise3(dist: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec3 {
    match dist {
        Some(d) => Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng)),
        None => Vec3::zeros(),
    }
}

fn generate_imu(sc: &Scenario, traj: &Trajectory, refs: &WorldReferences) -> Vec<ImuSample> {
    let mut rng = stream_rng(sc.seed, Stream::Imu);
    let (ng, na, nm) = (
        gaussian(sc.sigma_gyro),
        gaussian(sc.sigma_accel),
        gaussian(sc.sigma_mag),
    );
    let gyro_bias = Vec3::from(sc.gyro_bias);
    let (ba, bm) = (Vec3::from(sc.accel_bias), Vec3::from(sc.mag_bias));
    (0..sc.imu_count())
        .map(|i| {
            let t = i as f64 / sc.imu_rate;
            let r_ct = traj.orientation(t).transpose();
            let accel_w = if sc.include_motion_acceleration {
                traj.acceleration(t)
            } else {
                Vec3::zeros()
            };
            let specific = r_ct * ((accel_w - refs.gravity()) / GRAVITY);
            ImuSample {
                t: t + sc.imu_offset,
                gyro: traj.body_rate(i) + gyro_bias + noise3(&ng, &mut rng),
                accel: specific / sc.accel_scale + noise3(&na, &mut rng) + ba,
                mag: (r_ct * *refs.magnetic()) / sc.mag_scale + noise3(&nm, &mut rng) + bm,
            }
        })
        .collect()
}

struct ActiveTrack {
    id: u64,
    points: [usize; 2],
    drift: [PixelPoint; 2],
    last_true: [PixelPoint; 2],
    age: u32,
}

const IMAGE_MARGIN: f64 = 5.0;
const MIN_LENS_DEPTH: f64 = 0.005;

fn generate_tracks(
    sc: &Scenario,
    rig: &StereoRig,
    traj: &Trajectory,
    scene: &Scene,
) -> (Vec<TrackFrame>, BTreeMap<u64, TrackTruth>) {
    let mut rng = stream_rng(sc.seed, Stream::Tracks);
    let (n_px, n_rw) = (gaussian(sc.sigma_px), gaussian(sc.sigma_rw));
    let sample2 = |d: &Option<Normal<f64>>, rng: &mut ChaCha8Rng| match d {
        Some(d) => PixelPoint::new(d.sample(rng), d.sample(rng)),
        None => PixelPoint::new(0.0, 0.0),
    };
    let lens_from_world = |pose: &Transform, lens: Lens| rig.lens_from_camera(lens) * *pose;

    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut truth = BTreeMap::new();
    let mut next_id: u64 = 0;
    let mut frames = Vec::with_capacity(sc.frame_count());
    let n_points = scene.point_count();
    let mut visible: Vec<[Option<PixelPoint>; 2]> = vec![[None, None]; n_points];

    for k in 0..sc.frame_count() {
        let t = k as f64 / sc.video_rate;
        let pose = traj.pose(t);
        let center = scene.occluder_center(t);
        for lens in Lens::BOTH {
            let l_w = lens_from_world(&pose, lens);
            let eye = l_w.inverse().translation().to_owned();
            let intr = rig.intrinsics(lens);
            for (idx, slot) in visible.iter_mut().enumerate() {
                let p = scene.point(idx, t);
                let x = l_w.act(&p);
                slot[lens.index()] = if x.z < MIN_LENS_DEPTH
                    || !scene.faces(idx, &eye, &center)
                    || scene.occluded(&eye, &p, &center)
                {
                    None
                } else {
                    intr.project(&x).ok().filter(|px| {
                        px.u >= IMAGE_MARGIN
                            && px.v >= IMAGE_MARGIN
                            && px.u < intr.width as f64 - IMAGE_MARGIN
                            && px.v < intr.height as f64 - IMAGE_MARGIN
                    })
                };
            }
        }

        let mut frame = TrackFrame::new(t);
        let mut survivors = Vec::with_capacity(active.len());
        for mut tr in active.drain(..) {
            let now = [visible[tr.points[0]][0], visible[tr.points[1]][1]];
            let (Some(p0), Some(p1)) = (now[0], now[1]) else {
                continue;
            };
            let now = [p0, p1];
            let too_fast = (0..2).any(|l| {
                let (a, b) = (now[l], tr.last_true[l]);
                (a.u - b.u).hypot(a.v - b.v) > sc.max_pixel_speed
            });
            let hazard = rng.random::<f64>() < sc.track_drop_rate;
            if too_fast || hazard {
                continue;
            }
            tr.age += 1;
            for l in 0..2 {
                let step = sample2(&n_rw, &mut rng);
                tr.drift[l] = PixelPoint::new(tr.drift[l].u + step.u, tr.drift[l].v + step.v);
                tr.last_true[l] = now[l];
            }
            survivors.push(tr);
        }
        active = survivors;

        if active.len() < sc.track_target {
            let tracked: std::collections::BTreeSet<usize> =
                active.iter().map(|t| t.points[0]).collect();
            let mut candidates: Vec<usize> = (0..n_points)
                .filter(|&i| visible[i][0].is_some() && visible[i][1].is_some() && !tracked.contains(&i))
                .collect();
            candidates.shuffle(&mut rng);
            let right_visible: Vec<usize> =
                (0..n_points).filter(|&i| visible[i][1].is_some()).collect();
            for &idx in candidates.iter().take(sc.track_target - active.len()) {
                let mut pair = [idx, idx];
                if rng.random::<f64>() < sc.cross_match_rate && right_visible.len() > 1 {
                    while pair[1] == idx {
                        pair[1] = right_visible[rng.random_range(0..right_visible.len())];
                    }
                }
                truth.insert(next_id, TrackTruth { points: pair });
                active.push(ActiveTrack {
                    id: next_id,
                    points: pair,
                    drift: [PixelPoint::new(0.0, 0.0); 2],
                    last_true: [
                        visible[pair[0]][0].expect("visible"),
                        visible[pair[1]][1].expect("visible"),
                    ],
                    age: 0,
                });
                next_id += 1;
            }
        }

        for tr in &active {
            for l in 0..2 {
                let w = sample2(&n_px, &mut rng);
                let p = tr.last_true[l];
                frame.lenses[l].push(TrackPoint {
                    id: tr.id,
                    pixel: PixelPoint::new(p.u + tr.drift[l].u + w.u, p.v + tr.drift[l].v + w.v),
                    age: tr.age,
                });
            }
        }
        for l in &mut frame.lenses {
            l.sort_by_key(|p| p.id);
        }
        frames.push(frame);
    }
    (frames, truth)
}

/// Runs the scenario. Pure function of the scenario.
pub fn generate(sc: &Scenario) -> Result<Simulation, SimError> {
    sc.validate()?;
    let rig = default_rig();
    let refs = WorldReferences::default();
    let scene = build_scene(sc, &mut stream_rng(sc.seed, Stream::Scene));
    let traj = build_trajectory(sc, &mut stream_rng(sc.seed, Stream::Trajectory));
    let imu = generate_imu(sc, &traj, &refs);
    let (frames, tracks) = generate_tracks(sc, &rig, &traj, &scene);
    let frame_poses = (0..sc.frame_count())
        .map(|k| {
            let t = k as f64 / sc.video_rate;
            TimedPose { t, pose: traj.pose(t) }
        })
        .collect();
    let n_ir = (sc.duration * sc.ir_rate + 1e-9).floor() as usize;
    let ir = (0..n_ir)
        .map(|j| {
            let t = j as f64 / sc.ir_rate;
            TimedPose {
                t: t + sc.ir_offset,
                pose: traj.pose(t),
            }
        })
        .collect();
    Ok(Simulation {
        scenario: sc.clone(),
        rig,
        refs,
        imu,
        frames,
        ir,
        truth: GroundTruth {
            trajectory: traj,
            scene,
            frame_poses,
            tracks,
            calibration: sc.imu_calibration(),
            imu_offset: sc.imu_offset,
            ir_offset: sc.ir_offset,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const IMU_FILE: &str = "imu.csv";
pub const TRACK_FILE: &str = "tracks.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.csv";
pub const IR_FILE: &str = "ir.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const IMU_CALIBRATION_FILE: &str = "imu_calibration.csv";

/// Writes all streams plus the manifest; returns the written paths.
pub fn emit(sim: &Simulation, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(|source| SimError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let files = [
        (MANIFEST_FILE, sim.scenario.to_manifest()),
        (IMU_FILE, sensors::format_imu_csv(&sim.imu)),
        (TRACK_FILE, tracks::format_track_csv(&sim.frames)),
        (GROUND_TRUTH_FILE, sensors::format_pose_csv(&sim.truth.frame_poses)),
        (IR_FILE, sensors::format_pose_csv(&sim.ir)),
        (CALIBRATION_FILE, camera::format_calibration(&sim.rig)),
        (IMU_CALIBRATION_FILE, sensors::format_imu_calibration(&sim.truth.calibration)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        io::write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a manifest file and regenerates its scenario.
pub fn load_manifest(path: &Path) -> Result<Scenario, SimError> {
    Scenario::from_manifest(&io::read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extract_pivot;
    use crate::sensors::{integrate_gyro_between, parse_imu_csv, parse_pose_csv};

    fn short(name: &str, secs: f64) -> Scenario {
        Scenario {
            duration: secs,
            ..Scenario::preset(name).unwrap()
        }
    }

    #[test]
    fn spline_interpolates_and_is_c2() {
        let y = vec![0.0, 1.0, -0.5, 2.0, 0.3];
        let s = NaturalSpline::new(1.0, 0.5, y.clone());
        for (i, v) in y.iter().enumerate() {
            assert!((s.value(1.0 + 0.5 * i as f64) - v).abs() < 1e-12);
        }
        // natural end conditions and continuity of the second derivative at knots
        assert!(s.eval(1.0).2.abs() < 1e-12);
        assert!(s.eval(3.0).2.abs() < 1e-12);
        for i in 1..4 {
            let t = 1.0 + 0.5 * i as f64;
            let (l, r) = (s.eval(t - 1e-9), s.eval(t + 1e-9));
            assert!((l.1 - r.1).abs() < 1e-6);
            assert!((l.2 - r.2).abs() < 1e-6);
        }
        // derivative by finite differences
        let t = 1.83;
        let fd = (s.value(t + 1e-6) - s.value(t - 1e-6)) / 2e-6;
        assert!((fd - s.eval(t).1).abs() < 1e-6);
    }

    #[test]
    fn ground_truth_stays_on_the_pivot_model() {
        for name in PRESETS {
            let sim = generate(&short(name, 2.0)).unwrap();
            for p in &sim.truth.frame_poses {
                let (_, off) = extract_pivot(&p.pose);
                assert_eq!(off, crate::geometry::Vec2::zeros());
            }
        }
    }

    #[test]
    fn default_sizes() {
        let sc = Scenario::default();
        assert_eq!(sc.imu_count(), 13200);
        assert_eq!(sc.frame_count(), 3600);
    }

    #[test]
    fn gyro_integrates_to_ground_truth() {
        let sim = generate(&short("pure-rotation", 3.0).noiseless()).unwrap();
        let traj = &sim.truth.trajectory;
        let (t1, t2) = (0.3137, 1.3137);
        let delta = integrate_gyro_between(&sim.imu, t1, t2).delta;
        let expected = traj.orientation(t1).transpose() * traj.orientation(t2);
        assert!((delta.transpose() * expected).angle() < 1e-12);
    }

    #[test]
    fn static_noiseless_streams_are_constant() {
        let sc = Scenario {
            swing_amplitude: 0.0,
            roll_amplitude: 0.0,
            depth_max: 0.09,
            depth_min: 0.09,
            track_drop_rate: 0.0,
            ..short("standard", 1.0).noiseless()
        };
        let sim = generate(&sc).unwrap();
        let first = sim.imu[0];
        for s in &sim.imu {
            assert_eq!(s.gyro, Vec3::zeros());
            assert!((s.accel - first.accel).norm() < 1e-15);
            assert!((s.mag - first.mag).norm() < 1e-13);
        }
        let f0 = &sim.frames[1];
        for f in &sim.frames[2..] {
            for l in 0..2 {
                let now: Vec<_> = f.lenses[l].iter().map(|p| (p.id, p.pixel)).collect();
                let then: Vec<_> = f0.lenses[l].iter().map(|p| (p.id, p.pixel)).collect();
                assert_eq!(now, then);
            }
        }
    }

    #[test]
    fn corrected_accel_has_unit_norm() {
        let sim = generate(&short("calibration-wand", 20.0)).unwrap();
        let cal = sim.truth.calibration;
        let still: Vec<f64> = sim
            .imu
            .iter()
            .filter(|s| s.gyro.norm() < sensors::STATIC_GYRO_THRESHOLD)
            .map(|s| cal.correct_accel(&s.accel).norm())
            .collect();
        let n = still.len() as f64;
        let mean = still.iter().sum::<f64>() / n;
        // noise on the norm is σ·d along the radial direction
        let sigma = sim.scenario.sigma_accel * cal.accel_scale;
        assert!((mean - 1.0).abs() < 3.0 * sigma / n.sqrt() + 1e-4, "{mean}");
    }

    #[test]
    fn noise_has_configured_variance() {
        let sc = short("standard", 60.0);
        let sim = generate(&Scenario { landmark_count: 0, ..sc.clone() }).unwrap();
        let clean = generate(&Scenario { landmark_count: 0, ..sc.noiseless() }).unwrap();
        let bias = Vec3::from(sc.gyro_bias);
        let n = sim.imu.len() as f64;
        let mut var = 0.0;
        for (a, b) in sim.imu.iter().zip(&clean.imu) {
            var += (a.gyro - b.gyro - bias).map(|x| x * x).sum();
        }
        var /= 3.0 * n;
        let s2 = sc.sigma_gyro * sc.sigma_gyro;
        assert!((var - s2).abs() < 0.2 * s2, "{var} vs {s2}");
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let sc = short("fast-sweep-occlusion", 2.0);
        let a = generate(&sc).unwrap();
        let b = generate(&sc).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.frames, b.frames);
        let c = generate(&Scenario { seed: 8, ..sc }).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn tracks_carry_stereo_ids_and_cross_matches() {
        let sim = generate(&short("standard", 3.0)).unwrap();
        let f = &sim.frames[30];
        assert!(f.lenses[0].len() > 50, "{}", f.lenses[0].len());
        assert_eq!(f.stereo_ids().len(), f.lenses[0].len());
        let crosses = sim.truth.tracks.values().filter(|t| t.is_cross_match()).count();
        assert!(crosses > 0);
    }

    #[test]
    fn emit_round_trip() {
        let sim = generate(&short("standard", 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit(&sim, dir.path()).unwrap();
        let imu = parse_imu_csv(&fs::read_to_string(dir.path().join(IMU_FILE)).unwrap()).unwrap();
        assert_eq!(imu, sim.imu);
        let gt = parse_pose_csv(&fs::read_to_string(dir.path().join(GROUND_TRUTH_FILE)).unwrap()).unwrap();
        assert_eq!(gt, sim.truth.frame_poses.iter().map(|p| TimedPose { pose: Transform::new(*p.pose.rotation(), *p.pose.translation()), ..*p }).collect::<Vec<_>>());
        let frames = tracks::parse_track_csv(&fs::read_to_string(dir.path().join(TRACK_FILE)).unwrap(), 1.0).unwrap();
        assert_eq!(frames, sim.frames);
        let sc = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(sc, sim.scenario);
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        assert!(Scenario::from_manifest("seed = 3\nbogus = 1\n").is_err());
        let sc = Scenario::from_manifest("name = \"x\"\nseed = 3\n").unwrap();
        assert_eq!(sc.seed, 3);
        assert_eq!(sc.imu_rate, 220.0);
    }
}
