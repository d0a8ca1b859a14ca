//! IMU measurement models, sphere calibration, gyroscope preintegration and
//! velocity-based time-offset estimation.

use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector4};
use thiserror::Error;

use crate::geometry::{exp_so3, Rotation, Transform, Twist, Vec3, Vec6};
use crate::io::{self, DataError};

/// Gravity norm, m/s².
pub const GRAVITY: f64 = 9.81;
/// Earth magnetic field norm used as the magnetometer sphere radius, μT.
pub const MAGNETIC_FIELD: f64 = 48.6;

/// Gyro magnitude below which a sample counts as quasi-static for the
/// accelerometer fit, rad/s.
pub const STATIC_GYRO_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("sphere fit needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sphere fit is rank deficient (samples coplanar or collinear; conditioning {0:.3e})")]
    RankDeficient(f64),
    #[error("sphere fit did not converge")]
    FitDiverged,
    #[error("trajectory needs at least 2 poses")]
    TooFewPoses,
    #[error("non-increasing timestamps at index {index} ({t:.6} s)")]
    NonIncreasingTime { index: usize, t: f64 },
    #[error("no overlap between the streams for any offset in [{min}, {max}] s")]
    NoOverlap { min: f64, max: f64 },
    #[error("invalid search grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One row of an IMU stream. Accelerometer in units of g, magnetometer in μT,
/// all axes expressed in the camera body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
    pub mag: Vec3,
}

/// Scale/bias errors of the accelerometer and magnetometer.
///
/// Raw readings follow `ã = (a − g)/d_a + n_a + b_a` and `m̃ = m/d_m + n_m + b_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuCalibration {
    pub accel_bias: Vec3,
    pub accel_scale: f64,
    pub mag_bias: Vec3,
    pub mag_scale: f64,
    pub sigma_accel: f64,
    pub sigma_mag: f64,
}

impl Default for ImuCalibration {
    fn default() -> Self {
        Self {
            accel_bias: Vec3::zeros(),
            accel_scale: 1.0,
            mag_bias: Vec3::zeros(),
            mag_scale: 1.0,
            sigma_accel: 0.0,
            sigma_mag: 0.0,
        }
    }
}

impl ImuCalibration {
    /// `(ã − b_a) d_a`: specific force `a − g` in units of g.
    pub fn correct_accel(&self, raw: &Vec3) -> Vec3 {
        (raw - self.accel_bias) * self.accel_scale
    }

    /// `(m̃ − b_m) d_m`, μT.
    pub fn correct_mag(&self, raw: &Vec3) -> Vec3 {
        (raw - self.mag_bias) * self.mag_scale
    }

    /// Gravity seen in the camera frame under the constant-velocity
    /// assumption, m/s².
    pub fn gravity_in_camera(&self, raw_accel: &Vec3) -> Vec3 {
        -self.correct_accel(raw_accel) * GRAVITY
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.accel_scale > 0.0 && self.mag_scale > 0.0 {
            Ok(())
        } else {
            Err(SensorError::Data(DataError::Invalid {
                row: 0,
                message: "calibration scales must be positive".into(),
            }))
        }
    }
}

/// World-frame gravity and magnetic field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldReferences {
    gravity: Vec3,
    magnetic: Vec3,
}

impl Default for WorldReferences {
    /// Gravity along −z; field with 64° inclination pointing north (+y).
    fn default() -> Self {
        let incl = 64f64.to_radians();
        Self::new(
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.0, incl.cos(), -incl.sin()),
        )
    }
}

impl WorldReferences {
    /// Directions are rescaled to the fixed norms 9.81 m/s² and 48.6 μT.
    pub fn new(gravity_dir: Vec3, magnetic_dir: Vec3) -> Self {
        Self {
            gravity: gravity_dir.normalize() * GRAVITY,
            magnetic: magnetic_dir.normalize() * MAGNETIC_FIELD,
        }
    }

    /// Keeps gravity along −z and takes the field direction from a corrected
    /// magnetometer reading rotated into the world by the initial pose
    /// (`C ← T`).
    pub fn from_initial_magnetometer(mag_camera: &Vec3, pose: &Transform) -> Self {
        let dir = pose.rotation().transpose() * *mag_camera;
        Self::new(Vec3::new(0.0, 0.0, -1.0), dir)
    }

    pub fn gravity(&self) -> &Vec3 {
        &self.gravity
    }

    pub fn magnetic(&self) -> &Vec3 {
        &self.magnetic
    }
}

/// Result of a least-squares sphere fit `‖(s − b) d‖ = radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereFit {
    pub bias: Vec3,
    pub scale: f64,
    /// RMS of `‖(s − b) d‖ − radius`.
    pub rms: f64,
}

const MIN_SPHERE_SAMPLES: usize = 10;

/// Fits bias and scale so that corrected samples lie on a sphere of the given
/// radius. Linear algebraic-sphere initialization, then Gauss–Newton on the
/// geometric residual.
pub fn fit_sphere_calibration(samples: &[Vec3], radius: f64) -> Result<SphereFit, SensorError> {
    if samples.len() < MIN_SPHERE_SAMPLES {
        return Err(SensorError::TooFewSamples {
            needed: MIN_SPHERE_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<Vec3>() / n;
    let spread = (samples.iter().map(|s| (s - mean).norm_squared()).sum::<f64>() / n).sqrt();
    if !(spread > 0.0) {
        return Err(SensorError::RankDeficient(0.0));
    }

    // ‖p‖² = 2 c·p + k on normalized points p = (s − mean)/spread
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for s in samples {
        let p = (s - mean) / spread;
        let row = Vector4::new(2.0 * p.x, 2.0 * p.y, 2.0 * p.z, 1.0);
        ata += row * row.transpose();
        atb += row * p.norm_squared();
    }
    let eig = ata.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let conditioning = lo / hi;
    if !(conditioning > 1e-12) {
        return Err(SensorError::RankDeficient(conditioning));
    }
    let sol = ata
        .cholesky()
        .ok_or(SensorError::RankDeficient(conditioning))?
        .solve(&atb);
    let c = Vec3::new(sol[0], sol[1], sol[2]);
    let r2 = sol[3] + c.norm_squared();
    if !(r2 > 0.0) {
        return Err(SensorError::FitDiverged);
    }
    let mut bias = mean + c * spread;
    let mut scale = radius / (r2.sqrt() * spread);

    for _ in 0..100 {
        let mut h = Matrix4::<f64>::zeros();
        let mut g = Vector4::<f64>::zeros();
        for s in samples {
            let d = s - bias;
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let e = scale * len - radius;
            let dir = d / len;
            let j = Vector4::new(-scale * dir.x, -scale * dir.y, -scale * dir.z, len);
            h += j * j.transpose();
            g += j * e;
        }
        let step = h.cholesky().ok_or(SensorError::FitDiverged)?.solve(&-g);
        bias += Vec3::new(step[0], step[1], step[2]);
        scale += step[3];
        if !(scale > 0.0) || !bias.iter().all(|v| v.is_finite()) {
            return Err(SensorError::FitDiverged);
        }
        let rel = Vec3::new(step[0], step[1], step[2]).norm() / spread + (step[3] / scale).abs();
        if rel < 1e-14 {
            break;
        }
    }
    let rms = (samples
        .iter()
        .map(|s| ((s - bias).norm() * scale - radius).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SphereFit { bias, scale, rms })
}

/// Fits both sensors of an IMU stream. The accelerometer only uses samples
/// whose gyro magnitude is below [`STATIC_GYRO_THRESHOLD`].
pub fn calibrate_imu(samples: &[ImuSample]) -> Result<ImuCalibration, SensorError> {
    let still: Vec<Vec3> = samples
        .iter()
        .filter(|s| s.gyro.norm() < STATIC_GYRO_THRESHOLD)
        .map(|s| s.accel)
        .collect();
    let accel = fit_sphere_calibration(&still, 1.0)?;
    let mags: Vec<Vec3> = samples.iter().map(|s| s.mag).collect();
    let mag = fit_sphere_calibration(&mags, MAGNETIC_FIELD)?;
    Ok(ImuCalibration {
        accel_bias: accel.bias,
        accel_scale: accel.scale,
        mag_bias: mag.bias,
        mag_scale: mag.scale,
        sigma_accel: accel.rms / accel.scale,
        sigma_mag: mag.rms / mag.scale,
    })
}

/// Relative body rotation accumulated from gyroscope samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintegratedGyro {
    pub delta: Rotation,
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
}

impl PreintegratedGyro {
    pub fn identity(t: f64) -> Self {
        Self {
            delta: Rotation::identity(),
            t_start: t,
            t_end: t,
            samples: 0,
        }
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Concatenation of two adjacent spans.
    pub fn then(&self, next: &PreintegratedGyro) -> PreintegratedGyro {
        PreintegratedGyro {
            delta: self.delta * next.delta,
            t_start: self.t_start,
            t_end: next.t_end,
            samples: self.samples + next.samples,
        }
    }
}

/// `∏ Exp(ω_i Δt)`, multiplied on the right in sample order.
pub fn integrate_gyro(rates: &[Vec3], dt: f64, t_start: f64) -> PreintegratedGyro {
    let mut delta = Rotation::identity();
    for w in rates {
        delta = delta * exp_so3(&(w * dt));
    }
    PreintegratedGyro {
        delta,
        t_start,
        t_end: t_start + dt * rates.len() as f64,
        samples: rates.len(),
    }
}

/// Integrates a timestamped stream over `[t1, t2]`. Sample `i` holds over
/// `[t_i, t_{i+1})`; the last sample holds for the stream's mean period.
/// Partial overlaps at both ends contribute `Exp(ω τ)` for the overlap `τ`.
pub fn integrate_gyro_between(stream: &[ImuSample], t1: f64, t2: f64) -> PreintegratedGyro {
    let mut out = PreintegratedGyro::identity(t1);
    out.t_end = t2.max(t1);
    if stream.is_empty() || t2 <= t1 {
        return out;
    }
    let period = if stream.len() > 1 {
        (stream[stream.len() - 1].t - stream[0].t) / (stream.len() - 1) as f64
    } else {
        0.0
    };
    // first sample whose interval ends after t1
    let start = stream.partition_point(|s| s.t <= t1).saturating_sub(1);
    for i in start..stream.len() {
        let a = stream[i].t;
        if a >= t2 {
            break;
        }
        let b = stream.get(i + 1).map_or(a + period, |s| s.t);
        let tau = b.min(t2) - a.max(t1);
        if tau > 0.0 {
            out.delta = out.delta * exp_so3(&(stream[i].gyro * tau));
            out.samples += 1;
        }
    }
    out
}

/// Index of the sample closest in time to `t`.
pub fn nearest_sample(stream: &[ImuSample], t: f64) -> Option<&ImuSample> {
    if stream.is_empty() {
        return None;
    }
    let i = stream.partition_point(|s| s.t < t);
    let candidates = [i.checked_sub(1), (i < stream.len()).then_some(i)];
    candidates
        .into_iter()
        .flatten()
        .min_by(|&a, &b| {
            (stream[a].t - t)
                .abs()
                .total_cmp(&(stream[b].t - t).abs())
        })
        .map(|i| &stream[i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Transform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedTwist {
    pub t: f64,
    pub twist: Twist,
}

/// Finite-difference body twists `Log(T_i⁻¹ T_{i+1}) / Δt`, stamped at the
/// interval midpoint. Poses map body coordinates into the world (`T ← C`).
pub fn twist_from_trajectory(poses: &[TimedPose]) -> Result<Vec<TimedTwist>, SensorError> {
    if poses.len() < 2 {
        return Err(SensorError::TooFewPoses);
    }
    poses
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let dt = w[1].t - w[0].t;
            if !(dt > 0.0) {
                return Err(SensorError::NonIncreasingTime {
                    index: i + 1,
                    t: w[1].t,
                });
            }
            let xi = (w[0].pose.inverse() * w[1].pose).log().to_vector() / dt;
            Ok(TimedTwist {
                t: 0.5 * (w[0].t + w[1].t),
                twist: Twist::from_vector(&xi),
            })
        })
        .collect()
}

/// Gyro readings as angular-only twists. Each reading is held until the
/// next sample, so it is stamped at the middle of its hold interval.
pub fn gyro_twists(stream: &[ImuSample]) -> Vec<TimedTwist> {
    stream
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let half = match (stream.get(i + 1), i.checked_sub(1).map(|j| &stream[j])) {
                (Some(next), _) => 0.5 * (next.t - s.t),
                (None, Some(prev)) => 0.5 * (s.t - prev.t),
                (None, None) => 0.0,
            };
            TimedTwist {
                t: s.t + half,
                twist: Twist::new(s.gyro, Vec3::zeros()),
            }
        })
        .collect()
}

/// Which part of the twist the offset search compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwistPart {
    Full,
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for OffsetGrid {
    fn default() -> Self {
        Self {
            min: -0.5,
            max: 0.5,
            step: 0.001,
        }
    }
}

impl OffsetGrid {
    pub fn values(&self) -> Result<Vec<f64>, SensorError> {
        if !(self.step > 0.0) || !(self.max >= self.min) {
            return Err(SensorError::BadGrid(format!(
                "min {} max {} step {}",
                self.min, self.max, self.step
            )));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEstimate {
    pub offset: f64,
    /// `(dt, mean ‖ξ_j(t+dt) − ξ_k(t)‖)` for every grid value with overlap.
    pub curve: Vec<(f64, f64)>,
    /// Set when the cost curve varies by less than 5% of its mean.
    pub unreliable: bool,
}

fn twist_part(t: &Twist, part: TwistPart) -> Vec6 {
    match part {
        TwistPart::Full => t.to_vector(),
        TwistPart::Angular => Twist::new(t.omega, Vec3::zeros()).to_vector(),
    }
}

/// Linear interpolation of a time-sorted twist stream.
fn interpolate(stream: &[TimedTwist], t: f64, part: TwistPart) -> Option<Vec6> {
    let first = stream.first()?;
    let last = stream.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let i = stream.partition_point(|s| s.t <= t);
    if i == stream.len() {
        return Some(twist_part(&last.twist, part));
    }
    let (a, b) = (&stream[i - 1], &stream[i]);
    let w = (t - a.t) / (b.t - a.t);
    Some(twist_part(&a.twist, part) * (1.0 - w) + twist_part(&b.twist, part) * w)
}

/// Mean of the linear interpolant of `stream` over `[a, b]`.
fn interval_mean(stream: &[TimedTwist], a: f64, b: f64, part: TwistPart) -> Option<Vec6> {
    let first = stream.first()?;
    let last = stream.last()?;
    if a < first.t || b > last.t {
        return None;
    }
    if !(b > a) {
        return interpolate(stream, a, part);
    }
    let start = stream.partition_point(|s| s.t <= a).max(1);
    let mut sum = Vec6::zeros();
    for w in stream[start - 1..].windows(2) {
        if w[0].t >= b {
            break;
        }
        let (lo, hi) = (a.max(w[0].t), b.min(w[1].t));
        if hi <= lo {
            continue;
        }
        let at = |t: f64| {
            let x = (t - w[0].t) / (w[1].t - w[0].t);
            twist_part(&w[0].twist, part) * (1.0 - x) + twist_part(&w[1].twist, part) * x
        };
        sum += (at(lo) + at(hi)) * (0.5 * (hi - lo));
    }
    Some(sum / (b - a))
}

/// Grid search for `dt` minimizing `‖ξ_j(t_i + dt) − ξ_k(t_i)‖` over the
/// samples of `stream_k`, with `stream_j` linearly interpolated. Each `ξ_j`
/// term is the mean of the interpolant over the span that `t_i` covers in
/// `stream_k` (half way to each neighbour), so a sparse `stream_k` is
/// compared with rates averaged like its own. The cost at each offset is
/// averaged over the overlapping samples. Ties go to the smallest `|dt|`.
pub fn estimate_time_offset(
    stream_j: &[TimedTwist],
    stream_k: &[TimedTwist],
    grid: &OffsetGrid,
    part: TwistPart,
) -> Result<OffsetEstimate, SensorError> {
    for stream in [stream_j, stream_k] {
        if let Some(i) = stream.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(SensorError::NonIncreasingTime {
                index: i + 1,
                t: stream[i + 1].t,
            });
        }
    }
    let n = stream_k.len();
    let spans: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = stream_k[i].t;
            let left = (i > 0).then(|| t - stream_k[i - 1].t);
            let right = (i + 1 < n).then(|| stream_k[i + 1].t - t);
            let left = left.or(right).unwrap_or(0.0);
            let right = right.unwrap_or(left);
            (t - 0.5 * left, t + 0.5 * right)
        })
        .collect();
    let mut curve = Vec::new();
    for dt in grid.values()? {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (s, (a, b)) in stream_k.iter().zip(&spans) {
            if let Some(v) = interval_mean(stream_j, a + dt, b + dt, part) {
                sum += (v - twist_part(&s.twist, part)).norm();
                count += 1;
            }
        }
        if count >= 2 {
            curve.push((dt, sum / count as f64));
        }
    }
    if curve.is_empty() {
        return Err(SensorError::NoOverlap {
            min: grid.min,
            max: grid.max,
        });
    }
    let &(offset, _) = curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.abs().total_cmp(&b.0.abs())))
        .expect("non-empty");
    let (lo, hi, total) = curve.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, 0.0),
        |(lo, hi, total), &(_, c)| (lo.min(c), hi.max(c), total + c),
    );
    let mean = total / curve.len() as f64;
    Ok(OffsetEstimate {
        offset,
        unreliable: hi - lo < 0.05 * mean,
        curve,
    })
}

pub const IMU_HEADER: [&str; 10] = [
    "timestamp_s", "wx", "wy", "wz", "ax", "ay", "az", "mx", "my", "mz",
];

pub const POSE_HEADER: [&str; 13] = [
    "timestamp_s", "r00", "r01", "r02", "tx", "r10", "r11", "r12", "ty", "r20", "r21", "r22", "tz",
];

pub fn format_imu_csv(stream: &[ImuSample]) -> String {
    io::format_numeric(
        &IMU_HEADER,
        stream.iter().map(|s| {
            [
                s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z, s.mag.x,
                s.mag.y, s.mag.z,
            ]
        }),
    )
}

pub fn parse_imu_csv(text: &str) -> Result<Vec<ImuSample>, SensorError> {
    let rows = io::parse_numeric(text, &IMU_HEADER)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for row in rows {
        let v = &row.values;
        let s = ImuSample {
            t: v[0],
            gyro: Vec3::new(v[1], v[2], v[3]),
            accel: Vec3::new(v[4], v[5], v[6]),
            mag: Vec3::new(v[7], v[8], v[9]),
        };
        if let Some(prev) = out.last() {
            if !(s.t > prev.t) {
                return Err(DataError::Invalid {
                    row: row.line,
                    message: format!("timestamp {} does not increase", s.t),
                }
                .into());
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn format_pose_csv(poses: &[TimedPose]) -> String {
    io::format_numeric(
        &POSE_HEADER,
        poses.iter().map(|p| {
            let mut row = [0.0; 13];
            row[0] = p.t;
            row[1..].copy_from_slice(&p.pose.to_row_major());
            row
        }),
    )
}

pub fn parse_pose_csv(text: &str) -> Result<Vec<TimedPose>, SensorError> {
    io::parse_numeric(text, &POSE_HEADER)?
        .into_iter()
        .map(|row| {
            let pose = Transform::from_row_major(&row.values[1..]).map_err(|e| {
                DataError::Invalid {
                    row: row.line,
                    message: e.to_string(),
                }
            })?;
            Ok(TimedPose {
                t: row.values[0],
                pose,
            })
        })
        .collect()
}

pub fn format_imu_calibration(cal: &ImuCalibration) -> String {
    let mut out = String::from("key,value\n");
    let b = &cal.accel_bias;
    let m = &cal.mag_bias;
    let _ = writeln!(out, "accel_bias,{},{},{}", b.x, b.y, b.z);
    let _ = writeln!(out, "accel_scale,{}", cal.accel_scale);
    let _ = writeln!(out, "mag_bias,{},{},{}", m.x, m.y, m.z);
    let _ = writeln!(out, "mag_scale,{}", cal.mag_scale);
    let _ = writeln!(out, "sigma_accel,{}", cal.sigma_accel);
    let _ = writeln!(out, "sigma_mag,{}", cal.sigma_mag);
    out
}

pub fn parse_imu_calibration(text: &str) -> Result<ImuCalibration, SensorError> {
    let mut cal = ImuCalibration::default();
    let mut seen = 0u8;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 || line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let key = fields.next().unwrap_or_default();
        let vals = fields
            .enumerate()
            .map(|(c, f)| {
                f.trim().parse::<f64>().map_err(|_| DataError::Number {
                    row: i + 1,
                    column: c + 2,
                    name: key.to_string(),
                    text: f.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let want = if key.ends_with("_bias") { 3 } else { 1 };
        if vals.len() != want {
            return Err(DataError::Columns {
                row: i + 1,
                expected: want + 1,
                found: vals.len() + 1,
            }
            .into());
        }
        let bit = match key {
            "accel_bias" => {
                cal.accel_bias = Vec3::new(vals[0], vals[1], vals[2]);
                1u8 << 0
            }
            "accel_scale" => {
                cal.accel_scale = vals[0];
                1u8 << 1
            }
            "mag_bias" => {
                cal.mag_bias = Vec3::new(vals[0], vals[1], vals[2]);
                1u8 << 2
            }
            "mag_scale" => {
                cal.mag_scale = vals[0];
                1u8 << 3
            }
            "sigma_accel" => {
                cal.sigma_accel = vals[0];
                1u8 << 4
            }
            "sigma_mag" => {
                cal.sigma_mag = vals[0];
                1u8 << 5
            }
            other => {
                return Err(DataError::Invalid {
                    row: i + 1,
                    message: format!("unknown key '{other}'"),
                }
                .into())
            }
        };
        seen |= bit;
    }
    if seen & 0b1111 != 0b1111 {
        return Err(DataError::Invalid {
            row: 0,
            message: "IMU calibration needs accel_bias, accel_scale, mag_bias, mag_scale".into(),
        }
        .into());
    }
    cal.validate()?;
    Ok(cal)
}
