//! The five residual kinds with analytic Jacobians, robustifiers and the
//! statistics-based weighting.
//!
//! All poses are `C ← T` transforms. Jacobians are taken with respect to a
//! right-multiplied perturbation `T · Exp(ξ)` with `ξ = [ω, υ]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x6, Matrix3x6};
use thiserror::Error;

use crate::camera::{CameraError, Lens, PixelPoint, StereoRig};
use crate::geometry::{hat, right_jacobian_inverse, Mat3, Rotation, Transform, Vec2, Vec3};
use crate::io::{self, DataError};
use crate::sensors::WorldReferences;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("degenerate statistic for {kind}: variance {variance}")]
    DegenerateStatistic { kind: ResidualKind, variance: f64 },
    #[error("variance must be positive and finite, got {0}")]
    ZeroVariance(f64),
    #[error("residual count must be at least 1")]
    EmptyCount,
    #[error("huber threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("{kind} block expects {expected} poses, got {got}")]
    PoseCount {
        kind: ResidualKind,
        expected: usize,
        got: usize,
    },
    #[error("unknown residual kind '{0}'")]
    UnknownKind(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResidualKind {
    Pivot,
    Accel,
    Mag,
    Reproj,
    Gyro,
}

impl ResidualKind {
    pub const ALL: [ResidualKind; 5] = [
        ResidualKind::Pivot,
        ResidualKind::Accel,
        ResidualKind::Mag,
        ResidualKind::Reproj,
        ResidualKind::Gyro,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualKind::Pivot => "pivot",
            ResidualKind::Accel => "accel",
            ResidualKind::Mag => "mag",
            ResidualKind::Reproj => "reproj",
            ResidualKind::Gyro => "gyro",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ResidualKind::Pivot | ResidualKind::Reproj => 2,
            _ => 3,
        }
    }

    /// SI unit of the residual.
    pub fn unit(self) -> &'static str {
        match self {
            ResidualKind::Pivot => "m",
            ResidualKind::Accel => "m/s^2",
            ResidualKind::Mag => "uT",
            ResidualKind::Reproj => "px",
            ResidualKind::Gyro => "rad",
        }
    }

    pub fn pose_count(self) -> usize {
        match self {
            ResidualKind::Reproj | ResidualKind::Gyro => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResidualKind {
    type Err = ResidualError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResidualKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ResidualError::UnknownKind(s.to_string()))
    }
}

/// A 3D point stored in the camera frame of the keyframe that triangulated it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub anchor: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub landmark: u64,
    pub keyframe: usize,
    pub lens: Lens,
    pub pixel: PixelPoint,
}

// ---------------------------------------------------------------------------
// residual functions

/// Off-axis translation `(t_y, t_z)` of `T · Trans(p)`, where `p` is the
/// pivot position in the world frame.
pub fn r_pivot(pose: &Transform, pivot: &Vec3) -> Vec2 {
    let t = pose.act(pivot);
    Vec2::new(t.y, t.z)
}

pub fn r_pivot_jacobian(pose: &Transform, pivot: &Vec3) -> Matrix2x6<f64> {
    let r = pose.rotation().matrix();
    let d_omega = -r * hat(pivot);
    let mut j = Matrix2x6::zeros();
    for row in 0..2 {
        for c in 0..3 {
            j[(row, c)] = d_omega[(row + 1, c)];
            j[(row, c + 3)] = r[(row + 1, c)];
        }
    }
    j
}

/// `m − R w`: a camera-frame measurement against a world reference vector.
fn r_direction(pose: &Transform, measured: &Vec3, world: &Vec3) -> Vec3 {
    measured - pose.rotation().matrix() * world
}

fn r_direction_jacobian(pose: &Transform, world: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(pose.rotation().matrix() * hat(world)));
    j
}

/// `ᶜg − R ᵀg`, with `ᶜg` in m/s².
pub fn r_accel(pose: &Transform, gravity_c: &Vec3, refs: &WorldReferences) -> Vec3 {
    r_direction(pose, gravity_c, refs.gravity())
}

pub fn r_accel_jacobian(pose: &Transform, refs: &WorldReferences) -> Matrix3x6<f64> {
    r_direction_jacobian(pose, refs.gravity())
}

/// `ᶜm − R ᵀm`, μT.
pub fn r_mag(pose: &Transform, mag_c: &Vec3, refs: &WorldReferences) -> Vec3 {
    r_direction(pose, mag_c, refs.magnetic())
}

pub fn r_mag_jacobian(pose: &Transform, refs: &WorldReferences) -> Matrix3x6<f64> {
    r_direction_jacobian(pose, refs.magnetic())
}

/// Anchored reprojection `Π(T_obs T_anchor⁻¹ x) − u`.
pub fn r_reproj(
    observer: &Transform,
    anchor: &Transform,
    point_in_anchor: &Vec3,
    pixel: &PixelPoint,
    rig: &StereoRig,
    lens: Lens,
) -> Result<Vec2, CameraError> {
    let x_world = anchor.inverse().act(point_in_anchor);
    let proj = rig.project(lens, &observer.act(&x_world))?;
    Ok(Vec2::new(proj.u - pixel.u, proj.v - pixel.v))
}

/// Residual plus Jacobians with respect to `(anchor, observer)`.
pub fn r_reproj_with_jacobians(
    observer: &Transform,
    anchor: &Transform,
    point_in_anchor: &Vec3,
    pixel: &PixelPoint,
    rig: &StereoRig,
    lens: Lens,
) -> Result<(Vec2, Matrix2x6<f64>, Matrix2x6<f64>), CameraError> {
    let x_world = anchor.inverse().act(point_in_anchor);
    let x_c = observer.act(&x_world);
    let (proj, dpx) = rig.project_with_jacobian(lens, &x_c)?;
    let r_obs = observer.rotation().matrix();
    let hx = hat(&x_world);

    let mut d_obs = Matrix3x6::zeros();
    d_obs.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_obs * hx));
    d_obs.fixed_view_mut::<3, 3>(0, 3).copy_from(r_obs);
    let mut d_anchor = Matrix3x6::zeros();
    d_anchor.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_obs * hx));
    d_anchor.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_obs));

    Ok((
        Vec2::new(proj.u - pixel.u, proj.v - pixel.v),
        dpx * d_anchor,
        dpx * d_obs,
    ))
}

/// `Log(R₂ R₁ᵀ ΔR)` on the `C ← T` rotations of two consecutive keyframes.
/// Zero when the `T ← C` orientations satisfy `Q₂ = Q₁ ΔR`.
pub fn r_gyro(first: &Transform, second: &Transform, delta: &Rotation) -> Vec3 {
    gyro_error(first, second, delta).log()
}

fn gyro_error(first: &Transform, second: &Transform, delta: &Rotation) -> Rotation {
    *second.rotation() * first.rotation().transpose() * *delta
}

/// Residual plus Jacobians with respect to `(first, second)`; the two are
/// negatives of each other.
pub fn r_gyro_with_jacobians(
    first: &Transform,
    second: &Transform,
    delta: &Rotation,
) -> (Vec3, Matrix3x6<f64>, Matrix3x6<f64>) {
    let r = gyro_error(first, second, delta).log();
    let a: Mat3 = delta.transpose().matrix() * first.rotation().matrix();
    let d2 = right_jacobian_inverse(&r) * a;
    let mut j2 = Matrix3x6::zeros();
    j2.fixed_view_mut::<3, 3>(0, 0).copy_from(&d2);
    (r, -j2, j2)
}

// ---------------------------------------------------------------------------
// robustification and weighting

/// `x²/2` for `x ≤ δ`, `δ(x − δ/2)` beyond.
pub fn huber(x: f64, delta: f64) -> f64 {
    if x <= delta {
        0.5 * x * x
    } else {
        delta * (x - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Robustifier {
    Identity,
    Huber(f64),
}

impl Robustifier {
    /// `ρ(x)` of a (scaled) residual norm.
    pub fn cost(&self, x: f64) -> f64 {
        match *self {
            Robustifier::Identity => 0.5 * x * x,
            Robustifier::Huber(d) => huber(x, d),
        }
    }

    /// `ρ'(x)/x`, the iteratively-reweighted least-squares weight.
    pub fn weight(&self, x: f64) -> f64 {
        match *self {
            Robustifier::Identity => 1.0,
            Robustifier::Huber(d) => {
                if x <= d {
                    1.0
                } else {
                    d / x
                }
            }
        }
    }
}

/// Default threshold on the variance-normalized residual norm.
pub const DEFAULT_HUBER_DELTA: f64 = 1.345;

/// `α = β / (N √Var)`.
pub fn scale_factor(variance: f64, count: usize, beta: f64) -> Result<f64, ResidualError> {
    if count == 0 {
        return Err(ResidualError::EmptyCount);
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(ResidualError::ZeroVariance(variance));
    }
    Ok(beta / (count as f64 * variance.sqrt()))
}

/// Per-kind `β`: `γ` for gyro, `1 − γ` for reprojection, 1 otherwise.
pub fn beta(kind: ResidualKind, gamma: f64) -> f64 {
    match kind {
        ResidualKind::Gyro => gamma,
        ResidualKind::Reproj => 1.0 - gamma,
        _ => 1.0,
    }
}

/// Robustifier of each kind. The Huber threshold `δ` is stated on the
/// variance-normalized norm `‖r‖/√Var`; on the scaled norm `‖α r‖` it becomes
/// `δ α √Var`.
pub fn robustifier_for(kind: ResidualKind, delta: f64, alpha: f64, variance: f64) -> Robustifier {
    match kind {
        ResidualKind::Reproj => Robustifier::Huber(delta * alpha * variance.sqrt()),
        _ => Robustifier::Identity,
    }
}

// ---------------------------------------------------------------------------
// blocks

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    /// Pivot position in the world frame.
    Pivot(Vec3),
    /// Gravity seen in the camera frame, m/s².
    Accel(Vec3),
    /// Magnetic field in the camera frame, μT.
    Mag(Vec3),
    Reproj {
        landmark: u64,
        point_in_anchor: Vec3,
        pixel: PixelPoint,
        lens: Lens,
    },
    Gyro(Rotation),
}

impl Measurement {
    pub fn kind(&self) -> ResidualKind {
        match self {
            Measurement::Pivot(_) => ResidualKind::Pivot,
            Measurement::Accel(_) => ResidualKind::Accel,
            Measurement::Mag(_) => ResidualKind::Mag,
            Measurement::Reproj { .. } => ResidualKind::Reproj,
            Measurement::Gyro(_) => ResidualKind::Gyro,
        }
    }
}

/// One weighted, robustified residual term. `poses` holds keyframe ids:
/// `[kf]` for unary kinds, `[anchor, observer]` for reprojection and
/// `[previous, current]` for gyro.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub poses: Vec<usize>,
    pub measurement: Measurement,
    pub scale: f64,
    pub robustifier: Robustifier,
}

/// Padded residual (`dim` ≤ 3 active rows) with Jacobians per referenced pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockEvaluation {
    pub dim: usize,
    pub residual: Vec3,
    pub jacobians: [Matrix3x6<f64>; 2],
}

/// Shared inputs for block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ResidualContext<'a> {
    pub rig: &'a StereoRig,
    pub refs: &'a WorldReferences,
}

fn pad2(v: Vec2) -> Vec3 {
    Vec3::new(v.x, v.y, 0.0)
}

fn pad2x6(m: Matrix2x6<f64>) -> Matrix3x6<f64> {
    let mut out = Matrix3x6::zeros();
    out.fixed_view_mut::<2, 6>(0, 0).copy_from(&m);
    out
}

impl ResidualBlock {
    pub fn new(
        poses: Vec<usize>,
        measurement: Measurement,
        scale: f64,
        robustifier: Robustifier,
    ) -> Result<Self, ResidualError> {
        let kind = measurement.kind();
        if poses.len() != kind.pose_count() {
            return Err(ResidualError::PoseCount {
                kind,
                expected: kind.pose_count(),
                got: poses.len(),
            });
        }
        Ok(Self {
            poses,
            measurement,
            scale,
            robustifier,
        })
    }

    pub fn kind(&self) -> ResidualKind {
        self.measurement.kind()
    }

    /// Unscaled residual in natural units. `poses` follows `self.poses`.
    pub fn residual(&self, poses: &[&Transform], ctx: &ResidualContext) -> Result<Vec3, ResidualError> {
        Ok(match self.measurement {
            Measurement::Pivot(p) => pad2(r_pivot(poses[0], &p)),
            Measurement::Accel(g) => r_accel(poses[0], &g, ctx.refs),
            Measurement::Mag(m) => r_mag(poses[0], &m, ctx.refs),
            Measurement::Reproj {
                point_in_anchor,
                pixel,
                lens,
                ..
            } => pad2(r_reproj(poses[1], poses[0], &point_in_anchor, &pixel, ctx.rig, lens)?),
            Measurement::Gyro(delta) => r_gyro(poses[0], poses[1], &delta),
        })
    }

    /// Unscaled residual and Jacobians.
    pub fn evaluate(
        &self,
        poses: &[&Transform],
        ctx: &ResidualContext,
    ) -> Result<BlockEvaluation, ResidualError> {
        let zero = Matrix3x6::zeros();
        let (residual, jacobians) = match self.measurement {
            Measurement::Pivot(p) => (
                pad2(r_pivot(poses[0], &p)),
                [pad2x6(r_pivot_jacobian(poses[0], &p)), zero],
            ),
            Measurement::Accel(g) => (
                r_accel(poses[0], &g, ctx.refs),
                [r_accel_jacobian(poses[0], ctx.refs), zero],
            ),
            Measurement::Mag(m) => (
                r_mag(poses[0], &m, ctx.refs),
                [r_mag_jacobian(poses[0], ctx.refs), zero],
            ),
            Measurement::Reproj {
                point_in_anchor,
                pixel,
                lens,
                ..
            } => {
                let (r, ja, jo) = r_reproj_with_jacobians(
                    poses[1],
                    poses[0],
                    &point_in_anchor,
                    &pixel,
                    ctx.rig,
                    lens,
                )?;
                (pad2(r), [pad2x6(ja), pad2x6(jo)])
            }
            Measurement::Gyro(delta) => {
                let (r, j1, j2) = r_gyro_with_jacobians(poses[0], poses[1], &delta);
                (r, [j1, j2])
            }
        };
        Ok(BlockEvaluation {
            dim: self.kind().dim(),
            residual,
            jacobians,
        })
    }

    /// `ρ(‖α r‖)`.
    pub fn cost(&self, poses: &[&Transform], ctx: &ResidualContext) -> Result<f64, ResidualError> {
        let r = self.residual(poses, ctx)?;
        Ok(self.robustifier.cost(self.scale * r.norm()))
    }
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindStatistics {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

/// Per-kind expectation and variance pooled over all scalar residual
/// components, in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStatistics {
    kinds: [KindStatistics; 5],
}

impl ResidualStatistics {
    pub fn new(kinds: [KindStatistics; 5]) -> Self {
        Self { kinds }
    }

    /// Reference statistics of the original recording converted to SI:
    /// pivot cm → m (variance cm² → m²), accel g → m/s².
    pub fn reference() -> Self {
        let g = crate::sensors::GRAVITY;
        let stat = |mean: f64, variance: f64| KindStatistics {
            mean,
            variance,
            count: 0,
        };
        Self::new([
            stat(0.0511e-2, 0.4374e-4),
            stat(0.0235 * g, 0.0405 * g * g),
            stat(-0.2730, 4.2801),
            stat(1.6263, 9.3767),
            stat(0.0003, 0.0051),
        ])
    }

    pub fn get(&self, kind: ResidualKind) -> &KindStatistics {
        &self.kinds[kind.index()]
    }

    pub fn set(&mut self, kind: ResidualKind, stats: KindStatistics) {
        self.kinds[kind.index()] = stats;
    }

    pub fn validate(&self) -> Result<(), ResidualError> {
        for kind in ResidualKind::ALL {
            let v = self.get(kind).variance;
            if !(v > 0.0) || !v.is_finite() {
                return Err(ResidualError::DegenerateStatistic { kind, variance: v });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,E,Var,N,unit\n");
        for kind in ResidualKind::ALL {
            let s = self.get(kind);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                kind.name(),
                s.mean,
                s.variance,
                s.count,
                kind.unit()
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, ResidualError> {
        let mut out = Self::reference();
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        if header != "kind,E,Var,N,unit" {
            return Err(DataError::Header {
                expected: "kind,E,Var,N,unit".into(),
                found: header.into(),
            }
            .into());
        }
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(DataError::Columns {
                    row: i + 1,
                    expected: 5,
                    found: cells.len(),
                }
                .into());
            }
            let kind: ResidualKind = cells[0].parse()?;
            let num = |c: usize, name: &str| {
                cells[c].parse::<f64>().map_err(|_| DataError::Number {
                    row: i + 1,
                    column: c + 1,
                    name: name.into(),
                    text: cells[c].into(),
                })
            };
            let mean = num(1, "E")?;
            let variance = num(2, "Var")?;
            let count = num(3, "N")? as usize;
            out.set(kind, KindStatistics { mean, variance, count });
        }
        Ok(out)
    }

    pub fn read(path: &std::path::Path) -> Result<Self, ResidualError> {
        Self::parse_csv(&io::read_text(path)?)
    }
}

/// Streaming per-kind mean/variance (Welford) over scalar components.
#[derive(Debug, Clone, Default)]
pub struct StatisticsAccumulator {
    n: [usize; 5],
    mean: [f64; 5],
    m2: [f64; 5],
}

impl StatisticsAccumulator {
    pub fn push(&mut self, kind: ResidualKind, components: &[f64]) {
        let k = kind.index();
        for &x in components {
            self.n[k] += 1;
            let d = x - self.mean[k];
            self.mean[k] += d / self.n[k] as f64;
            self.m2[k] += d * (x - self.mean[k]);
        }
    }

    pub fn merge(&mut self, other: &StatisticsAccumulator) {
        for k in 0..5 {
            let (na, nb) = (self.n[k] as f64, other.n[k] as f64);
            if nb == 0.0 {
                continue;
            }
            let n = na + nb;
            let d = other.mean[k] - self.mean[k];
            self.mean[k] += d * nb / n;
            self.m2[k] += other.m2[k] + d * d * na * nb / n;
            self.n[k] += other.n[k];
        }
    }

    pub fn count(&self, kind: ResidualKind) -> usize {
        self.n[kind.index()]
    }

    /// Population variance per kind; kinds without samples report zeros.
    pub fn finish(&self) -> ResidualStatistics {
        let mut kinds = [KindStatistics {
            mean: 0.0,
            variance: 0.0,
            count: 0,
        }; 5];
        for (k, s) in kinds.iter_mut().enumerate() {
            if self.n[k] > 0 {
                *s = KindStatistics {
                    mean: self.mean[k],
                    variance: self.m2[k] / self.n[k] as f64,
                    count: self.n[k],
                };
            }
        }
        ResidualStatistics::new(kinds)
    }
}
