//! Stereo laparoscope camera model: pinhole projection with two-term radial
//! distortion on normalized coordinates, stereo extrinsics, triangulation and
//! the epipolar consistency test used to filter stereo matches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3x2};
use thiserror::Error;

use crate::geometry::{hat, Frame, GeometryError, Mat3, Transform, Vec2, Vec3};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point is behind the lens (z = {0:.3e})")]
    BehindCamera(f64),
    #[error("radial undistortion did not converge for pixel ({u:.3}, {v:.3})")]
    UndistortDiverged { u: f64, v: f64 },
    #[error("rays are nearly parallel ({angle_deg:.4} deg)")]
    DegenerateGeometry { angle_deg: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("calibration: missing key '{key}' ({param} of {lens})")]
    MissingKey {
        key: &'static str,
        param: &'static str,
        lens: &'static str,
    },
    #[error("calibration: row {row}, column {column}: cannot parse '{text}' as a number")]
    BadNumber {
        row: usize,
        column: usize,
        text: String,
    },
    #[error("calibration: row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("calibration: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Image coordinates in pixels (distorted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vec(self) -> Vec2 {
        Vec2::new(self.u, self.v)
    }

    pub fn from_vec(v: Vec2) -> Self {
        Self::new(v.x, v.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lens {
    Left = 0,
    Right = 1,
}

impl Lens {
    pub const BOTH: [Lens; 2] = [Lens::Left, Lens::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Lens> {
        match i {
            0 => Some(Lens::Left),
            1 => Some(Lens::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub width: u32,
    pub height: u32,
}

const UNDISTORT_MAX_ITERS: usize = 20;

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0
            && self.cx <= self.width as f64
            && self.cy >= 0.0
            && self.cy <= self.height as f64)
        {
            return Err(CameraError::InvalidIntrinsics(format!(
                "optical center ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    fn radial(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Normalized undistorted → normalized distorted coordinates.
    pub fn distort(&self, xn: &Vec2) -> Vec2 {
        xn * self.radial(xn.norm_squared())
    }

    /// Inverse of [`distort`](Self::distort), by Newton iteration on the radius.
    pub fn undistort(&self, xd: &Vec2) -> Option<Vec2> {
        let rd = xd.norm();
        if rd == 0.0 {
            return Some(Vec2::zeros());
        }
        if self.k1 == 0.0 && self.k2 == 0.0 {
            return Some(*xd);
        }
        let mut r = rd;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let r2 = r * r;
            let f = r * self.radial(r2) - rd;
            let df = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2;
            if df <= 0.0 {
                return None;
            }
            let step = f / df;
            r -= step;
            if step.abs() <= 1e-15 * r.max(1.0) {
                return (r > 0.0).then(|| xd * (r / rd));
            }
        }
        None
    }

    pub fn is_inside(&self, p: &PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }

    pub fn project(&self, x: &Vec3) -> Result<PixelPoint, CameraError> {
        if x.z <= 0.0 {
            return Err(CameraError::BehindCamera(x.z));
        }
        let d = self.distort(&Vec2::new(x.x / x.z, x.y / x.z));
        Ok(PixelPoint::new(
            self.fx * d.x + self.cx,
            self.fy * d.y + self.cy,
        ))
    }

    /// Projection plus its derivative with respect to the lens-frame point.
    pub fn project_with_jacobian(
        &self,
        x: &Vec3,
    ) -> Result<(PixelPoint, Matrix2x3<f64>), CameraError> {
        if x.z <= 0.0 {
            return Err(CameraError::BehindCamera(x.z));
        }
        let iz = 1.0 / x.z;
        let xn = Vec2::new(x.x * iz, x.y * iz);
        let r2 = xn.norm_squared();
        let s = self.radial(r2);
        let ds = 2.0 * (self.k1 + 2.0 * self.k2 * r2);
        // d(xd)/d(xn) = s I + ds xn xnᵀ
        let dxd = Matrix2::identity() * s + xn * xn.transpose() * ds;
        let dxn = Matrix2x3::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz);
        let focal = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let xd = xn * s;
        Ok((
            PixelPoint::new(self.fx * xd.x + self.cx, self.fy * xd.y + self.cy),
            focal * dxd * dxn,
        ))
    }

    /// Unit bearing in the lens frame.
    pub fn unproject(&self, p: &PixelPoint) -> Result<Vec3, CameraError> {
        let xd = Vec2::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy);
        let xn = self
            .undistort(&xd)
            .ok_or(CameraError::UndistortDiverged { u: p.u, v: p.v })?;
        Ok(Vec3::new(xn.x, xn.y, 1.0).normalize())
    }
}

/// Two lenses behind one laparoscope body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    /// Right lens into left lens, `C0 ← C1`.
    pub extrinsic: Transform,
    /// Left lens into the body frame, `C ← C0`.
    pub mount: Transform,
}

impl StereoRig {
    pub fn new(
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        extrinsic: Transform,
        mount: Transform,
    ) -> Result<Self, CameraError> {
        left.validate()?;
        right.validate()?;
        if extrinsic.translation().norm() <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(
                "stereo baseline must be non-zero".into(),
            ));
        }
        Ok(Self {
            left,
            right,
            extrinsic: extrinsic.with_frames(Frame::Lens0, Frame::Lens1),
            mount: mount.with_frames(Frame::Camera, Frame::Lens0),
        })
    }

    pub fn intrinsics(&self, lens: Lens) -> &CameraIntrinsics {
        match lens {
            Lens::Left => &self.left,
            Lens::Right => &self.right,
        }
    }

    pub fn baseline(&self) -> f64 {
        self.extrinsic.translation().norm()
    }

    /// `lens ← C`.
    pub fn lens_from_camera(&self, lens: Lens) -> Transform {
        match lens {
            Lens::Left => self.mount.inverse(),
            Lens::Right => self.extrinsic.inverse() * self.mount.inverse(),
        }
    }

    /// Projects a point given in the body frame `C` into one lens.
    pub fn project(&self, lens: Lens, x_c: &Vec3) -> Result<PixelPoint, CameraError> {
        self.intrinsics(lens)
            .project(&self.lens_from_camera(lens).act(x_c))
    }

    /// Projection and its derivative with respect to the body-frame point.
    pub fn project_with_jacobian(
        &self,
        lens: Lens,
        x_c: &Vec3,
    ) -> Result<(PixelPoint, Matrix2x3<f64>), CameraError> {
        let to_lens = self.lens_from_camera(lens);
        let (px, j) = self
            .intrinsics(lens)
            .project_with_jacobian(&to_lens.act(x_c))?;
        Ok((px, j * to_lens.rotation().matrix()))
    }

    /// `hat(t/‖t‖) R` from the `C0 ← C1` extrinsic. The unit-length baseline
    /// makes epipolar values comparable across rigs.
    pub fn essential(&self) -> Mat3 {
        let t = self.extrinsic.translation();
        hat(&(t / t.norm())) * self.extrinsic.rotation().matrix()
    }
}

/// `x0ᵀ E x1` for unit bearings in `C0` and `C1`.
pub fn epipolar_error(x0: &Vec3, x1: &Vec3, rig: &StereoRig) -> f64 {
    (x0.transpose() * rig.essential() * x1)[(0, 0)]
}

/// Minimum angle between the two rays accepted by [`triangulate`].
pub const MIN_TRIANGULATION_ANGLE_DEG: f64 = 0.1;

/// Triangulates from unit bearings; returns the point in `C0`.
///
/// Solves the two ray equations `λ0 b0 = t + λ1 R b1` for the ray depths in the
/// least-squares sense and returns the midpoint of the closest points.
pub fn triangulate_bearings(b0: &Vec3, b1: &Vec3, rig: &StereoRig) -> Result<Vec3, CameraError> {
    let r = rig.extrinsic.rotation().matrix();
    let t = rig.extrinsic.translation();
    let rb1 = r * b1;
    let angle = b0.cross(&rb1).norm().atan2(b0.dot(&rb1));
    if angle.to_degrees() < MIN_TRIANGULATION_ANGLE_DEG {
        return Err(CameraError::DegenerateGeometry {
            angle_deg: angle.to_degrees(),
        });
    }
    let a = Matrix3x2::from_columns(&[*b0, -rb1]);
    let ata = a.transpose() * a;
    let atb = a.transpose() * t;
    let lambda = ata
        .try_inverse()
        .map(|inv| inv * atb)
        .ok_or(CameraError::DegenerateGeometry {
            angle_deg: angle.to_degrees(),
        })?;
    let p0 = b0 * lambda.x;
    let p1 = t + rb1 * lambda.y;
    Ok((p0 + p1) * 0.5)
}

/// Triangulates a stereo pixel pair; returns the point in `C0`.
pub fn triangulate(
    u0: &PixelPoint,
    u1: &PixelPoint,
    rig: &StereoRig,
) -> Result<Vec3, CameraError> {
    let b0 = rig.left.unproject(u0)?;
    let b1 = rig.right.unproject(u1)?;
    triangulate_bearings(&b0, &b1, rig)
}

const LENS_KEYS: [[(&str, &str); 6]; 2] = [
    [
        ("fx0", "f_x"),
        ("fy0", "f_y"),
        ("cx0", "c_x"),
        ("cy0", "c_y"),
        ("k1_0", "k_1"),
        ("k2_0", "k_2"),
    ],
    [
        ("fx1", "f_x"),
        ("fy1", "f_y"),
        ("cx1", "c_x"),
        ("cy1", "c_y"),
        ("k1_1", "k_1"),
        ("k2_1", "k_2"),
    ],
];

const LENS_NAMES: [&str; 2] = ["lens 0", "lens 1"];

const HEADER: [&str; 2] = ["key", "value"];

/// Parses the key/value calibration CSV.
///
/// Layout: a `key,value` header, then one row per parameter. Scalar rows hold
/// one value; `T_C0C1` and `T_CC0` hold the 12 row-major entries of `[R | t]`.
/// `width` and `height` apply to both lenses. Lines starting with `#` are
/// ignored.
pub fn parse_calibration(text: &str) -> Result<StereoRig, CameraError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    let mut saw_header = false;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !saw_header {
            if record.len() < 2 || record[0] != *HEADER[0] || record[1] != *HEADER[1] {
                return Err(CameraError::BadRow {
                    row,
                    message: "expected header 'key,value'".into(),
                });
            }
            saw_header = true;
            continue;
        }
        let key = record[0].to_string();
        let nums = record
            .iter()
            .enumerate()
            .skip(1)
            .map(|(column, text)| {
                text.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CameraError::BadNumber {
                        row,
                        column: column + 1,
                        text: text.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let expected = if key.starts_with("T_") { 12 } else { 1 };
        if nums.len() != expected {
            return Err(CameraError::BadRow {
                row,
                message: format!("'{key}' needs {expected} value(s), found {}", nums.len()),
            });
        }
        if values.insert(key.clone(), nums).is_some() {
            return Err(CameraError::BadRow {
                row,
                message: format!("duplicate key '{key}'"),
            });
        }
    }
    if !saw_header {
        return Err(CameraError::BadRow {
            row: 1,
            message: "expected header 'key,value'".into(),
        });
    }

    let scalar = |key: &'static str, param: &'static str, lens: &'static str| {
        values
            .get(key)
            .map(|v| v[0])
            .ok_or(CameraError::MissingKey { key, param, lens })
    };
    let width = scalar("width", "image width", "both lenses")?;
    let height = scalar("height", "image height", "both lenses")?;
    let mut lenses = Vec::with_capacity(2);
    for (keys, lens) in LENS_KEYS.iter().zip(LENS_NAMES) {
        let get = |i: usize| scalar(keys[i].0, keys[i].1, lens);
        lenses.push(CameraIntrinsics {
            fx: get(0)?,
            fy: get(1)?,
            cx: get(2)?,
            cy: get(3)?,
            k1: get(4)?,
            k2: get(5)?,
            width: width as u32,
            height: height as u32,
        });
    }
    let transform = |key: &'static str, param: &'static str| {
        values
            .get(key)
            .ok_or(CameraError::MissingKey {
                key,
                param,
                lens: "rig",
            })
            .and_then(|v| Ok(Transform::from_row_major(v)?))
    };
    let extrinsic = transform("T_C0C1", "stereo extrinsic")?;
    let mount = transform("T_CC0", "lens mount")?;
    StereoRig::new(lenses[0], lenses[1], extrinsic, mount)
}

pub fn read_calibration(path: &Path) -> Result<StereoRig, CameraError> {
    let text = std::fs::read_to_string(path).map_err(|source| CameraError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_calibration(&text)
}

/// Inverse of [`parse_calibration`]; floats are written in shortest
/// round-trip form so parsing reproduces the rig bit for bit.
pub fn format_calibration(rig: &StereoRig) -> String {
    let mut out = String::from("key,value\n");
    let _ = writeln!(out, "width,{}", rig.left.width);
    let _ = writeln!(out, "height,{}", rig.left.height);
    for (keys, cam) in LENS_KEYS.iter().zip([&rig.left, &rig.right]) {
        let vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.k1, cam.k2];
        for ((key, _), v) in keys.iter().zip(vals) {
            let _ = writeln!(out, "{key},{v}");
        }
    }
    for (key, t) in [("T_C0C1", &rig.extrinsic), ("T_CC0", &rig.mount)] {
        out.push_str(key);
        for v in t.to_row_major() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
