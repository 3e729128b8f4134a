//! Pinhole camera model, depth backprojection and rigid transforms.
//!
//! Pixel coordinates are `(u, v)` = (column, row) with the origin at the top-left
//! pixel and integer coordinates at pixel centers. Depth is always meters; `0`
//! marks an invalid measurement.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;
const DRIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidValue(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Direction of the ray through `(u, v)`, scaled so that its z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// One registered RGB-D observation of the target object.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Vec<[u8; 3]>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub intrinsics: CameraIntrinsics,
}

impl Frame {
    pub fn new(rgb: Vec<[u8; 3]>, depth: Vec<f64>, mask: Vec<bool>, intrinsics: CameraIntrinsics) -> Result<Self> {
        let frame = Self {
            rgb,
            depth,
            mask,
            intrinsics,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.intrinsics.pixel_count();
        if self.rgb.len() != n || self.depth.len() != n || self.mask.len() != n {
            return Err(Error::InvalidValue(format!(
                "raster sizes rgb={} depth={} mask={} do not match {}x{}",
                self.rgb.len(),
                self.depth.len(),
                self.mask.len(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        if let Some(i) = self.depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidValue(format!(
                "depth at pixel index {i} is {} (must be finite and >= 0)",
                self.depth[i]
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Number of pixels that would be backprojected.
    pub fn valid_pixel_count(&self) -> usize {
        self.mask.iter().zip(&self.depth).filter(|(m, d)| **m && **d > 0.0).count()
    }
}

/// A backprojected pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPixel {
    pub u: usize,
    pub v: usize,
    pub point: Vec3,
}

/// Lift every masked pixel with positive depth to a camera-frame 3D point,
/// in row-major pixel order.
pub fn backproject(frame: &Frame) -> Vec<BackprojectedPixel> {
    let k = &frame.intrinsics;
    let mut out = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            let idx = v * k.width + u;
            let d = frame.depth[idx];
            if frame.mask[idx] && d > 0.0 {
                out.push(BackprojectedPixel {
                    u,
                    v,
                    point: k.unproject(u as f64, v as f64, d),
                });
            }
        }
    }
    out
}

/// For each backprojected pixel (same order as [`backproject`]), whether it
/// lies on a depth boundary: a 4-neighbour is outside the image, unmasked,
/// without depth, or differs in depth by more than `depth_jump`.
pub fn boundary_flags(frame: &Frame, depth_jump: f64) -> Vec<bool> {
    let (w, h) = (frame.width(), frame.height());
    let valid = |idx: usize| frame.mask[idx] && frame.depth[idx] > 0.0;
    backproject(frame)
        .iter()
        .map(|p| {
            let d = frame.depth[p.v * w + p.u];
            let neighbours = [
                (p.u > 0).then(|| p.v * w + p.u - 1),
                (p.u + 1 < w).then(|| p.v * w + p.u + 1),
                (p.v > 0).then(|| (p.v - 1) * w + p.u),
                (p.v + 1 < h).then(|| (p.v + 1) * w + p.u),
            ];
            neighbours
                .iter()
                .any(|n| n.is_none_or(|i| !valid(i) || (frame.depth[i] - d).abs() > depth_jump))
        })
        .collect()
}

/// Rotation plus translation, `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checked constructor; rejects matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("transform has non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidValue(format!(
                "rotation is not in SO(3): |RᵀR - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::new(x, y, z),
        }
    }

    /// Rotation by `angle_deg` degrees about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle_deg: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = angle_deg.to_radians().sin_cos();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        let rotation = Matrix3::identity() + k * s + k * k * (1.0 - c);
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    pub fn rot_x(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), deg)
    }

    pub fn rot_y(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), deg)
    }

    pub fn rot_z(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg)
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if drift > DRIFT_TOL {
            rotation = nearest_rotation(&rotation);
        }
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 3x3 rotation followed by the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::InvalidValue(format!("pose needs 12 numbers, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(&v[..9]), Vec3::new(v[9], v[10], v[11]))
    }
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t
}

pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Geodesic angle in degrees between the rotations of `a` and `b`.
///
/// Equal to `acos((tr(R_aᵀ R_b) - 1) / 2)`, evaluated through `atan2` of the
/// skew and trace parts so that small angles keep full precision.
pub fn rotation_angle_deg(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let r = a.rotation.transpose() * b.rotation;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Euclidean distance between the translations of two transforms.
pub fn translation_error(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.translation - b.translation).norm()
}
