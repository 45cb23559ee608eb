//! Pinhole cameras, rigid transforms, rotation parameterizations and ray
//! encodings.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`. Pixel coordinates
//! use the pixel-center convention, so integer `(u, v)` is the center of
//! pixel `(u, v)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

    /// Intrinsics for a square-pixel camera with the principal point at the
    /// image center and the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the same camera resampled by an integer factor, keeping
    /// the pixel-center convention consistent.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Camera-frame direction with unit z through the given pixel.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Lift a pixel to a camera-frame point at the given z-depth.
pub fn backproject(pixel: &Vector2<f64>, depth: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidInput(format!("non-positive depth {depth}")));
    }
    Ok(intr.ray(pixel.x, pixel.y) * depth)
}

/// Project a camera-frame point. The pixel may fall outside the image.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<(Vector2<f64>, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    let pixel = Vector2::new(
        intr.fx * point.x / point.z + intr.cx,
        intr.fy * point.y / point.z + intr.cy,
    );
    Ok((pixel, point.z))
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Build a pose from an arbitrary 3x3 by explicit SVD projection onto SO(3).
    pub fn from_projected(m: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let r = project_to_so3(m)?;
        Self::new(r, translation)
    }

    /// Internal constructor for products of valid rotations.
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(check_rotation(&rotation).is_ok(), "rotation left SO(3): {rotation}");
        Self {
            rotation,
            translation,
        }
    }

    /// Pose whose camera sits at `center` and looks at `target`, with image
    /// "down" (+y) as close as possible to `down`.
    pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>) -> Result<Self> {
        let z = target - center;
        let zn = z.norm();
        if zn < 1e-12 {
            return Err(Error::InvalidInput("look_at target equals center".into()));
        }
        let z = z / zn;
        let x = down.cross(&z);
        let xn = x.norm();
        if xn < 1e-12 {
            return Err(Error::InvalidInput("look_at down vector parallel to view".into()));
        }
        let x = x / xn;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * center);
        Self::new(r, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::from_parts(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Max absolute entry difference of rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// Transform taking camera-`i` coordinates to camera-`j` coordinates.
pub fn relative_pose(i: &Pose, j: &Pose) -> Pose {
    j.compose(&i.inverse())
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite rotation".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!(
            "matrix is not a rotation (|R^T R - I| = {ortho:e}, det = {det})"
        )));
    }
    Ok(())
}

/// Closest rotation in Frobenius norm.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NumericalRank("SVD failed".into())),
    };
    let d = (u * vt).determinant().signum();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(u * s * vt)
}

/// Rotation about a unit axis by an angle in radians (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = k.cross_matrix();
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Six-parameter rotation: the two (not yet orthonormalized) leading columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (Vector3::new(r[0], r[1], r[2]), Vector3::new(r[3], r[4], r[5]))
    }
}

/// Gram-Schmidt decode of a 6D rotation.
pub fn rot6d_decode(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let (a1, a2) = r.columns();
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 > 0.0) || !(n2 > 0.0) || !n1.is_finite() || !n2.is_finite() {
        return Err(Error::DegenerateRotation("zero or non-finite column".into()));
    }
    if a1.cross(&a2).norm() <= 1e-12 * n1 * n2 {
        return Err(Error::DegenerateRotation("columns are parallel".into()));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn rot6d_encode(r: &Matrix3<f64>) -> Rotation6D {
    Rotation6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Pull a gradient with respect to the decoded matrix back to the six
/// parameters (vector-Jacobian product through Gram-Schmidt).
pub fn rot6d_decode_vjp(r: &Rotation6D, grad: &Matrix3<f64>) -> Result<[f64; 6]> {
    let (a1, a2) = r.columns();
    let rot = rot6d_decode(r)?;
    let b1: Vector3<f64> = rot.column(0).into();
    let b2: Vector3<f64> = rot.column(1).into();
    let g1: Vector3<f64> = grad.column(0).into();
    let g2: Vector3<f64> = grad.column(1).into();
    let g3: Vector3<f64> = grad.column(2).into();

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    // b2 = u2 / |u2|, u2 = a2 - (b1.a2) b1
    let u2 = a2 - b1 * b1.dot(&a2);
    let nu2 = u2.norm();
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / nu2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(&a2) + a2 * b1.dot(&gu2);

    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / a1.norm();
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Per-pixel Plücker rays `(d, o x d)` in world coordinates.
#[derive(Clone, Debug)]
pub struct PluckerRayField {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<[f64; 6]>,
}

impl PluckerRayField {
    pub fn at(&self, u: usize, v: usize) -> &[f64; 6] {
        &self.rays[v * self.width + u]
    }
}

pub fn plucker_field(pose: &Pose, intr: &CameraIntrinsics) -> PluckerRayField {
    let rt = pose.rotation().transpose();
    let o = pose.center();
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = (rt * intr.ray(u as f64, v as f64)).normalize();
            let m = o.cross(&d);
            rays.push([d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    PluckerRayField {
        width: intr.width,
        height: intr.height,
        rays,
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_geodesic_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    // atan2 stays accurate near 0 and π where acos of the trace does not
    let m = ra.transpose() * rb;
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    s.atan2(m.trace() - 1.0).to_degrees()
}

/// Angle between two translation directions, in degrees.
pub fn translation_angle_deg(ta: &Vector3<f64>, tb: &Vector3<f64>) -> Result<f64> {
    let na = ta.norm();
    let nb = tb.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    Ok(ta.cross(tb).norm().atan2(ta.dot(tb)).to_degrees())
}
