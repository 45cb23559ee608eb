//! Pixel-aligned Gaussians: one primitive per valid depth pixel.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::confvol::ConfidenceMap;
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::io::depth::DepthMap;
use crate::io::image::ImageRgb;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    /// World-frame center.
    pub center: Vector3<f64>,
    /// In `[0, 1)`.
    pub opacity: f64,
    /// World-frame covariance, symmetric positive definite.
    pub covariance: Matrix3<f64>,
    /// Degree-0 colour in `[0, 1]^3`.
    pub color: [f64; 3],
    pub view: u32,
    pub pixel: [u32; 2],
}

impl Gaussian {
    /// Symmetry, positive definiteness (Cholesky), opacity and colour ranges.
    pub fn check(&self) -> Result<()> {
        let c = &self.covariance;
        let asym = (c - c.transpose()).abs().max();
        if asym > 1e-12 * c.abs().max().max(1e-300) || c.cholesky().is_none() {
            return Err(Error::Validation(format!("covariance is not SPD: {c}")));
        }
        if !(0.0..1.0).contains(&self.opacity) {
            return Err(Error::Validation(format!("opacity {} outside [0, 1)", self.opacity)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) || !self.center.iter().all(|x| x.is_finite()) {
            return Err(Error::Validation("colour outside [0, 1] or non-finite center".into()));
        }
        Ok(())
    }
}

/// Flat list of Gaussians with per-view counts and a bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub view_counts: Vec<usize>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl GaussianScene {
    /// Scene from a flat list attributed to a single pseudo-view.
    pub fn from_gaussians(gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        let (lo, hi) = bounding_box(&gaussians);
        Self {
            gaussians,
            view_counts: vec![n],
            bbox_min: lo,
            bbox_max: hi,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_counts.iter().sum::<usize>() != self.gaussians.len() {
            return Err(Error::Validation("view counts do not sum to the gaussian count".into()));
        }
        for g in &self.gaussians {
            g.check()?;
            let inside = (0..3).all(|k| g.center[k] >= self.bbox_min[k] && g.center[k] <= self.bbox_max[k]);
            if !inside {
                return Err(Error::Validation("bounding box does not contain every center".into()));
            }
        }
        Ok(())
    }
}

fn bounding_box(gs: &[Gaussian]) -> (Vector3<f64>, Vector3<f64>) {
    if gs.is_empty() {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for g in gs {
        lo = lo.inf(&g.center);
        hi = hi.sup(&g.center);
    }
    (lo, hi)
}

/// Deterministic mapping from confidence and depth to Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianParams {
    /// Opacity at full confidence.
    pub sigma_max: f64,
    /// Keeps opacity strictly below one.
    pub opacity_eps: f64,
    /// Footprint standard deviation in pixels.
    pub pixel_radius: f64,
    /// Depth-axis std as a multiple of the in-plane std.
    pub k_z: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self {
            sigma_max: 0.95,
            opacity_eps: 1e-4,
            pixel_radius: 1.0,
            k_z: 1.0,
        }
    }
}

/// One Gaussian per valid depth pixel: centered on the back-projected pixel,
/// opacity affine in confidence, covariance a disc one pixel footprint wide
/// in the camera frame.
pub fn build_view_gaussians(
    view: u32,
    image: &ImageRgb,
    depth: &DepthMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    conf: &ConfidenceMap,
    params: &GaussianParams,
) -> Result<Vec<Gaussian>> {
    let (w, h) = (intr.width, intr.height);
    if (image.width, image.height) != (w, h) || (depth.width, depth.height) != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{}, depth {}x{}, camera {w}x{h}",
            image.width, image.height, depth.width, depth.height
        )));
    }
    let r = pose.rotation();
    let rt = r.transpose();
    let c = pose.center();
    let mut out = Vec::with_capacity(depth.valid_count());
    for v in 0..h {
        for u in 0..w {
            let Some(z) = depth.get(u, v) else { continue };
            let x_cam = intr.ray(u as f64, v as f64) * z;
            let center = rt * x_cam + c;
            let s_geo = conf.sample_pixel(u as f64, v as f64, w, h);
            let opacity = (params.sigma_max * s_geo).clamp(0.0, 1.0 - params.opacity_eps);
            let s_xy = params.pixel_radius * z / intr.fx;
            let s_z = params.k_z * s_xy;
            let local = Matrix3::from_diagonal(&Vector3::new(s_xy * s_xy, s_xy * s_xy, s_z * s_z));
            let cov = rt * local * r;
            let covariance = (cov + cov.transpose()) * 0.5;
            let col = image.get(u, v).map(|x| x.clamp(0.0, 1.0));
            out.push(Gaussian {
                center,
                opacity,
                covariance,
                color: col,
                view,
                pixel: [u as u32, v as u32],
            });
        }
    }
    Ok(out)
}

/// Concatenate per-view lists in order.
pub fn merge_scene(per_view: Vec<Vec<Gaussian>>) -> Result<GaussianScene> {
    let view_counts: Vec<usize> = per_view.iter().map(Vec::len).collect();
    let gaussians: Vec<Gaussian> = per_view.into_iter().flatten().collect();
    if gaussians.is_empty() {
        return Err(Error::EmptyScene);
    }
    let (bbox_min, bbox_max) = bounding_box(&gaussians);
    Ok(GaussianScene {
        gaussians,
        view_counts,
        bbox_min,
        bbox_max,
    })
}
