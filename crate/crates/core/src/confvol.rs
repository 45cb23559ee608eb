//! Plane-sweep cost volumes and the per-pixel geometry confidence.
//!
//! Volumes live on a feature grid that is an integer down-scale of the
//! image. The multi-view volume scores each depth candidate by cosine
//! similarity of warped features, the guidance volume one-hot encodes the
//! monocular depth, and the confidence is the peak of a softmax over the
//! aggregated fiber.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{project, relative_pose, CameraIntrinsics, Pose};
use crate::io::depth::DepthMap;
use crate::io::features::FeatureMap;
use crate::io::image::ImageRgb;

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 1.0;

/// Depth hypotheses, uniform in inverse depth from `near` to `far`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCandidates {
    values: Vec<f64>,
}

impl DepthCandidates {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the candidate nearest in inverse depth; ties go to the
    /// smaller index.
    pub fn nearest(&self, depth: f64) -> usize {
        let inv = 1.0 / depth;
        let tie = 1e-12 / self.values[0];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, v) in self.values.iter().enumerate() {
            let d = (1.0 / v - inv).abs();
            if d < best_d - tie {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

pub fn make_candidates(near: f64, far: f64, k: usize) -> Result<DepthCandidates> {
    if !(near > 0.0) || !(far > near) || !far.is_finite() {
        return Err(Error::Bounds(format!("near={near} far={far}")));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 depth candidates, got {k}")));
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    let mut values: Vec<f64> = (0..k)
        .map(|i| 1.0 / (a + (i as f64 / (k - 1) as f64) * (b - a)))
        .collect();
    values[0] = near;
    values[k - 1] = far;
    Ok(DepthCandidates { values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Multiview,
    Guidance,
    Aggregated,
}

/// Scores over `k` candidates for an `h x w` grid, fiber-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kind: VolumeKind,
    pub data: Vec<f64>,
    /// Cells with no usable measurement (no valid source projection for a
    /// multi-view volume, invalid depth for a guidance volume).
    pub invalid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    pub fn fiber(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.w + x) * self.k;
        &self.data[o..o + self.k]
    }

    /// True when every cell is flagged invalid.
    pub fn is_degenerate(&self) -> bool {
        self.invalid.iter().all(|b| *b)
    }

    pub fn argmax(&self, x: usize, y: usize) -> usize {
        let f = self.fiber(x, y);
        let mut best = 0;
        for k in 1..f.len() {
            if f[k] > f[best] {
                best = k;
            }
        }
        best
    }
}

/// Per-cell peak softmax probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ConfidenceMap {
    pub fn uniform(h: usize, w: usize, value: f64) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Bilinear lookup at an image pixel of a `width x height` image; the
    /// grid is assumed to be an integer down-scale of it.
    pub fn sample_pixel(&self, u: f64, v: f64, width: usize, height: usize) -> f64 {
        let sx = width as f64 / self.w as f64;
        let sy = height as f64 / self.h as f64;
        let gx = ((u + 0.5) / sx - 0.5).clamp(0.0, (self.w - 1) as f64);
        let gy = ((v + 0.5) / sy - 0.5).clamp(0.0, (self.h - 1) as f64);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        (1.0 - fy) * ((1.0 - fx) * self.get(x0, y0) + fx * self.get(x1, y0))
            + fy * ((1.0 - fx) * self.get(x0, y1) + fx * self.get(x1, y1))
    }
}

/// A source view for plane sweeping.
#[derive(Clone, Copy, Debug)]
pub struct SweepView<'a> {
    pub features: &'a FeatureMap,
    pub pose: &'a Pose,
    pub intr: &'a CameraIntrinsics,
}

fn grid_scale(f: &FeatureMap, intr: &CameraIntrinsics) -> Result<usize> {
    f.scale_to(intr.width, intr.height).ok_or_else(|| {
        Error::DimensionMismatch(format!(
            "feature grid {}x{} is not an integer down-scale of {}x{}",
            f.w, f.h, intr.width, intr.height
        ))
    })
}

/// Cosine-similarity plane sweep, averaged over the sources that see each
/// warped point. Cells no source sees score 0 and are flagged.
pub fn build_multiview_volume(
    reference: SweepView<'_>,
    sources: &[SweepView<'_>],
    candidates: &DepthCandidates,
) -> Result<CostVolume> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("plane sweep needs at least one source view".into()));
    }
    let s_ref = grid_scale(reference.features, reference.intr)? as f64;
    let d = reference.features.d;
    let mut warps = Vec::with_capacity(sources.len());
    for src in sources {
        if src.features.d != d {
            return Err(Error::DimensionMismatch(format!(
                "descriptor length {} vs {d}",
                src.features.d
            )));
        }
        let s = grid_scale(src.features, src.intr)? as f64;
        warps.push((relative_pose(reference.pose, src.pose), s));
    }
    let (h, w, k) = (reference.features.h, reference.features.w, candidates.len());

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut data = vec![0.0; w * k];
            let mut invalid = vec![true; w];
            let mut buf = vec![0.0; d];
            for x in 0..w {
                let f_ref = reference.features.cell(x, y);
                let u = (x as f64 + 0.5) * s_ref - 0.5;
                let v = (y as f64 + 0.5) * s_ref - 0.5;
                let ray = reference.intr.ray(u, v);
                for (c, depth) in candidates.values().iter().enumerate() {
                    let p_ref = ray * *depth;
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for (src, (rel, s)) in sources.iter().zip(&warps) {
                        let Ok((px, _)) = project(&rel.transform_point(&p_ref), src.intr) else {
                            continue;
                        };
                        if !src.intr.contains(&px) {
                            continue;
                        }
                        src.features
                            .sample_into((px.x + 0.5) / s - 0.5, (px.y + 0.5) / s - 0.5, &mut buf);
                        let norm = buf.iter().map(|t| t * t).sum::<f64>().sqrt();
                        let dot: f64 = buf.iter().zip(f_ref).map(|(a, b)| a * b).sum();
                        if norm > 1e-12 {
                            sum += (dot / norm).clamp(-1.0, 1.0);
                        }
                        n += 1;
                    }
                    if n > 0 {
                        data[x * k + c] = sum / n as f64;
                        invalid[x] = false;
                    }
                }
            }
            (data, invalid)
        })
        .collect();

    let mut data = Vec::with_capacity(h * w * k);
    let mut invalid = Vec::with_capacity(h * w);
    for (d, i) in rows {
        data.extend(d);
        invalid.extend(i);
    }
    let vol = CostVolume {
        h,
        w,
        k,
        kind: VolumeKind::Multiview,
        data,
        invalid,
    };
    if vol.is_degenerate() {
        log::warn!("plane sweep: no source view overlaps the reference image");
    }
    Ok(vol)
}

/// One-hot at the candidate nearest the monocular depth (in inverse depth),
/// sampled at the centre of each `h x w` grid cell. Cells without a valid
/// depth get the uniform fiber `1/K`.
pub fn build_guidance_volume(depth: &DepthMap, candidates: &DepthCandidates, h: usize, w: usize) -> CostVolume {
    let k = candidates.len();
    let sx = depth.width as f64 / w as f64;
    let sy = depth.height as f64 / h as f64;
    let mut data = vec![0.0; h * w * k];
    let mut invalid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            let fiber = &mut data[cell * k..(cell + 1) * k];
            let u = (x as f64 + 0.5) * sx - 0.5;
            let v = (y as f64 + 0.5) * sy - 0.5;
            match depth.sample(u, v) {
                Some(z) => fiber[candidates.nearest(z)] = 1.0,
                None => {
                    fiber.iter_mut().for_each(|f| *f = 1.0 / k as f64);
                    invalid[cell] = true;
                }
            }
        }
    }
    CostVolume {
        h,
        w,
        k,
        kind: VolumeKind::Guidance,
        data,
        invalid,
    }
}

/// Fuses a multi-view and a guidance volume. A learned aggregator could
/// implement this as well.
pub trait Aggregator {
    fn aggregate(&self, multi: &CostVolume, guide: &CostVolume) -> Result<CostVolume>;
}

/// `agg = multi + beta * guide`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdditiveAggregator {
    pub beta: f64,
}

impl Default for AdditiveAggregator {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA }
    }
}

impl Aggregator for AdditiveAggregator {
    fn aggregate(&self, multi: &CostVolume, guide: &CostVolume) -> Result<CostVolume> {
        aggregate_volumes(multi, guide, self.beta)
    }
}

pub fn aggregate_volumes(multi: &CostVolume, guide: &CostVolume, beta: f64) -> Result<CostVolume> {
    if (multi.h, multi.w, multi.k) != (guide.h, guide.w, guide.k) {
        return Err(Error::DimensionMismatch(format!(
            "multi {}x{}x{} vs guide {}x{}x{}",
            multi.h, multi.w, multi.k, guide.h, guide.w, guide.k
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta must be >= 0, got {beta}")));
    }
    let data = multi
        .data
        .iter()
        .zip(&guide.data)
        .map(|(m, g)| m + beta * g)
        .collect();
    Ok(CostVolume {
        h: multi.h,
        w: multi.w,
        k: multi.k,
        kind: VolumeKind::Aggregated,
        data,
        invalid: multi.invalid.iter().zip(&guide.invalid).map(|(a, b)| *a && *b).collect(),
    })
}

/// Peak of a softmax with temperature `tau` over each fiber.
pub fn geometry_confidence(agg: &CostVolume, tau: f64) -> Result<ConfidenceMap> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let data = agg
        .data
        .chunks_exact(agg.k)
        .map(|fiber| {
            let max = fiber.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = fiber.iter().map(|s| ((s - max) / tau).exp()).sum();
            1.0 / z
        })
        .collect();
    Ok(ConfidenceMap {
        h: agg.h,
        w: agg.w,
        data,
    })
}

/// Side length of the built-in descriptor patch.
const PATCH: usize = 5;

/// Hand-crafted descriptors used when no feature maps are supplied.
///
/// The image is box-downsampled to 1/4 resolution (1/2 or 1/1 when the size
/// is not divisible); each cell's descriptor is the mean-subtracted 5x5
/// luma patch around it plus central-difference gradients, L2-normalized.
/// Zero-variance cells map to the first basis vector.
pub fn builtin_features(image: &ImageRgb) -> FeatureMap {
    let factor = [4, 2, 1]
        .into_iter()
        .find(|f| image.width.is_multiple_of(*f) && image.height.is_multiple_of(*f) && image.width / f >= 1 && image.height / f >= 1)
        .unwrap_or(1);
    let small = image.downsample(factor);
    let (w, h) = (small.width, small.height);
    let gray = small.gray();
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        gray[yc * w + xc]
    };
    let d = PATCH * PATCH + 2;
    let r = (PATCH / 2) as isize;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let start = data.len();
            for dy in -r..=r {
                for dx in -r..=r {
                    data.push(at(x + dx, y + dy));
                }
            }
            let mean = data[start..].iter().sum::<f64>() / (PATCH * PATCH) as f64;
            let mut var = 0.0;
            for t in &mut data[start..] {
                *t -= mean;
                var += *t * *t;
            }
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            data.push(gx);
            data.push(gy);
            if var + gx * gx + gy * gy < 1e-18 {
                data[start..].iter_mut().for_each(|t| *t = 0.0);
            }
        }
    }
    FeatureMap::new_normalized(h, w, d, data).expect("descriptor layout")
}

/// Convenience: full confidence for view `r` against the given sources.
#[allow(clippy::too_many_arguments)]
pub fn view_confidence(
    reference: SweepView<'_>,
    sources: &[SweepView<'_>],
    mono_depth: &DepthMap,
    candidates: &DepthCandidates,
    aggregator: &dyn Aggregator,
    tau: f64,
) -> Result<ConfidenceMap> {
    let multi = build_multiview_volume(reference, sources, candidates)?;
    let guide = build_guidance_volume(mono_depth, candidates, multi.h, multi.w);
    let agg = aggregator.aggregate(&multi, &guide)?;
    geometry_confidence(&agg, tau)
}

/// Grid position of an image pixel for a grid with integer scale `s`.
pub fn pixel_to_grid(pixel: &Vector2<f64>, s: usize) -> Vector2<f64> {
    let s = s as f64;
    Vector2::new((pixel.x + 0.5) / s - 0.5, (pixel.y + 0.5) / s - 0.5)
}
