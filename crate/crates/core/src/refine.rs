//! Fine alignment: the reprojection and 3D-consistency losses with analytic
//! gradients, photometric terms, and the optimization loop over per-view
//! pose offsets and coarse depth offset grids.

use std::fmt::Write as _;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{estimate_all_pairs, RansacParams};
use crate::confvol::ConfidenceMap;
use crate::error::{Error, Result};
use crate::geom::{rot6d_decode, rot6d_decode_vjp, rot6d_encode, CameraIntrinsics, Pose, Rotation6D};
use crate::io::depth::DepthMap;
use crate::io::image::ImageRgb;
use crate::io::manifest::SceneData;
use crate::io::matches::CorrespondenceSet;
use crate::raster::{render, RenderConfig};
use crate::scene::{build_view_gaussians, merge_scene, GaussianParams};
use crate::sync::{synchronize, PoseGraph, SyncParams};

/// Smoothing of the point-distance loss at zero, in meters.
pub const DISTANCE_EPS: f64 = 1e-6;
/// Offsets may remove at most this fraction of the smallest depth a grid
/// cell influences.
pub const MAX_DEPTH_REDUCTION: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    /// Weight of the reprojection term; 1 in normal use, 0 for ablations.
    pub lambda_2d3d: f64,
    pub lambda_3d3d: f64,
    /// Pixels.
    pub huber_delta: f64,
    pub lambda_ssim: f64,
    pub photometric: bool,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda_2d3d: 1.0, lambda_3d3d: 0.05, huber_delta: 1.0, lambda_ssim: 0.2, photometric: false }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_2d3d >= 0.0 && self.lambda_3d3d >= 0.0 && self.huber_delta > 0.0 && self.lambda_ssim >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid objective weights {self:?}")));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation. Photometric terms are `None` when not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub l2d3d: f64,
    pub l3d3d: f64,
    pub l2: Option<f64>,
    pub ssim_loss: Option<f64>,
}

pub fn total_objective(c: &Components, w: &ObjectiveWeights) -> f64 {
    let mut total = w.lambda_2d3d * c.l2d3d + w.lambda_3d3d * c.l3d3d;
    if w.photometric {
        total += c.l2.unwrap_or(0.0) + w.lambda_ssim * c.ssim_loss.unwrap_or(0.0);
    }
    total
}

/// Per-view depth offsets on a grid `factor` times coarser than the image,
/// bilinearly upsampled between cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthOffsetField {
    pub width: usize,
    pub height: usize,
    pub factor: usize,
    pub gw: usize,
    pub gh: usize,
    pub values: Vec<f64>,
    floor: Vec<f64>,
}

impl DepthOffsetField {
    /// Zero offsets; `base` fixes the positivity floor of each cell.
    pub fn new(base: &DepthMap, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("depth grid factor must be >= 1".into()));
        }
        let (width, height) = (base.width, base.height);
        let gw = width.div_ceil(factor).max(1);
        let gh = height.div_ceil(factor).max(1);
        let mut f = Self { width, height, factor, gw, gh, values: vec![0.0; gw * gh], floor: vec![0.0; gw * gh] };
        let mut min = vec![f64::INFINITY; gw * gh];
        for v in 0..height {
            for u in 0..width {
                let Some(d) = base.get(u, v) else { continue };
                for (k, w) in f.taps(u as f64, v as f64) {
                    if w > 0.0 {
                        min[k] = min[k].min(d);
                    }
                }
            }
        }
        f.floor = min.iter().map(|m| if m.is_finite() { -MAX_DEPTH_REDUCTION * m } else { 0.0 }).collect();
        Ok(f)
    }

    /// Grid taps `(cell index, weight)` for a full-resolution pixel position.
    pub fn taps(&self, u: f64, v: f64) -> [(usize, f64); 4] {
        let s = self.factor as f64;
        let gx = ((u + 0.5) / s - 0.5).clamp(0.0, (self.gw - 1) as f64);
        let gy = ((v + 0.5) / s - 0.5).clamp(0.0, (self.gh - 1) as f64);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let x1 = (x0 + 1).min(self.gw - 1);
        let y1 = (y0 + 1).min(self.gh - 1);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        [
            (y0 * self.gw + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.gw + x1, fx * (1.0 - fy)),
            (y1 * self.gw + x0, (1.0 - fx) * fy),
            (y1 * self.gw + x1, fx * fy),
        ]
    }

    pub fn offset(&self, u: f64, v: f64) -> f64 {
        self.taps(u, v).iter().map(|(k, w)| self.values[*k] * w).sum()
    }

    /// Raise cells below their floor; returns how many were clamped.
    pub fn clamp(&mut self) -> usize {
        let mut n = 0;
        for (x, f) in self.values.iter_mut().zip(&self.floor) {
            if *x < *f {
                *x = *f;
                n += 1;
            }
        }
        n
    }

    /// `base + upsample(values)` at every valid pixel.
    pub fn apply(&self, base: &DepthMap) -> Result<DepthMap> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                out.push(match base.get(u, v) {
                    Some(d) => d + self.offset(u as f64, v as f64),
                    None => 0.0,
                });
            }
        }
        DepthMap::from_values(self.width, self.height, out)
    }
}

/// Rotation offset in 6D and translation offset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseOffset {
    pub rot6: [f64; 6],
    pub trans: Vector3<f64>,
}

/// Fixed inputs of the geometric losses.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub depths: &'a [DepthMap],
    pub intr: &'a [CameraIntrinsics],
    pub matches: &'a [CorrespondenceSet],
}

impl<'a> Problem<'a> {
    pub fn new(depths: &'a [DepthMap], intr: &'a [CameraIntrinsics], matches: &'a [CorrespondenceSet]) -> Result<Self> {
        if depths.len() != intr.len() {
            return Err(Error::DimensionMismatch(format!("{} depth maps, {} cameras", depths.len(), intr.len())));
        }
        for s in matches {
            if s.i >= depths.len() || s.j >= depths.len() {
                return Err(Error::IndexOutOfRange(format!("pair ({}, {})", s.i, s.j)));
            }
        }
        Ok(Self { depths, intr, matches })
    }
}

/// Optimization variables: base poses plus offsets. View 0's pose offset
/// is never read or written.
#[derive(Clone, Debug, PartialEq)]
pub struct Variables {
    pub base: Vec<Pose>,
    pub offsets: Vec<PoseOffset>,
    pub fields: Vec<DepthOffsetField>,
}

impl Variables {
    pub fn new(base: Vec<Pose>, depths: &[DepthMap], grid_factor: usize) -> Result<Self> {
        if base.len() != depths.len() {
            return Err(Error::DimensionMismatch(format!("{} poses, {} depth maps", base.len(), depths.len())));
        }
        let fields = depths.iter().map(|d| DepthOffsetField::new(d, grid_factor)).collect::<Result<_>>()?;
        Ok(Self { offsets: vec![PoseOffset::default(); base.len()], base, fields })
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    fn rot6(&self, i: usize) -> Rotation6D {
        let mut r = rot6d_encode(self.base[i].rotation());
        for (a, d) in r.0.iter_mut().zip(&self.offsets[i].rot6) {
            *a += d;
        }
        r
    }

    /// Current absolute poses.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        (0..self.n())
            .map(|i| {
                if i == 0 {
                    return Ok(self.base[0]);
                }
                let r = rot6d_decode(&self.rot6(i))?;
                Pose::from_projected(&r, self.base[i].translation() + self.offsets[i].trans)
            })
            .collect()
    }

    pub fn refined_depths(&self, base: &[DepthMap]) -> Result<Vec<DepthMap>> {
        self.fields.iter().zip(base).map(|(f, d)| f.apply(d)).collect()
    }

    /// Flattened parameters: 9 per view from 1 on, then every grid.
    pub fn pack(&self) -> Vec<f64> {
        let mut x = Vec::new();
        for o in &self.offsets[1..] {
            x.extend_from_slice(&o.rot6);
            x.extend(o.trans.iter());
        }
        for f in &self.fields {
            x.extend_from_slice(&f.values);
        }
        x
    }

    pub fn unpack(&mut self, x: &[f64]) {
        let mut k = 0;
        for o in &mut self.offsets[1..] {
            o.rot6.copy_from_slice(&x[k..k + 6]);
            o.trans = Vector3::new(x[k + 6], x[k + 7], x[k + 8]);
            k += 9;
        }
        for f in &mut self.fields {
            let m = f.values.len();
            f.values.copy_from_slice(&x[k..k + m]);
            k += m;
        }
    }

    /// Number of pose parameters at the front of [`Self::pack`].
    pub fn pose_param_count(&self) -> usize {
        9 * (self.n() - 1)
    }
}

/// Gradients laid out like [`Variables`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub rot6: Vec<[f64; 6]>,
    pub trans: Vec<Vector3<f64>>,
    pub depth: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(vars: &Variables) -> Self {
        Self {
            rot6: vec![[0.0; 6]; vars.n()],
            trans: vec![Vector3::zeros(); vars.n()],
            depth: vars.fields.iter().map(|f| vec![0.0; f.values.len()]).collect(),
        }
    }

    /// Same order as [`Variables::pack`].
    pub fn pack(&self) -> Vec<f64> {
        let mut x = Vec::new();
        for i in 1..self.rot6.len() {
            x.extend_from_slice(&self.rot6[i]);
            x.extend(self.trans[i].iter());
        }
        for d in &self.depth {
            x.extend_from_slice(d);
        }
        x
    }

    fn add_scaled(&mut self, a: f64, other: &Gradients) {
        for (x, y) in self.rot6.iter_mut().zip(&other.rot6) {
            for k in 0..6 {
                x[k] += a * y[k];
            }
        }
        for (x, y) in self.trans.iter_mut().zip(&other.trans) {
            *x += y * a;
        }
        for (x, y) in self.depth.iter_mut().zip(&other.depth) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += a * q;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Gradients,
    /// Matches that entered the mean.
    pub used: usize,
    /// Matches skipped for invalid depth or a point behind the camera.
    pub skipped: usize,
}

/// Contribution of one match.
struct Term {
    i: usize,
    j: usize,
    p: Vector2<f64>,
    q: Vector2<f64>,
    loss: f64,
    g_ri: Matrix3<f64>,
    g_ti: Vector3<f64>,
    g_rj: Matrix3<f64>,
    g_tj: Vector3<f64>,
    g_dp: f64,
    g_dq: f64,
}

fn refined_depth_at(problem: &Problem, vars: &Variables, view: usize, px: &Vector2<f64>) -> Option<f64> {
    let d = problem.depths[view].sample(px.x, px.y)? + vars.fields[view].offset(px.x, px.y);
    (d > 0.0).then_some(d)
}

fn huber(r: &Vector2<f64>, delta: f64) -> (f64, Vector2<f64>) {
    let n = r.norm();
    if n <= delta {
        (0.5 * n * n, *r)
    } else {
        (delta * (n - 0.5 * delta), r * (delta / n))
    }
}

/// Reduce per-match terms in input order into a mean loss and gradients.
fn reduce(vars: &Variables, terms: Vec<Option<Term>>, poses: &[Pose]) -> Result<LossEval> {
    let skipped = terms.iter().filter(|t| t.is_none()).count();
    let terms: Vec<Term> = terms.into_iter().flatten().collect();
    let used = terms.len();
    let mut grad = Gradients::zeros(vars);
    if used == 0 {
        return Ok(LossEval { value: 0.0, grad, used, skipped });
    }
    let inv = 1.0 / used as f64;
    let mut value = 0.0;
    let mut g_rot = vec![Matrix3::zeros(); vars.n()];
    for t in &terms {
        value += t.loss;
        g_rot[t.i] += t.g_ri;
        g_rot[t.j] += t.g_rj;
        grad.trans[t.i] += t.g_ti;
        grad.trans[t.j] += t.g_tj;
        for (view, px, g) in [(t.i, t.p, t.g_dp), (t.j, t.q, t.g_dq)] {
            if g != 0.0 {
                for (k, w) in vars.fields[view].taps(px.x, px.y) {
                    grad.depth[view][k] += g * w;
                }
            }
        }
    }
    for i in 1..vars.n() {
        grad.rot6[i] = rot6d_decode_vjp(&vars.rot6(i), &g_rot[i])?;
    }
    grad.rot6[0] = [0.0; 6];
    grad.trans[0] = Vector3::zeros();
    debug_assert!(poses.len() == vars.n());
    let mut scaled = Gradients::zeros(vars);
    scaled.add_scaled(inv, &grad);
    Ok(LossEval { value: value * inv, grad: scaled, used, skipped })
}

fn all_matches<'a>(problem: &'a Problem) -> Vec<(usize, usize, &'a crate::io::matches::Match)> {
    problem
        .matches
        .iter()
        .flat_map(|s| s.matches.iter().map(move |m| (s.i, s.j, m)))
        .collect()
}

/// Mean Huber reprojection error of each match's `p` endpoint lifted with
/// the refined depth of view `i` and projected into view `j`.
pub fn loss_2d3d(problem: &Problem, vars: &Variables, huber_delta: f64) -> Result<LossEval> {
    let poses = vars.poses()?;
    let terms: Vec<Option<Term>> = all_matches(problem)
        .par_iter()
        .map(|&(i, j, m)| {
            let d = refined_depth_at(problem, vars, i, &m.p)?;
            let ray = problem.intr[i].ray(m.p.x, m.p.y);
            let (ri, ti) = (poses[i].rotation(), poses[i].translation());
            let (rj, tj) = (poses[j].rotation(), poses[j].translation());
            let v = ray * d - ti;
            let xw = ri.transpose() * v;
            let y = rj * xw + tj;
            if !(y.z > 1e-9) {
                return None;
            }
            let k = &problem.intr[j];
            let proj = Vector2::new(k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy);
            let (loss, g_r) = huber(&(proj - m.q), huber_delta);
            let jac = Matrix2x3::new(
                k.fx / y.z, 0.0, -k.fx * y.x / (y.z * y.z),
                0.0, k.fy / y.z, -k.fy * y.y / (y.z * y.z),
            );
            let g_y = jac.transpose() * g_r;
            let g_xw = rj.transpose() * g_y;
            let g_v = ri * g_xw;
            Some(Term {
                i,
                j,
                p: m.p,
                q: m.q,
                loss,
                g_ri: v * g_xw.transpose(),
                g_ti: -g_v,
                g_rj: g_y * xw.transpose(),
                g_tj: g_y,
                g_dp: g_v.dot(&ray),
                g_dq: 0.0,
            })
        })
        .collect();
    reduce(vars, terms, &poses)
}

/// Mean smoothed distance between the world points of both endpoints,
/// `sqrt(|d|² + eps²) - eps`, which is exactly zero for coincident points.
pub fn loss_3d3d(problem: &Problem, vars: &Variables) -> Result<LossEval> {
    let poses = vars.poses()?;
    let terms: Vec<Option<Term>> = all_matches(problem)
        .par_iter()
        .map(|&(i, j, m)| {
            let dp = refined_depth_at(problem, vars, i, &m.p)?;
            let dq = refined_depth_at(problem, vars, j, &m.q)?;
            let ray_p = problem.intr[i].ray(m.p.x, m.p.y);
            let ray_q = problem.intr[j].ray(m.q.x, m.q.y);
            let (ri, ti) = (poses[i].rotation(), poses[i].translation());
            let (rj, tj) = (poses[j].rotation(), poses[j].translation());
            let vi = ray_p * dp - ti;
            let vj = ray_q * dq - tj;
            let d = ri.transpose() * vi - rj.transpose() * vj;
            let s = (d.norm_squared() + DISTANCE_EPS * DISTANCE_EPS).sqrt();
            let g_mu = d / s;
            let g_vi = ri * g_mu;
            let g_vj = -(rj * g_mu);
            Some(Term {
                i,
                j,
                p: m.p,
                q: m.q,
                loss: s - DISTANCE_EPS,
                g_ri: vi * g_mu.transpose(),
                g_ti: -g_vi,
                g_rj: -(vj * g_mu.transpose()),
                g_tj: -g_vj,
                g_dp: g_vi.dot(&ray_p),
                g_dq: g_vj.dot(&ray_q),
            })
        })
        .collect();
    reduce(vars, terms, &poses)
}

/// `L2D3D + λ·L3D3D` and its gradient.
pub fn geometric_objective(problem: &Problem, vars: &Variables, w: &ObjectiveWeights) -> Result<(Components, Gradients)> {
    let a = loss_2d3d(problem, vars, w.huber_delta)?;
    let mut grad = Gradients::zeros(vars);
    grad.add_scaled(w.lambda_2d3d, &a.grad);
    let mut l3 = 0.0;
    if w.lambda_3d3d > 0.0 {
        let b = loss_3d3d(problem, vars)?;
        grad.add_scaled(w.lambda_3d3d, &b.grad);
        l3 = b.value;
    }
    Ok((Components { l2d3d: a.value, l3d3d: l3, l2: None, ssim_loss: None }, grad))
}

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over pixels and channels.
pub fn loss_photometric(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    check_dims(rendered, target)?;
    let n = (rendered.data.len() * 3).max(1) as f64;
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / n)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over channels, 11×11 Gaussian window (σ = 1.5), data range 1,
/// averaged over window positions that lie fully inside the image.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    let win = 2 * SSIM_RADIUS + 1;
    if w < win || h < win {
        return Err(Error::DimensionMismatch(format!("SSIM needs at least {win}x{win}, got {w}x{h}")));
    }
    let mut kernel: Vec<f64> = (0..win)
        .map(|k| {
            let x = k as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (w - win + 1, h - win + 1);

    // separable valid-mode filter
    let filter = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; ow * h];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..win).map(|k| kernel[k] * f(y * w + x + k)).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..win).map(|k| kernel[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };

    let mut total = 0.0;
    for c in 0..3 {
        let x = |k: usize| a.data[k][c];
        let y = |k: usize| b.data[k][c];
        let mx = filter(&x);
        let my = filter(&y);
        let mxx = filter(&|k| x(k) * x(k));
        let myy = filter(&|k| y(k) * y(k));
        let mxy = filter(&|k| x(k) * y(k));
        let mut s = 0.0;
        for k in 0..ow * oh {
            let (ux, uy) = (mx[k], my[k]);
            let vx = mxx[k] - ux * ux;
            let vy = myy[k] - uy * uy;
            let cxy = mxy[k] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

pub fn loss_ssim(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    Ok(1.0 - ssim(rendered, target)?)
}

/// Adam with a per-parameter base rate and cosine decay.
#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    lr: Vec<f64>,
    t: usize,
    total: usize,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(lr: Vec<f64>, total: usize) -> Self {
        let n = lr.len();
        Self { m: vec![0.0; n], v: vec![0.0; n], lr, t: 0, total: total.max(1) }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        let decay = 0.5 * (1.0 + (std::f64::consts::PI * self.t as f64 / self.total as f64).cos());
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for k in 0..x.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            x[k] -= decay * self.lr[k] * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub rounds: usize,
    pub steps: usize,
    pub lr_pose: f64,
    pub lr_depth: f64,
    /// Depth grid is this many times coarser than the image.
    pub grid_factor: usize,
    pub weights: ObjectiveWeights,
    /// Re-estimate pairwise poses from refined depths and re-synchronize
    /// after every round.
    pub recompute_poses: bool,
    /// Rounds stop early once the objective is at or below this value.
    pub objective_tol: f64,
    /// Abort when the objective exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    /// Lower bound on the value the divergence factor multiplies. Adam's
    /// first steps move every parameter by about one learning rate, which
    /// multiplies a near-zero objective many times over without diverging.
    pub divergence_floor: f64,
    pub polish_steps: usize,
    pub polish_lr: f64,
    pub polish_downscale: usize,
    pub ransac: Option<RansacParams>,
    pub sync: SyncParams,
    pub seed: u64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            rounds: 2,
            steps: 300,
            lr_pose: 1e-3,
            lr_depth: 1e-2,
            grid_factor: 8,
            weights: ObjectiveWeights::default(),
            recompute_poses: true,
            objective_tol: 1e-8,
            divergence_factor: 10.0,
            divergence_floor: 1e-2,
            polish_steps: 50,
            polish_lr: 1e-3,
            polish_downscale: 4,
            ransac: None,
            sync: SyncParams::default(),
            seed: 0,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sync.validate()?;
        if !(self.lr_pose >= 0.0 && self.lr_depth >= 0.0 && self.divergence_factor > 1.0 && self.divergence_floor >= 0.0) || self.grid_factor == 0 {
            return Err(Error::InvalidInput(format!("invalid refine parameters {self:?}")));
        }
        if self.weights.photometric && self.polish_downscale == 0 {
            return Err(Error::InvalidInput("polish_downscale must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    /// Objective before each step and after the last one.
    pub objective: Vec<f64>,
    pub initial: Components,
    pub last: Components,
    pub clamped: usize,
    pub skipped: usize,
    /// Steps `k` with `objective[k] > objective[k - 50]`.
    pub window_violations: Vec<usize>,
    pub recomputed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineReport {
    pub rounds: Vec<RoundReport>,
    pub polish_objective: Vec<f64>,
    /// Components at the returned poses and depths.
    pub final_components: Components,
    pub flagged: bool,
}

impl RefineReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "flagged {}", self.flagged);
        let f = &self.final_components;
        let _ = writeln!(s, "final l2d3d {:e} l3d3d {:e}", f.l2d3d, f.l3d3d);
        for (r, round) in self.rounds.iter().enumerate() {
            let _ = writeln!(
                s,
                "round {r} steps {} clamped {} skipped {} recomputed {} window_violations {}",
                round.objective.len().saturating_sub(1),
                round.clamped,
                round.skipped,
                round.recomputed,
                round.window_violations.len()
            );
            for (k, o) in round.objective.iter().enumerate() {
                let _ = writeln!(s, "round {r} step {k} objective {o:e}");
            }
        }
        for (k, o) in self.polish_objective.iter().enumerate() {
            let _ = writeln!(s, "polish step {k} objective {o:e}");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub poses: Vec<Pose>,
    pub depths: Vec<DepthMap>,
    pub fields: Vec<DepthOffsetField>,
    pub report: RefineReport,
}

/// `reference` is the objective the divergence test compares against; later
/// rounds pass the first round's starting value, since they begin close to
/// the optimum and Adam's first full-size steps overshoot there.
fn run_round(problem: &Problem, vars: &mut Variables, params: &RefineParams, reference: Option<f64>) -> Result<RoundReport> {
    let w = &params.weights;
    let pose_n = vars.pose_param_count();
    let mut x = vars.pack();
    let lr: Vec<f64> = (0..x.len()).map(|k| if k < pose_n { params.lr_pose } else { params.lr_depth }).collect();
    let mut adam = Adam::new(lr, params.steps);
    let mut report = RoundReport::default();
    let (c0, mut grad) = geometric_objective(problem, vars, w)?;
    let initial = total_objective(&c0, w);
    let limit = params.divergence_factor
        * reference.unwrap_or(initial).max(initial).max(params.divergence_floor).max(f64::MIN_POSITIVE);
    let mut best = (initial, x.clone(), c0);
    report.initial = c0;
    report.last = c0;
    report.objective.push(initial);
    report.skipped = loss_2d3d(problem, vars, w.huber_delta)?.skipped;
    for _ in 0..params.steps {
        if *report.objective.last().unwrap() <= params.objective_tol {
            break;
        }
        adam.step(&mut x, &grad.pack());
        vars.unpack(&x);
        let clamped: usize = vars.fields.iter_mut().map(DepthOffsetField::clamp).sum();
        if clamped > 0 {
            report.clamped += clamped;
            x = vars.pack();
        }
        let (c, g) = geometric_objective(problem, vars, w)?;
        let obj = total_objective(&c, w);
        if !obj.is_finite() || obj > limit {
            return Err(Error::Divergence(format!(
                "objective {obj:e} after {} steps, initial {initial:e}, limit {limit:e}",
                report.objective.len()
            )));
        }
        let k = report.objective.len();
        if k >= 50 && obj > report.objective[k - 50] {
            report.window_violations.push(k);
        }
        report.objective.push(obj);
        report.last = c;
        grad = g;
        if obj < best.0 {
            best = (obj, x.clone(), c);
        }
    }
    // the round returns its best iterate, never something worse than its start
    if best.0 < *report.objective.last().unwrap() {
        vars.unpack(&best.1);
        report.last = best.2;
    }
    Ok(report)
}

/// Pairwise re-estimation from refined depths followed by synchronization,
/// expressed in the gauge of `gauge` (the incoming pose of view 0).
fn recompute_poses(data: &SceneData, depths: &[DepthMap], gauge: &Pose, params: &RefineParams) -> Result<Vec<Pose>> {
    let mut refined = data.clone();
    for (v, d) in refined.views.iter_mut().zip(depths) {
        v.depth = d.clone();
    }
    let ransac = match params.ransac {
        Some(r) => r,
        None => RansacParams {
            seed: params.seed,
            ..RansacParams::for_median_depth(refined.median_depth().unwrap_or(1.0))
        },
    };
    let pairs = estimate_all_pairs(&refined, &ransac)?;
    let graph = PoseGraph::from_estimates(data.views.len(), &pairs.estimates)?;
    let out = synchronize(&graph, &SyncParams { seed: params.seed, ..params.sync })?;
    Ok(out.poses.iter().map(|p| p.compose(gauge)).collect())
}

/// Images, depths and cameras at the polish resolution.
struct LowRes {
    images: Vec<ImageRgb>,
    depths: Vec<DepthMap>,
    intr: Vec<CameraIntrinsics>,
}

fn low_res(data: &SceneData, depths: &[DepthMap], factor: usize) -> Result<LowRes> {
    let mut out = LowRes { images: vec![], depths: vec![], intr: vec![] };
    let f = factor as f64;
    for (v, d) in data.views.iter().zip(depths) {
        let intr = v.intr.downscaled(factor);
        let mut vals = Vec::with_capacity(intr.width * intr.height);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let (u, vv) = ((x as f64 + 0.5) * f - 0.5, (y as f64 + 0.5) * f - 0.5);
                vals.push(d.sample(u, vv).unwrap_or(0.0));
            }
        }
        out.depths.push(DepthMap::from_values(intr.width, intr.height, vals)?);
        out.images.push(v.image.downsample(factor));
        out.intr.push(intr);
    }
    Ok(out)
}

fn photometric_objective(lr: &LowRes, poses: &[Pose], w: &ObjectiveWeights) -> Result<f64> {
    let params = GaussianParams::default();
    let mut per_view = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let intr = &lr.intr[k];
        let conf = ConfidenceMap::uniform(intr.height, intr.width, 1.0);
        per_view.push(build_view_gaussians(k as u32, &lr.images[k], &lr.depths[k], pose, intr, &conf, &params)?);
    }
    let scene = merge_scene(per_view)?;
    let cfg = RenderConfig::default();
    let mut total = 0.0;
    for (k, pose) in poses.iter().enumerate() {
        let out = render(&scene, pose, &lr.intr[k], &cfg)?;
        total += loss_photometric(&out.color, &lr.images[k])?;
        if w.lambda_ssim > 0.0 {
            total += w.lambda_ssim * loss_ssim(&out.color, &lr.images[k]).unwrap_or(0.0);
        }
    }
    Ok(total / poses.len() as f64)
}

/// Pose-only descent on the rendered-image loss with central
/// finite-difference gradients; keeps the best poses seen.
fn photometric_polish(
    data: &SceneData,
    depths: &[DepthMap],
    poses: Vec<Pose>,
    params: &RefineParams,
) -> Result<(Vec<Pose>, Vec<f64>)> {
    let lr = low_res(data, depths, params.polish_downscale)?;
    let mut vars = Variables::new(poses, &lr.depths, 1)?;
    let n = vars.pose_param_count();
    let mut x = vars.pack();
    let mut adam = Adam::new(vec![params.polish_lr; n], params.polish_steps);
    let eval = |vars: &Variables| -> Result<f64> { photometric_objective(&lr, &vars.poses()?, &params.weights) };
    let mut best = (eval(&vars)?, vars.poses()?);
    let mut history = vec![best.0];
    let h = 1e-4;
    for _ in 0..params.polish_steps {
        let mut g = vec![0.0; x.len()];
        for k in 0..n {
            let mut probe = vars.clone();
            let mut xp = x.clone();
            xp[k] += h;
            probe.unpack(&xp);
            let fp = eval(&probe)?;
            xp[k] -= 2.0 * h;
            probe.unpack(&xp);
            let fm = eval(&probe)?;
            g[k] = (fp - fm) / (2.0 * h);
        }
        adam.step(&mut x[..n], &g[..n]);
        vars.unpack(&x);
        let f = eval(&vars)?;
        history.push(f);
        if f < best.0 {
            best = (f, vars.poses()?);
        }
    }
    Ok((best.1, history))
}

/// Test-time refinement of poses and depths for every view in `data`.
///
/// Each round minimizes `L2D3D + λ·L3D3D` with Adam from zero pose offsets,
/// carrying depth offsets across rounds, then (optionally) re-estimates the
/// pairwise poses from the refined depths and re-synchronizes. View 0's
/// pose is returned unchanged.
pub fn fine_align(data: &SceneData, init: &[Pose], params: &RefineParams) -> Result<RefineOutput> {
    params.validate()?;
    if init.len() != data.views.len() {
        return Err(Error::DimensionMismatch(format!("{} poses for {} views", init.len(), data.views.len())));
    }
    let base_depths: Vec<DepthMap> = data.views.iter().map(|v| v.depth.clone()).collect();
    let intr: Vec<CameraIntrinsics> = data.views.iter().map(|v| v.intr).collect();
    let problem = Problem::new(&base_depths, &intr, &data.pairs)?;
    let gauge = init[0];
    let mut vars = Variables::new(init.to_vec(), &base_depths, params.grid_factor)?;
    let mut report = RefineReport::default();

    let mut reference = None;
    for _ in 0..params.rounds {
        let mut round = run_round(&problem, &mut vars, params, reference)?;
        reference = reference.or(round.objective.first().copied());
        let mut poses = vars.poses()?;
        if params.recompute_poses && data.views.len() > 1 {
            let depths = vars.refined_depths(&base_depths)?;
            match recompute_poses(data, &depths, &gauge, params) {
                Ok(p) => {
                    poses = p;
                    round.recomputed = true;
                }
                Err(e) => log::warn!("pose recomputation failed, keeping optimized poses: {e}"),
            }
        }
        poses[0] = gauge;
        vars.base = poses;
        vars.offsets.iter_mut().for_each(|o| *o = PoseOffset::default());
        report.flagged |= !round.window_violations.is_empty();
        report.rounds.push(round);
    }

    let depths = vars.refined_depths(&base_depths)?;
    if params.weights.photometric && params.polish_steps > 0 && data.views.len() > 1 {
        let (p, hist) = photometric_polish(data, &depths, vars.base.clone(), params)?;
        vars.base = p;
        vars.base[0] = gauge;
        report.polish_objective = hist;
    }
    let (c, _) = geometric_objective(&problem, &vars, &ObjectiveWeights { lambda_2d3d: 1.0, lambda_3d3d: 1.0, ..params.weights })?;
    report.final_components = c;
    Ok(RefineOutput { poses: vars.base.clone(), depths, fields: vars.fields, report })
}
