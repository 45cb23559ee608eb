//! Synthetic ground truth and evaluation metrics.
//!
//! The generator builds an analytic world (a textured room with boxes),
//! ray-casts exact depth for every view, turns those depths into
//! pixel-aligned Gaussians and renders the images through [`crate::raster`],
//! so generated images are exactly what the renderer produces for the
//! ground-truth scene. Correspondences come from exact reprojection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confvol::ConfidenceMap;
use crate::error::{Error, Result};
use crate::geom::{project, project_to_so3, relative_pose, rotation_geodesic_deg, translation_angle_deg, CameraIntrinsics, Pose};
use crate::io::depth::{save_depth, DepthMap};
use crate::io::image::{save_image, ImageRgb};
use crate::io::manifest::{save_manifest, PairEntry, SceneData, SceneManifest, ViewData, ViewEntry, ViewRole};
use crate::io::matches::{save_correspondences, CorrespondenceSet, Match};
use crate::io::poses::save_poses;
use crate::io::scenefile::save_scene;
use crate::pipeline::{run_in_memory, PipelineConfig, PipelineOutput};
use crate::raster::{render, RenderConfig};
use crate::refine::ssim;
use crate::scene::{build_view_gaussians, merge_scene, GaussianParams, GaussianScene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    /// Cameras on a horizontal circle around the scene center, all looking
    /// at it; adjacent views are `baseline_deg` apart.
    #[default]
    Arc,
    /// Cameras on a line, all looking the same way; spacing chosen so that
    /// adjacent views subtend `baseline_deg` at the scene center.
    Line,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Std of the per-pixel multiplicative depth noise `1 + σ·n`.
    pub depth_sigma: f64,
    /// Std of the Gaussian pixel noise added to `q`, in pixels.
    pub match_sigma: f64,
    /// Fraction of rows per pair whose `q` is replaced by a uniform pixel.
    pub outlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub views: usize,
    pub trajectory: Trajectory,
    pub baseline_deg: f64,
    pub boxes: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Camera distance from the scene center (arc) or the center plane (line).
    pub radius: f64,
    pub matches_per_pair: usize,
    /// Pairs with fewer visible matches than this are left out.
    pub min_pair_matches: usize,
    /// Range of the solid-texture wave periods, meters.
    pub texture_period: [f64; 2],
    /// Sinusoids per colour channel. Two give smooth shading; more give the
    /// local detail patch descriptors need to tell depths apart.
    pub texture_waves: usize,
    /// Indices of held-out target views.
    pub targets: Vec<usize>,
    pub noise: NoiseSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            views: 3,
            trajectory: Trajectory::Arc,
            baseline_deg: 10.0,
            boxes: 4,
            width: 128,
            height: 128,
            hfov_deg: 60.0,
            radius: 4.0,
            matches_per_pair: 200,
            min_pair_matches: 12,
            texture_period: [4.0, 8.0],
            texture_waves: 2,
            targets: Vec::new(),
            noise: NoiseSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.views < 2 {
            return bad(format!("need at least 2 views, got {}", self.views));
        }
        if !(self.baseline_deg > 0.0 && self.baseline_deg <= 60.0) {
            return bad(format!("baseline {}° outside (0, 60]", self.baseline_deg));
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.outlier_fraction) || !(n.depth_sigma >= 0.0) || !(n.match_sigma >= 0.0) {
            return bad(format!("invalid noise spec {n:?}"));
        }
        if self.width < 8 || self.height < 8 || !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) || !(self.radius > 0.0) {
            return bad("invalid camera settings".into());
        }
        let [p0, p1] = self.texture_period;
        if !(p0 > 0.0 && p1 > p0 && p1.is_finite()) {
            return bad(format!("invalid texture period range {:?}", self.texture_period));
        }
        if self.texture_waves == 0 {
            return bad("texture_waves must be at least 1".into());
        }
        if self.targets.iter().any(|&t| t >= self.views) {
            return bad(format!("target index out of range in {:?}", self.targets));
        }
        let contexts = (0..self.views).filter(|k| !self.targets.contains(k)).count();
        if contexts < 2 {
            return bad("need at least 2 context views".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    /// Slab test: `(t_enter, t_exit, enter_axis, exit_axis)`.
    fn slabs(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, usize, usize)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut a0, mut a1) = (0, 0);
        for k in 0..3 {
            if d[k].abs() < 1e-300 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = ((self.min[k] - o[k]) / d[k], (self.max[k] - o[k]) / d[k]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            if n > t0 {
                t0 = n;
                a0 = k;
            }
            if f < t1 {
                t1 = f;
                a1 = k;
            }
        }
        (t0 <= t1).then_some((t0, t1, a0, a1))
    }
}

/// One sinusoid per channel and per wave.
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    base: [f64; 3],
    waves: Vec<(Vector3<f64>, f64, f64, usize)>,
}

impl Texture {
    /// `n` waves per channel with periods drawn from `periods` (meters).
    /// Amplitudes fall log-uniformly from 0.22 to 0.1 and are scaled by
    /// `sqrt(2 / n)` (at most 1) so the overall contrast barely depends on `n`.
    fn random(rng: &mut ChaCha8Rng, periods: std::ops::Range<f64>, n: usize) -> Self {
        let base = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
        let mut waves = Vec::new();
        for c in 0..3 {
            for k in 0..n {
                // endpoints exact, so the two-wave default is unchanged
                let level = match k {
                    0 => 0.22,
                    k if k == n - 1 => 0.1,
                    k => 0.22 * (0.1f64 / 0.22).powf(k as f64 / (n - 1) as f64),
                };
                let amp = (2.0 / n as f64).sqrt().min(1.0) * level;
                let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let dir = if dir.norm() < 1e-3 { Vector3::x() } else { dir.normalize() };
                let period = rng.random_range(periods.clone());
                waves.push((dir * (std::f64::consts::TAU / period), rng.random_range(0.0..std::f64::consts::TAU), amp, c));
            }
        }
        Self { base, waves }
    }

    fn color(&self, x: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, amp, ch) in &self.waves {
            c[*ch] += amp * (k.dot(x) + phase).sin();
        }
        c.map(|v| v.clamp(0.02, 0.98))
    }
}

/// Analytic scene: the inside of a room plus solid boxes, all surfaces sharing
/// one smooth solid texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    room: Aabb,
    boxes: Vec<Aabb>,
    /// Solid (3D) texture shared by every surface.
    textures: Vec<Texture>,
}

/// First surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub surface: usize,
}

impl SynthWorld {
    fn random(rng: &mut ChaCha8Rng, boxes: usize, centers: &[Vector3<f64>], periods: [f64; 2], waves: usize) -> Self {
        let reach = centers.iter().map(|c| c.x.abs().max(c.z.abs())).fold(0.0, f64::max);
        let half = Vector3::repeat(reach + 3.0);
        let room = Aabb { min: -half, max: half };
        let mut out = Vec::new();
        let mut attempts = 0;
        while out.len() < boxes && attempts < 1000 {
            attempts += 1;
            let c = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-0.8..1.5), rng.random_range(-1.5..1.5));
            let s = Vector3::new(rng.random_range(0.25..0.6), rng.random_range(0.25..0.6), rng.random_range(0.25..0.6));
            let b = Aabb { min: c - s, max: c + s };
            // keep every camera at least half a meter outside every box
            let clear = centers.iter().all(|p| (0..3).any(|k| p[k] < b.min[k] - 0.5 || p[k] > b.max[k] + 0.5));
            if clear {
                out.push(b);
            }
        }
        // one solid texture for all surfaces: colour is continuous across
        // corners and edges, so only occlusion boundaries are discontinuous
        let textures = vec![Texture::random(rng, periods[0]..periods[1], waves)];
        Self { room, boxes: out, textures }
    }

    /// Nearest intersection for `t > 1e-9`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        if let Some((_, t1, _, axis)) = self.room.slabs(origin, dir) {
            if t1 > 1e-9 {
                let side = if dir[axis] > 0.0 { 1 } else { 0 };
                best = Some((t1, 2 * axis + side));
            }
        }
        for (k, b) in self.boxes.iter().enumerate() {
            if let Some((t0, _, _, _)) = b.slabs(origin, dir) {
                if t0 > 1e-9 && best.is_none_or(|(t, _)| t0 < t) {
                    best = Some((t0, 6 + k));
                }
            }
        }
        best.map(|(t, surface)| Hit { t, point: origin + dir * t, surface })
    }

    pub fn color(&self, hit: &Hit) -> [f64; 3] {
        self.textures[hit.surface.min(self.textures.len() - 1)].color(&hit.point)
    }

    /// Exact z-depth and surface color for every pixel of a view.
    pub fn trace_view(&self, pose: &Pose, intr: &CameraIntrinsics) -> Result<(DepthMap, ImageRgb)> {
        let rt = pose.rotation().transpose();
        let c = pose.center();
        let mut depth = Vec::with_capacity(intr.width * intr.height);
        let mut img = ImageRgb::new(intr.width, intr.height, [0.0; 3]);
        for v in 0..intr.height {
            for u in 0..intr.width {
                // unit-z ray, so the ray parameter is the z-depth
                let d = rt * intr.ray(u as f64, v as f64);
                match self.cast(&c, &d) {
                    Some(h) => {
                        depth.push(h.t);
                        img.set(u, v, self.color(&h));
                    }
                    None => depth.push(0.0),
                }
            }
        }
        Ok((DepthMap::from_values(intr.width, intr.height, depth)?, img))
    }
}

/// Ground-truth camera poses for a spec.
pub fn camera_poses(spec: &SynthSpec) -> Result<Vec<Pose>> {
    let n = spec.views;
    let b = spec.baseline_deg.to_radians();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let s = k as f64 - (n - 1) as f64 / 2.0;
        let pose = match spec.trajectory {
            Trajectory::Arc => {
                let a = s * b;
                let c = Vector3::new(spec.radius * a.sin(), -0.4, -spec.radius * a.cos());
                Pose::look_at(&c, &Vector3::new(0.0, 0.2, 0.0), &down)?
            }
            Trajectory::Line => {
                let step = 2.0 * spec.radius * (b / 2.0).tan();
                let c = Vector3::new(s * step, -0.4, -spec.radius);
                Pose::look_at(&c, &(c + Vector3::new(0.0, 0.15, spec.radius)), &down)?
            }
        };
        poses.push(pose);
    }
    let spread = poses.iter().map(|p| (p.center() - poses[0].center()).norm()).fold(0.0, f64::max);
    if spread < 1e-9 {
        return Err(Error::DegenerateConfiguration("all cameras coincide".into()));
    }
    Ok(poses)
}

/// Everything the generator produces.
#[derive(Clone, Debug)]
pub struct SynthBundle {
    pub spec: SynthSpec,
    pub seed: u64,
    /// Noisy inputs with ground-truth poses and view roles attached.
    pub data: SceneData,
    pub gt_poses: Vec<Pose>,
    pub gt_depths: Vec<DepthMap>,
    /// The Gaussian scene the images were rendered from.
    pub scene: GaussianScene,
    pub world: SynthWorld,
    /// Per pair, the row indices that were replaced by outliers.
    pub outlier_rows: Vec<Vec<usize>>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Exact correspondences from `i` to `j`: integer pixels in `i`, continuous
/// reprojections in `j` that are visible (not occluded) from camera `j`.
#[allow(clippy::too_many_arguments)]
fn exact_matches(
    world: &SynthWorld,
    poses: &[Pose],
    depths: &[DepthMap],
    intr: &CameraIntrinsics,
    i: usize,
    j: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Match> {
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let (w, h) = (intr.width, intr.height);
    let rt_j = poses[j].rotation().transpose();
    let c_j = poses[j].center();
    for _ in 0..count * 50 {
        if out.len() == count {
            break;
        }
        let (u, v) = (rng.random_range(0..w), rng.random_range(0..h));
        if !seen.insert((u, v)) {
            continue;
        }
        let Some(d) = depths[i].get(u, v) else { continue };
        let xw = poses[i].inverse().transform_point(&(intr.ray(u as f64, v as f64) * d));
        let Ok((q, z)) = project(&poses[j].transform_point(&xw), intr) else { continue };
        if !intr.contains(&q) {
            continue;
        }
        let Some(hit) = world.cast(&c_j, &(rt_j * intr.ray(q.x, q.y))) else { continue };
        if (hit.t - z).abs() > 1e-6 * z {
            continue;
        }
        // the depth lookup at q must agree with the surface, which fails
        // when its bilinear taps straddle a depth discontinuity
        match depths[j].sample(q.x, q.y) {
            Some(dq) if (dq - z).abs() <= 1e-9 * z => {}
            _ => continue,
        }
        out.push(Match { p: Vector2::new(u as f64, v as f64), q, confidence: 1.0 });
    }
    out
}

/// Deterministic synthetic scene for `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthBundle> {
    spec.validate()?;
    let gt = camera_poses(spec)?;
    let intr = CameraIntrinsics::from_fov(spec.width, spec.height, spec.hfov_deg)?;
    let centers: Vec<Vector3<f64>> = gt.iter().map(Pose::center).collect();
    let world = SynthWorld::random(&mut sub_rng(seed, 0), spec.boxes, &centers, spec.texture_period, spec.texture_waves);

    let mut gt_depths = Vec::with_capacity(spec.views);
    let mut colors = Vec::with_capacity(spec.views);
    for p in &gt {
        let (d, c) = world.trace_view(p, &intr)?;
        gt_depths.push(d);
        colors.push(c);
    }
    let gparams = GaussianParams::default();
    let mut per_view = Vec::with_capacity(spec.views);
    for (k, p) in gt.iter().enumerate() {
        let conf = ConfidenceMap::uniform(intr.height, intr.width, 1.0);
        per_view.push(build_view_gaussians(k as u32, &colors[k], &gt_depths[k], p, &intr, &conf, &gparams)?);
    }
    let scene = merge_scene(per_view)?;
    let rcfg = RenderConfig::default();
    let images: Vec<ImageRgb> = gt.iter().map(|p| render(&scene, p, &intr, &rcfg).map(|o| o.color)).collect::<Result<_>>()?;

    let mut noise_rng = sub_rng(seed, 1);
    let depth_noise = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let noisy: Vec<DepthMap> = gt_depths
        .iter()
        .map(|d| {
            if spec.noise.depth_sigma == 0.0 {
                return Ok(d.clone());
            }
            let vals = d
                .values()
                .iter()
                .map(|&z| if z > 0.0 { z * (1.0 + depth_noise.sample(&mut noise_rng)).max(0.05) } else { z })
                .collect();
            DepthMap::from_values(d.width, d.height, vals)
        })
        .collect::<Result<_>>()?;

    let match_noise = Normal::new(0.0, spec.noise.match_sigma.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut pairs = Vec::new();
    let mut outlier_rows = Vec::new();
    for i in 0..spec.views {
        for j in i + 1..spec.views {
            let mut rng = sub_rng(seed, 2 + (i * spec.views + j) as u64);
            let mut ms = exact_matches(&world, &gt, &gt_depths, &intr, i, j, spec.matches_per_pair, &mut rng);
            if ms.len() < spec.min_pair_matches.max(1) {
                continue;
            }
            if spec.noise.match_sigma > 0.0 {
                for m in &mut ms {
                    m.q.x = (m.q.x + match_noise.sample(&mut rng)).clamp(0.0, (spec.width - 1) as f64);
                    m.q.y = (m.q.y + match_noise.sample(&mut rng)).clamp(0.0, (spec.height - 1) as f64);
                }
            }
            let n_out = (spec.noise.outlier_fraction * ms.len() as f64).floor() as usize;
            let mut rows: Vec<usize> = rand::seq::index::sample(&mut rng, ms.len(), n_out).into_vec();
            rows.sort_unstable();
            for &r in &rows {
                ms[r].q = Vector2::new(
                    rng.random_range(0.0..(spec.width - 1) as f64),
                    rng.random_range(0.0..(spec.height - 1) as f64),
                );
            }
            outlier_rows.push(rows);
            pairs.push(CorrespondenceSet { i, j, matches: ms });
        }
    }

    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for d in gt_depths.iter().chain(&noisy) {
        for &z in d.values().iter().filter(|z| **z > 0.0) {
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    let views = (0..spec.views)
        .map(|k| ViewData {
            image: images[k].clone(),
            depth: noisy[k].clone(),
            intr,
            features: None,
            gt_pose: Some(gt[k]),
            role: if spec.targets.contains(&k) { ViewRole::Target } else { ViewRole::Context },
        })
        .collect();
    let data = SceneData { views, pairs, near: 0.9 * lo, far: 1.1 * hi, baseline_deg: Some(spec.baseline_deg) };
    data.validate()?;
    Ok(SynthBundle { spec: spec.clone(), seed, data, gt_poses: gt, gt_depths, scene, world, outlier_rows })
}

/// Write a bundle as a loadable scene directory; returns the manifest path.
///
/// Layout: `manifest.toml`, `images/`, `depth/` (noisy input depth),
/// `gt_depth/`, `gt/` (poses), `matches/`, `scene.sags`, `spec.toml`.
pub fn write_bundle(bundle: &SynthBundle, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "depth", "gt_depth", "gt", "matches"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut views = Vec::new();
    for (k, v) in bundle.data.views.iter().enumerate() {
        let image = PathBuf::from(format!("images/{k:03}.png"));
        let depth = PathBuf::from(format!("depth/{k:03}.pfm"));
        let gt_pose = PathBuf::from(format!("gt/{k:03}.txt"));
        save_image(&v.image, &dir.join(&image))?;
        save_depth(&v.depth, &dir.join(&depth))?;
        save_depth(&bundle.gt_depths[k], &dir.join(format!("gt_depth/{k:03}.pfm")))?;
        save_poses(&[bundle.gt_poses[k]], &dir.join(&gt_pose))?;
        views.push(ViewEntry { image, depth, intrinsics: v.intr, features: None, gt_pose: Some(gt_pose), role: v.role });
    }
    let mut pairs = Vec::new();
    for s in &bundle.data.pairs {
        let matches = PathBuf::from(format!("matches/{:03}_{:03}.txt", s.i, s.j));
        save_correspondences(s, &dir.join(&matches))?;
        pairs.push(PairEntry { i: s.i, j: s.j, matches });
    }
    let manifest = SceneManifest {
        near: bundle.data.near,
        far: bundle.data.far,
        baseline_deg: bundle.data.baseline_deg,
        views,
        pairs,
    };
    let path = dir.join("manifest.toml");
    save_manifest(&manifest, &path)?;
    save_scene(&bundle.scene, &dir.join("scene.sags"))?;
    let spec_path = dir.join("spec.toml");
    let text = toml::to_string(&bundle.spec).map_err(|e| Error::parse(&spec_path, e.to_string()))?;
    fs::write(&spec_path, format!("# seed = {}\n{text}", bundle.seed)).map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}

/// Overlap category from the baseline angle between context cameras.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapBin {
    Small,
    Medium,
    Large,
}

impl OverlapBin {
    /// Small above 25°, large below 10°, medium in between (inclusive).
    pub fn from_baseline(deg: f64) -> Self {
        if deg > 25.0 {
            OverlapBin::Small
        } else if deg < 10.0 {
            OverlapBin::Large
        } else {
            OverlapBin::Medium
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OverlapBin::Small => "small",
            OverlapBin::Medium => "medium",
            OverlapBin::Large => "large",
        }
    }
}

/// Closed-form similarity `(s, R, t)` minimizing `Σ |dst - (s R src + t)|²`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", src.len(), dst.len())));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        cov += (b - md) * (a - ms).transpose();
        var += (a - ms).norm_squared();
    }
    cov /= n;
    var /= n;
    if var < 1e-300 {
        return Err(Error::DegenerateConfiguration("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        d[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * vt;
    let s = svd.singular_values.dot(&d) / var;
    let t = md - r * ms * s;
    Ok((s, r, t))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseEval {
    /// `(i, j, error)` for every pair `i < j`, degrees.
    pub rotation_errors: Vec<(usize, usize, f64)>,
    pub translation_errors: Vec<(usize, usize, f64)>,
    pub rotation_mean: f64,
    pub rotation_median: f64,
    pub translation_mean: f64,
    pub translation_median: f64,
    /// RMSE of camera centers after similarity alignment.
    pub ate: f64,
}

fn mean_median(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let med = if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) };
    (s.iter().sum::<f64>() / m as f64, med)
}

/// Estimated poses expressed in the ground-truth gauge of view 0.
pub fn align_to_gt_gauge(est: &[Pose], gt: &[Pose]) -> Vec<Pose> {
    let g = est[0].inverse().compose(&gt[0]);
    est.iter().map(|p| p.compose(&g)).collect()
}

/// Relative rotation and translation-direction errors over all pairs, and
/// ATE after similarity alignment of camera centers.
pub fn evaluate_poses(est: &[Pose], gt: &[Pose]) -> Result<PoseEval> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} estimated vs {} ground-truth poses", est.len(), gt.len())));
    }
    if est.len() < 2 {
        return Err(Error::InvalidInput("pose evaluation needs at least 2 views".into()));
    }
    let est = align_to_gt_gauge(est, gt);
    let mut out = PoseEval::default();
    for i in 0..est.len() {
        for j in i + 1..est.len() {
            let (e, g) = (relative_pose(&est[i], &est[j]), relative_pose(&gt[i], &gt[j]));
            out.rotation_errors.push((i, j, rotation_geodesic_deg(e.rotation(), g.rotation())));
            match translation_angle_deg(e.translation(), g.translation()) {
                Ok(a) => out.translation_errors.push((i, j, a)),
                Err(_) => log::warn!("pair ({i}, {j}): zero-length translation, direction error skipped"),
            }
        }
    }
    let r: Vec<f64> = out.rotation_errors.iter().map(|x| x.2).collect();
    let t: Vec<f64> = out.translation_errors.iter().map(|x| x.2).collect();
    (out.rotation_mean, out.rotation_median) = mean_median(&r);
    (out.translation_mean, out.translation_median) = mean_median(&t);
    let ce: Vec<Vector3<f64>> = est.iter().map(Pose::center).collect();
    let cg: Vec<Vector3<f64>> = gt.iter().map(Pose::center).collect();
    out.ate = match umeyama(&ce, &cg) {
        Ok((s, r, t)) => {
            let sq: f64 = ce.iter().zip(&cg).map(|(a, b)| (r * a * s + t - b).norm_squared()).sum();
            (sq / ce.len() as f64).sqrt()
        }
        // all estimated centers coincide: align by translation only
        Err(_) => {
            let mg = cg.iter().sum::<Vector3<f64>>() / cg.len() as f64;
            let sq: f64 = cg.iter().map(|b| (b - mg).norm_squared()).sum();
            (sq / cg.len() as f64).sqrt()
        }
    };
    Ok(out)
}

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub view: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR hit the cap (images identical to within float precision).
    pub identical: bool,
}

pub fn evaluate_images(view: usize, rendered: &ImageRgb, target: &ImageRgb) -> Result<ImageEval> {
    let mse = crate::refine::loss_photometric(rendered, target)?;
    let raw = if mse > 0.0 { 10.0 * (1.0 / mse).log10() } else { f64::INFINITY };
    let identical = raw >= PSNR_CAP;
    let s = ssim(rendered, target).unwrap_or(f64::NAN);
    Ok(ImageEval { view, mse, psnr: raw.min(PSNR_CAP), ssim: s, identical })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overlap: Option<OverlapBin>,
    pub poses: Option<PoseEval>,
    /// Re-rendered context views against their inputs.
    pub context_images: Vec<ImageEval>,
    /// Held-out targets rendered from their ground-truth poses.
    pub target_images: Vec<ImageEval>,
}

fn write_images(s: &mut String, label: &str, imgs: &[ImageEval]) {
    for e in imgs {
        let _ = writeln!(
            s,
            "{label} view {} psnr {} ssim {} mse {}{}",
            e.view,
            e.psnr,
            e.ssim,
            e.mse,
            if e.identical { " identical" } else { "" }
        );
    }
    if !imgs.is_empty() {
        let m = imgs.iter().map(|e| e.psnr).sum::<f64>() / imgs.len() as f64;
        let _ = writeln!(s, "{label} mean_psnr {m}");
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(o) = self.overlap {
            let _ = writeln!(s, "overlap {}", o.label());
        }
        if let Some(p) = &self.poses {
            let _ = writeln!(s, "rotation_error_deg mean {} median {}", p.rotation_mean, p.rotation_median);
            let _ = writeln!(s, "translation_error_deg mean {} median {}", p.translation_mean, p.translation_median);
            let _ = writeln!(s, "ate {}", p.ate);
            for (i, j, e) in &p.rotation_errors {
                let _ = writeln!(s, "pair {i} {j} rotation_error_deg {e}");
            }
            for (i, j, e) in &p.translation_errors {
                let _ = writeln!(s, "pair {i} {j} translation_error_deg {e}");
            }
        }
        write_images(&mut s, "context", &self.context_images);
        write_images(&mut s, "target", &self.target_images);
        s
    }
}

/// Pose of a ground-truth camera in the estimated world.
///
/// The est-to-gt similarity is fitted to all context cameras: rotation is the
/// chordal mean of the per-view alignments, then scale and offset come from
/// least squares on the camera centers. With a single context view the scale
/// defaults to one.
pub fn gt_pose_in_estimate(gt_target: &Pose, gt_ctx: &[Pose], est_ctx: &[Pose]) -> Result<Pose> {
    if gt_ctx.len() != est_ctx.len() || gt_ctx.is_empty() {
        return Err(Error::DimensionMismatch("context pose counts differ".into()));
    }
    // x_gt = s R x_est + t
    let sum: Matrix3<f64> = gt_ctx.iter().zip(est_ctx).map(|(g, e)| g.rotation().transpose() * e.rotation()).sum();
    let r = project_to_so3(&sum)?;
    let n = gt_ctx.len() as f64;
    let ce: Vec<Vector3<f64>> = est_ctx.iter().map(|p| r * p.center()).collect();
    let cg: Vec<Vector3<f64>> = gt_ctx.iter().map(Pose::center).collect();
    let me = ce.iter().sum::<Vector3<f64>>() / n;
    let mg = cg.iter().sum::<Vector3<f64>>() / n;
    let var: f64 = ce.iter().map(|c| (c - me).norm_squared()).sum();
    let cov: f64 = ce.iter().zip(&cg).map(|(e, g)| (e - me).dot(&(g - mg))).sum();
    let s = if var > 1e-18 && cov > 0.0 { cov / var } else { 1.0 };
    let t = mg - me * s;
    let (rt, tt) = (gt_target.rotation(), gt_target.translation());
    Pose::from_projected(&(rt * r), (rt * t + tt) / s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Render targets from the Gaussians of the k context views nearest to
    /// each target (by ground-truth center distance); `None` uses all.
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutput {
    pub report: EvalReport,
    pub pipeline: PipelineOutput,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_renders: Vec<ImageRgb>,
}

fn filter_views(scene: &GaussianScene, keep: &[usize]) -> Result<GaussianScene> {
    let mut per_view = vec![Vec::new(); scene.view_counts.len()];
    for g in &scene.gaussians {
        if keep.contains(&(g.view as usize)) {
            per_view[g.view as usize].push(*g);
        }
    }
    merge_scene(per_view)
}

/// Render a target view from the estimated scene at its ground-truth pose
/// (expressed in the estimated gauge).
pub fn render_target(
    scene: &GaussianScene,
    gt_target: &Pose,
    gt_ctx: &[Pose],
    est_ctx: &[Pose],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    top_k: Option<usize>,
) -> Result<ImageRgb> {
    let pose = gt_pose_in_estimate(gt_target, gt_ctx, est_ctx)?;
    let scene = match top_k {
        Some(k) if k < gt_ctx.len() => {
            let mut order: Vec<usize> = (0..gt_ctx.len()).collect();
            let d = |v: usize| (gt_ctx[v].center() - gt_target.center()).norm();
            order.sort_by(|a, b| d(*a).total_cmp(&d(*b)).then(a.cmp(b)));
            filter_views(scene, &order[..k.max(1)])?
        }
        _ => scene.clone(),
    };
    Ok(render(&scene, &pose, intr, cfg)?.color)
}

/// Run the pipeline on the context views and evaluate poses, re-rendered
/// contexts and held-out targets.
pub fn run_protocol(data: &SceneData, config: &PipelineConfig) -> Result<ProtocolOutput> {
    let context: Vec<usize> = (0..data.views.len()).filter(|&k| data.views[k].role == ViewRole::Context).collect();
    let targets: Vec<usize> = (0..data.views.len()).filter(|&k| data.views[k].role == ViewRole::Target).collect();
    let sub = data.subset(&context);
    let pipeline = run_in_memory(&sub, config)?;
    let mut report = pipeline.report.clone().unwrap_or_default();
    let gt_ctx: Option<Vec<Pose>> = sub.views.iter().map(|v| v.gt_pose).collect();
    let mut target_renders = Vec::new();
    for &t in &targets {
        let (Some(gt_t), Some(gt_ctx)) = (data.views[t].gt_pose, gt_ctx.as_ref()) else {
            return Err(Error::InvalidInput(format!("target view {t} needs ground-truth poses")));
        };
        let img = render_target(
            &pipeline.scene,
            &gt_t,
            gt_ctx,
            &pipeline.poses,
            &data.views[t].intr,
            &config.render,
            config.eval.top_k,
        )?;
        report.target_images.push(evaluate_images(t, &img, &data.views[t].image)?);
        target_renders.push(img);
    }
    Ok(ProtocolOutput { report, pipeline, context, targets, target_renders })
}
