//! CPU tile-based splatting.
//!
//! Gaussians are projected with the usual EWA linearization, sorted once per
//! frame front to back, and composited per pixel. Tiles only cull: each tile
//! keeps the globally sorted Gaussians whose cutoff ellipse reaches it.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::io::depth::{save_depth, DepthMap};
use crate::io::image::{save_image, ImageRgb};
use crate::scene::{Gaussian, GaussianScene};

/// Added to every projected covariance (pixels²) so sub-pixel Gaussians
/// still cover a pixel.
pub const COV2D_FLOOR: f64 = 0.3;
/// Per-Gaussian alpha ceiling.
pub const MAX_ALPHA: f64 = 0.999;
const MIN_COV_DET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Compositing stops once accumulated alpha reaches this value.
    pub alpha_threshold: f64,
    /// Mahalanobis radius beyond which a Gaussian contributes nothing.
    pub gaussian_cutoff: f64,
    pub background: [f64; 3],
    /// Gaussians with camera depth at or below this are dropped.
    pub near_clip: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_threshold: 0.9999,
            gaussian_cutoff: 3.0,
            background: [0.0; 3],
            near_clip: 0.01,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 1 || !(self.gaussian_cutoff > 0.0) || !(self.near_clip >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

/// A Gaussian in screen space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean: Vector2<f64>,
    /// Includes [`COV2D_FLOOR`].
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub valid: bool,
}

/// EWA projection of one Gaussian. `valid` is false when the mean is at or
/// behind the near plane or the cutoff ellipse misses the image.
pub fn project_gaussian(g: &Gaussian, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> Projected {
    let xc = pose.transform_point(&g.center);
    let z = xc.z;
    if !(z > cfg.near_clip) {
        return Projected { mean: Vector2::zeros(), cov: Matrix2::identity(), depth: z, valid: false };
    }
    let mean = Vector2::new(intr.fx * xc.x / z + intr.cx, intr.fy * xc.y / z + intr.cy);
    let j = Matrix2x3::new(
        intr.fx / z, 0.0, -intr.fx * xc.x / (z * z),
        0.0, intr.fy / z, -intr.fy * xc.y / (z * z),
    );
    let w = pose.rotation();
    let cam_cov = w * g.covariance * w.transpose();
    let cov = j * cam_cov * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
    let ex = cfg.gaussian_cutoff * cov[(0, 0)].sqrt();
    let ey = cfg.gaussian_cutoff * cov[(1, 1)].sqrt();
    let on_screen = mean.x + ex >= -0.5
        && mean.x - ex <= intr.width as f64 - 0.5
        && mean.y + ey >= -0.5
        && mean.y - ey <= intr.height as f64 - 0.5;
    Projected { mean, cov, depth: z, valid: on_screen && cov.iter().all(|v| v.is_finite()) }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub drawn: usize,
    pub culled: usize,
    pub singular: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ImageRgb,
    /// Alpha-weighted expected depth; 0 where nothing was drawn.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Rendered depth as a map; pixels without coverage are invalid.
    pub fn depth_map(&self) -> Result<DepthMap> {
        DepthMap::from_values(self.width(), self.height(), self.depth.clone())
    }

    /// Writes `<stem>.png` (or `.pfm`, by the extension of `color_path`),
    /// plus `<stem>_depth.pfm` and `<stem>_alpha.png` next to it.
    pub fn save(&self, color_path: &Path) -> Result<()> {
        save_image(&self.color, color_path)?;
        let stem = color_path.with_extension("");
        let stem = stem.to_string_lossy();
        save_depth(&self.depth_map()?, Path::new(&format!("{stem}_depth.pfm")))?;
        let alpha = ImageRgb::from_data(self.width(), self.height(), self.alpha.iter().map(|a| [*a; 3]).collect())?;
        save_image(&alpha, Path::new(&format!("{stem}_alpha.png")))
    }
}

/// Screen-space record used during compositing.
#[derive(Clone, Copy, Debug)]
struct Splat {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    // inclusive pixel bounds of the cutoff ellipse
    u0: i64,
    u1: i64,
    v0: i64,
    v1: i64,
}

/// Project, cull and sort front to back (ties by scene index).
fn prepare(scene: &GaussianScene, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> (Vec<Splat>, RenderStats) {
    let projected: Vec<(usize, Projected)> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(k, g)| (k, project_gaussian(g, pose, intr, cfg)))
        .collect();
    let mut stats = RenderStats::default();
    let mut keyed = Vec::new();
    for (k, p) in projected {
        if !p.valid {
            stats.culled += 1;
            continue;
        }
        let det = p.cov.determinant();
        if !(det >= MIN_COV_DET) {
            stats.singular += 1;
            continue;
        }
        let g = &scene.gaussians[k];
        // padded so the box is never tighter than the Mahalanobis test
        let ex = cfg.gaussian_cutoff * p.cov[(0, 0)].sqrt() + 1e-9;
        let ey = cfg.gaussian_cutoff * p.cov[(1, 1)].sqrt() + 1e-9;
        let conic = Matrix2::new(p.cov[(1, 1)], -p.cov[(0, 1)], -p.cov[(1, 0)], p.cov[(0, 0)]) / det;
        let splat = Splat {
            mean: p.mean,
            conic,
            depth: p.depth,
            opacity: g.opacity,
            color: g.color,
            u0: (p.mean.x - ex).ceil().max(0.0) as i64,
            u1: (p.mean.x + ex).floor().min(intr.width as f64 - 1.0) as i64,
            v0: (p.mean.y - ey).ceil().max(0.0) as i64,
            v1: (p.mean.y + ey).floor().min(intr.height as f64 - 1.0) as i64,
        };
        if splat.u0 > splat.u1 || splat.v0 > splat.v1 {
            stats.culled += 1;
            continue;
        }
        keyed.push((p.depth, k, splat));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    stats.drawn = keyed.len();
    (keyed.into_iter().map(|(_, _, s)| s).collect(), stats)
}

/// Composite one pixel over splats already in front-to-back order.
#[inline]
fn composite<'a>(u: f64, v: f64, splats: impl Iterator<Item = &'a Splat>, cfg: &RenderConfig) -> ([f64; 3], f64, f64) {
    let cutoff2 = cfg.gaussian_cutoff * cfg.gaussian_cutoff;
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut d = 0.0;
    for s in splats {
        let dx = u - s.mean.x;
        let dy = v - s.mean.y;
        let m = s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy;
        if m > cutoff2 {
            continue;
        }
        let a = (s.opacity * (-0.5 * m).exp()).clamp(0.0, MAX_ALPHA);
        let w = a * t;
        for ch in 0..3 {
            c[ch] += s.color[ch] * w;
        }
        d += s.depth * w;
        t *= 1.0 - a;
        if 1.0 - t >= cfg.alpha_threshold {
            break;
        }
    }
    let alpha = 1.0 - t;
    let color = [
        c[0] + t * cfg.background[0],
        c[1] + t * cfg.background[1],
        c[2] + t * cfg.background[2],
    ];
    let depth = if alpha > 0.0 { d / alpha.max(1e-12) } else { 0.0 };
    (color, depth, alpha)
}

pub fn render(scene: &GaussianScene, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> Result<RenderOutput> {
    cfg.validate()?;
    intr.validate()?;
    let (w, h) = (intr.width, intr.height);
    let (splats, stats) = prepare(scene, pose, intr, cfg);
    let ts = cfg.tile_size;
    let (tx, ty) = (w.div_ceil(ts), h.div_ceil(ts));

    type TilePixels = Vec<(usize, [f64; 3], f64, f64)>;
    let tiles: Vec<TilePixels> = (0..tx * ty)
        .into_par_iter()
        .map(|tile| {
            let (u_lo, v_lo) = ((tile % tx) * ts, (tile / tx) * ts);
            let (u_hi, v_hi) = ((u_lo + ts).min(w) as i64 - 1, (v_lo + ts).min(h) as i64 - 1);
            let local: Vec<&Splat> = splats
                .iter()
                .filter(|s| s.u1 >= u_lo as i64 && s.u0 <= u_hi && s.v1 >= v_lo as i64 && s.v0 <= v_hi)
                .collect();
            let mut out = Vec::with_capacity(ts * ts);
            for v in v_lo..=v_hi as usize {
                for u in u_lo..=u_hi as usize {
                    let (ui, vi) = (u as i64, v as i64);
                    let hits = local.iter().copied().filter(|s| s.u0 <= ui && ui <= s.u1 && s.v0 <= vi && vi <= s.v1);
                    let (c, d, a) = composite(u as f64, v as f64, hits, cfg);
                    out.push((v * w + u, c, d, a));
                }
            }
            out
        })
        .collect();

    let mut color = ImageRgb::new(w, h, cfg.background);
    let mut depth = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    for tile in tiles {
        for (k, c, d, a) in tile {
            color.data[k] = c;
            depth[k] = d;
            alpha[k] = a;
        }
    }
    Ok(RenderOutput { color, depth, alpha, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::testutil::random_rotation;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr64() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn gaussian(center: Vector3<f64>, cov: Matrix3<f64>, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian { center, opacity, covariance: cov, color, view: 0, pixel: [0, 0] }
    }

    #[test]
    fn isotropic_on_axis() {
        let (s, d) = (0.05, 4.0);
        let intr = intr64();
        let g = gaussian(Vector3::new(0.0, 0.0, d), Matrix3::identity() * s * s, 1.0, [1.0; 3]);
        let p = project_gaussian(&g, &Pose::identity(), &intr, &RenderConfig::default());
        assert!(p.valid);
        let expected = (intr.fx * s / d).powi(2);
        let raw = p.cov - Matrix2::identity() * COV2D_FLOOR;
        assert!((raw - Matrix2::identity() * expected).abs().max() < 1e-6);
        assert_eq!(p.mean, Vector2::new(intr.cx, intr.cy));
    }

    #[test]
    fn behind_camera_invalid() {
        let g = gaussian(Vector3::new(0.0, 0.0, -1.0), Matrix3::identity() * 0.01, 1.0, [1.0; 3]);
        assert!(!project_gaussian(&g, &Pose::identity(), &intr64(), &RenderConfig::default()).valid);
        let off = gaussian(Vector3::new(50.0, 0.0, 1.0), Matrix3::identity() * 0.01, 1.0, [1.0; 3]);
        assert!(!project_gaussian(&off, &Pose::identity(), &intr64(), &RenderConfig::default()).valid);
    }

    #[test]
    fn doubling_fx_doubles_x_std() {
        let g = gaussian(Vector3::new(0.3, -0.2, 3.0), Matrix3::from_diagonal(&Vector3::new(0.02, 0.01, 0.03)), 1.0, [1.0; 3]);
        let a = intr64();
        let b = CameraIntrinsics { fx: 2.0 * a.fx, ..a };
        let cfg = RenderConfig::default();
        let pa = project_gaussian(&g, &Pose::identity(), &a, &cfg).cov - Matrix2::identity() * COV2D_FLOOR;
        let pb = project_gaussian(&g, &Pose::identity(), &b, &cfg).cov - Matrix2::identity() * COV2D_FLOOR;
        assert!((pb[(0, 0)].sqrt() - 2.0 * pa[(0, 0)].sqrt()).abs() < 1e-12);
        assert!((pb[(1, 1)] - pa[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_is_background() {
        let cfg = RenderConfig { background: [0.2, 0.4, 0.6], ..RenderConfig::default() };
        let out = render(&GaussianScene::from_gaussians(vec![]), &Pose::identity(), &intr64(), &cfg).unwrap();
        assert!(out.color.data.iter().all(|c| *c == [0.2, 0.4, 0.6]));
        assert!(out.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn single_gaussian_hand_composite() {
        let intr = intr64();
        let bg = [0.1, 0.2, 0.3];
        let c = [0.9, 0.5, 0.2];
        // centre projects exactly onto pixel (10, 20)
        let z = 5.0;
        let center = Vector3::new((10.0 - intr.cx) * z / intr.fx, (20.0 - intr.cy) * z / intr.fy, z);
        let g = gaussian(center, Matrix3::identity() * 1e-4, 0.8, c);
        let cfg = RenderConfig { background: bg, ..RenderConfig::default() };
        let out = render(&GaussianScene::from_gaussians(vec![g]), &Pose::identity(), &intr, &cfg).unwrap();
        let px = out.color.get(10, 20);
        for ch in 0..3 {
            assert!((px[ch] - (0.8 * c[ch] + 0.2 * bg[ch])).abs() < 1e-12);
        }
        assert!((out.alpha[20 * 64 + 10] - 0.8).abs() < 1e-12);
        assert!((out.depth[20 * 64 + 10] - z).abs() < 1e-12);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
        let gs = (0..n)
            .map(|_| {
                let center = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(1.0..5.0));
                let r = random_rotation(rng);
                let s = Vector3::new(rng.random_range(0.01..0.2), rng.random_range(0.01..0.2), rng.random_range(0.01..0.2));
                let cov = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
                let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                gaussian(center, cov, rng.random_range(0.05..1.0), color)
            })
            .collect();
        GaussianScene::from_gaussians(gs)
    }

    /// Per pixel, every Gaussian in full sorted order; no tiles, no boxes.
    fn brute_force(scene: &GaussianScene, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut list: Vec<(f64, usize, Projected)> = scene
            .gaussians
            .iter()
            .enumerate()
            .map(|(k, g)| (k, project_gaussian(g, pose, intr, cfg)))
            .filter(|(_, p)| p.depth > cfg.near_clip && p.cov.determinant() >= MIN_COV_DET)
            .map(|(k, p)| (p.depth, k, p))
            .collect();
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut color = Vec::new();
        let mut alpha = Vec::new();
        for v in 0..intr.height {
            for u in 0..intr.width {
                let mut t = 1.0;
                let mut c = [0.0; 3];
                for (_, k, p) in &list {
                    let dlt = Vector2::new(u as f64, v as f64) - p.mean;
                    let m = (dlt.transpose() * p.cov.try_inverse().unwrap() * dlt)[0];
                    if m > cfg.gaussian_cutoff * cfg.gaussian_cutoff {
                        continue;
                    }
                    let g = &scene.gaussians[*k];
                    let a = (g.opacity * (-0.5 * m).exp()).min(MAX_ALPHA);
                    for ch in 0..3 {
                        c[ch] += g.color[ch] * a * t;
                    }
                    t *= 1.0 - a;
                    if 1.0 - t >= cfg.alpha_threshold {
                        break;
                    }
                }
                color.push([c[0] + t * cfg.background[0], c[1] + t * cfg.background[1], c[2] + t * cfg.background[2]]);
                alpha.push(1.0 - t);
            }
        }
        (color, alpha)
    }

    #[test]
    fn tiled_matches_brute_force() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=200);
            let scene = random_scene(&mut rng, n);
            let cfg = RenderConfig { background: [0.3, 0.1, 0.7], tile_size: 1 + (seed as usize % 20), ..RenderConfig::default() };
            let out = render(&scene, &Pose::identity(), &intr64(), &cfg).unwrap();
            let (color, alpha) = brute_force(&scene, &Pose::identity(), &intr64(), &cfg);
            for k in 0..color.len() {
                for ch in 0..3 {
                    assert!((out.color.data[k][ch] - color[k][ch]).abs() < 1e-6, "seed {seed} pixel {k}");
                }
                assert!((out.alpha[k] - alpha[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 150);
        let cfg = RenderConfig::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| render(&scene, &Pose::identity(), &intr64(), &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn adding_a_gaussian_never_lowers_alpha() {
        // no early stop, so accumulation is strictly multiplicative
        let cfg = RenderConfig { alpha_threshold: 1.0, ..RenderConfig::default() };
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let mut scene = random_scene(&mut rng, 60);
            let before = render(&scene, &Pose::identity(), &intr64(), &cfg).unwrap();
            let extra = random_scene(&mut rng, 1).gaussians[0];
            scene.gaussians.insert(rng.random_range(0..scene.gaussians.len()), extra);
            let after = render(&scene, &Pose::identity(), &intr64(), &cfg).unwrap();
            for (a, b) in before.alpha.iter().zip(&after.alpha) {
                assert!(b >= &(a - 1e-15), "{a} -> {b}");
            }
        }
    }

    #[test]
    fn singular_covariance_skipped() {
        let intr = intr64();
        let mut g = gaussian(Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 0.01, 0.5, [1.0; 3]);
        g.covariance = Matrix3::from_element(f64::NAN);
        let scene = GaussianScene::from_gaussians(vec![g]);
        let out = render(&scene, &Pose::identity(), &intr, &RenderConfig::default()).unwrap();
        assert_eq!(out.stats.drawn, 0);
        assert_eq!(out.stats.culled + out.stats.singular, 1);
    }

    #[test]
    fn save_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = render(&random_scene(&mut rng, 20), &Pose::identity(), &intr64(), &RenderConfig::default()).unwrap();
        out.save(&dir.path().join("view.png")).unwrap();
        for f in ["view.png", "view_depth.pfm", "view_alpha.png"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
