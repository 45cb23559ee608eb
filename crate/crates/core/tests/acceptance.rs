//! Acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line straight to stdout so the verdicts show
//! up even when the harness captures test output.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatalign::coarse::{estimate_relative_pose, lift_matches, refine_from_hypothesis, rigid_fit_weighted, LiftedMatches, RansacParams};
use splatalign::confvol::{
    builtin_features, geometry_confidence, make_candidates, view_confidence, AdditiveAggregator, CostVolume, SweepView, VolumeKind,
};
use splatalign::evalsynth::{evaluate_images, evaluate_poses, generate, render_target, write_bundle, SynthBundle, SynthSpec};
use splatalign::geom::{axis_angle, project, relative_pose, rotation_geodesic_deg, CameraIntrinsics, Pose};
use splatalign::io::{load_manifest, load_scene_data, CorrespondenceSet, DepthMap, FeatureMap, Match, SceneData};
use splatalign::pipeline::{run_in_memory, run_persisted, stage_confidence, stage_scene, PipelineConfig};
use splatalign::raster::{render, RenderConfig, COV2D_FLOOR, MAX_ALPHA};
use splatalign::refine::{fine_align, loss_2d3d, loss_3d3d, Problem, RefineParams, Variables};
use splatalign::scene::{Gaussian, GaussianScene};
use splatalign::sync::{sync_rotations, synchronize, PoseEdge, PoseGraph, SyncParams};

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_pose<R: Rng>(rng: &mut R) -> Pose {
    let r = axis_angle(&unit(rng), rng.random_range(-3.1..3.1));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Pose::new(r, t).unwrap()
}

// ---------------------------------------------------------------- 1

fn small_cam() -> CameraIntrinsics {
    CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap()
}

fn smooth_depth(rng: &mut ChaCha8Rng, intr: &CameraIntrinsics) -> DepthMap {
    let (a, b, c) = (rng.random_range(3.0..5.0), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let ph = rng.random_range(0.0..6.0);
    let vals = (0..intr.width * intr.height)
        .map(|k| {
            let (u, v) = ((k % intr.width) as f64, (k / intr.width) as f64);
            a + b * u + c * v + 0.2 * (0.2 * u + 0.3 * v + ph).sin()
        })
        .collect();
    DepthMap::from_values(intr.width, intr.height, vals).unwrap()
}

struct GradCase {
    depths: Vec<DepthMap>,
    intr: Vec<CameraIntrinsics>,
    matches: Vec<CorrespondenceSet>,
    vars: Variables,
}

fn grad_case(rng: &mut ChaCha8Rng, factor: usize) -> GradCase {
    let n = 3;
    let intr = vec![small_cam(); n];
    let depths: Vec<DepthMap> = (0..n).map(|_| smooth_depth(rng, &intr[0])).collect();
    let mut matches = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let ms = (0..8)
                .map(|_| Match {
                    p: Vector2::new(rng.random_range(0.0..31.0), rng.random_range(0.0..23.0)),
                    q: Vector2::new(rng.random_range(0.0..31.0), rng.random_range(0.0..23.0)),
                    confidence: rng.random_range(0.5..1.0),
                })
                .collect();
            matches.push(CorrespondenceSet { i, j, matches: ms });
        }
    }
    let base: Vec<Pose> = (0..n)
        .map(|k| {
            if k == 0 {
                return Pose::identity();
            }
            let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
            Pose::new(axis_angle(&unit(rng), rng.random_range(0.0..0.2)), t).unwrap()
        })
        .collect();
    let mut vars = Variables::new(base, &depths, factor).unwrap();
    let x: Vec<f64> = vars.pack().iter().map(|_| rng.random_range(-0.05..0.05)).collect();
    vars.unpack(&x);
    GradCase { depths, intr, matches, vars }
}

fn central_difference(f: &dyn Fn(&Variables) -> f64, vars: &Variables, h: f64) -> Vec<f64> {
    let x0 = vars.pack();
    let mut probe = vars.clone();
    (0..x0.len())
        .map(|k| {
            let mut x = x0.clone();
            x[k] += h;
            probe.unpack(&x);
            let fp = f(&probe);
            x[k] -= 2.0 * h;
            probe.unpack(&x);
            (fp - f(&probe)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Some reprojection residual lies within `margin` px of the Huber kink,
/// where the loss is not twice differentiable and differences are unreliable.
fn near_kink(c: &GradCase, delta: f64, margin: f64) -> bool {
    let poses = c.vars.poses().unwrap();
    let depths = c.vars.refined_depths(&c.depths).unwrap();
    c.matches.iter().any(|s| {
        s.matches.iter().any(|m| {
            let Some(d) = depths[s.i].sample(m.p.x, m.p.y) else { return false };
            let xw = poses[s.i].inverse().transform_point(&(c.intr[s.i].ray(m.p.x, m.p.y) * d));
            match project(&poses[s.j].transform_point(&xw), &c.intr[s.j]) {
                Ok((px, _)) => ((px - m.q).norm() - delta).abs() < margin,
                Err(_) => false,
            }
        })
    })
}

#[test]
fn criterion_01_gradients() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = grad_case(&mut rng, [1, 4, 8][seed as usize % 3]);
        let delta = [1.0, 5.0, 20.0][seed as usize % 3];
        if near_kink(&c, delta, 10.0 * h) {
            continue;
        }
        let p = Problem::new(&c.depths, &c.intr, &c.matches).unwrap();
        let a = loss_2d3d(&p, &c.vars, delta).unwrap();
        let n = central_difference(&|v| loss_2d3d(&p, v, delta).unwrap().value, &c.vars, h);
        worst = worst.max(relative_error(&a.grad.pack(), &n));
        let b = loss_3d3d(&p, &c.vars).unwrap();
        let n = central_difference(&|v| loss_3d3d(&p, v).unwrap().value, &c.vars, h);
        worst = worst.max(relative_error(&b.grad.pack(), &n));
        checked += 1;
    }
    verdict(1, worst < 1e-4, &format!("{checked} configurations, worst relative error {worst:.2e}"));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_losses_vanish_at_truth() {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let b = generate(&SynthSpec::default(), seed).unwrap();
        let depths: Vec<DepthMap> = b.data.views.iter().map(|v| v.depth.clone()).collect();
        let intr: Vec<CameraIntrinsics> = b.data.views.iter().map(|v| v.intr).collect();
        let p = Problem::new(&depths, &intr, &b.data.pairs).unwrap();
        let vars = Variables::new(b.gt_poses.clone(), &depths, 8).unwrap();
        worst = worst.max(loss_2d3d(&p, &vars, 1.0).unwrap().value);
        worst = worst.max(loss_3d3d(&p, &vars).unwrap().value);
    }
    verdict(2, worst < 1e-10, &format!("10 seeds, largest loss {worst:.2e}"));
}

// ---------------------------------------------------------------- 3

fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let gs = (0..n)
        .map(|_| {
            let center = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(1.0..5.0));
            let r = axis_angle(&unit(rng), rng.random_range(-3.1..3.1));
            let s = Vector3::new(rng.random_range(0.01..0.2), rng.random_range(0.01..0.2), rng.random_range(0.01..0.2));
            let cov = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
            Gaussian {
                center,
                opacity: rng.random_range(0.05..0.99),
                covariance: (cov + cov.transpose()) * 0.5,
                color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                view: 0,
                pixel: [0, 0],
            }
        })
        .collect();
    GaussianScene::from_gaussians(gs)
}

/// Every pixel visits every Gaussian in global depth order; no tiles, no
/// culling, projection written out independently of the renderer.
#[allow(clippy::needless_range_loop)]
fn composite_per_pixel(scene: &GaussianScene, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> Vec<[f64; 3]> {
    let mut list: Vec<(f64, usize, Vector2<f64>, Matrix2<f64>)> = Vec::new();
    for (k, g) in scene.gaussians.iter().enumerate() {
        let x = pose.transform_point(&g.center);
        if x.z <= cfg.near_clip {
            continue;
        }
        let mean = Vector2::new(intr.fx * x.x / x.z + intr.cx, intr.fy * x.y / x.z + intr.cy);
        let j = Matrix2x3::new(
            intr.fx / x.z, 0.0, -intr.fx * x.x / (x.z * x.z),
            0.0, intr.fy / x.z, -intr.fy * x.y / (x.z * x.z),
        );
        let cov = j * pose.rotation() * g.covariance * pose.rotation().transpose() * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
        list.push((x.z, k, mean, cov.try_inverse().unwrap()));
    }
    list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut color = Vec::with_capacity(intr.width * intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (_, k, mean, inv) in &list {
                let d = Vector2::new(u as f64, v as f64) - mean;
                let m = (d.transpose() * inv * d)[0];
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
            color.push([0, 1, 2].map(|ch| c[ch] + t * cfg.background[ch]));
        }
    }
    color
}

#[test]
fn criterion_03_tiled_renderer_matches_per_pixel_compositor() {
    let intr = CameraIntrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(1..=200);
        let scene = random_gaussians(&mut rng, n);
        let pose = Pose::new(axis_angle(&unit(&mut rng), 0.1), Vector3::new(0.1, -0.1, 0.2)).unwrap();
        let cfg = RenderConfig { background: [0.3, 0.1, 0.7], tile_size: 1 + seed as usize % 20, ..RenderConfig::default() };
        let out = render(&scene, &pose, &intr, &cfg).unwrap();
        let oracle = composite_per_pixel(&scene, &pose, &intr, &cfg);
        for (a, b) in out.color.data.iter().zip(&oracle) {
            for ch in 0..3 {
                worst = worst.max((a[ch] - b[ch]).abs());
            }
        }
    }
    verdict(3, worst < 1e-6, &format!("20 seeds, worst channel difference {worst:.2e}"));
}

// ---------------------------------------------------------------- 4

struct PairCase {
    intr: CameraIntrinsics,
    depth_i: DepthMap,
    depth_j: DepthMap,
    gt: Pose,
    matches: CorrespondenceSet,
}

/// Two views of the plane z = 3 (camera-i frame); the first
/// `floor(outlier_frac * n)` matches get random targets.
fn plane_pair(rng: &mut ChaCha8Rng, n: usize, outlier_frac: f64) -> PairCase {
    let intr = CameraIntrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap();
    let axis = Vector3::new(rng.random_range(-0.3..0.3), 1.0, rng.random_range(-0.3..0.3));
    let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let gt = Pose::new(axis_angle(&axis, rng.random_range(5.0f64..20.0).to_radians()), t).unwrap();
    let depth_i = DepthMap::constant(intr.width, intr.height, 3.0).unwrap();
    let inv = gt.inverse();
    let zj = (0..intr.width * intr.height)
        .map(|k| {
            let d = intr.ray((k % intr.width) as f64, (k / intr.width) as f64);
            let z = (3.0 - inv.translation().z) / (inv.rotation() * d).z;
            if z > 0.0 { z } else { 0.0 }
        })
        .collect();
    let depth_j = DepthMap::from_values(intr.width, intr.height, zj).unwrap();
    let mut ms = Vec::new();
    let mut used = HashSet::new();
    while ms.len() < n {
        let (u, v) = (rng.random_range(0..intr.width), rng.random_range(0..intr.height));
        if !used.insert((u, v)) {
            continue;
        }
        let x = intr.ray(u as f64, v as f64) * 3.0;
        let Ok((q, _)) = project(&gt.transform_point(&x), &intr) else { continue };
        if !intr.contains(&q) || depth_j.sample(q.x, q.y).is_none() {
            continue;
        }
        ms.push(Match { p: Vector2::new(u as f64, v as f64), q, confidence: rng.random_range(0.5..1.0) });
    }
    for m in ms.iter_mut().take((outlier_frac * n as f64).floor() as usize) {
        m.q = Vector2::new(rng.random_range(0.0..(intr.width - 1) as f64), rng.random_range(0.0..(intr.height - 1) as f64));
    }
    PairCase { intr, depth_i, depth_j, gt, matches: CorrespondenceSet { i: 0, j: 1, matches: ms } }
}

/// Best-scoring hypothesis over all 3-subsets in lexicographic order, first
/// one kept on ties.
fn enumerate_all(data: &LiftedMatches, thr: f64) -> Option<(Pose, f64)> {
    let n = data.len();
    let mut best: Option<(Pose, f64)> = None;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let p = [data.xi[a], data.xi[b], data.xi[c]];
                let q = [data.xj[a], data.xj[b], data.xj[c]];
                let Ok(pose) = rigid_fit_weighted(&p, &q, &[1.0; 3]) else { continue };
                let score: f64 = (0..n)
                    .filter(|&k| (pose.transform_point(&data.xi[k]) - data.xj[k]).norm() <= thr)
                    .map(|k| data.conf[k])
                    .sum();
                if best.as_ref().is_none_or(|b| score > b.1) {
                    best = Some((pose, score));
                }
            }
        }
    }
    best
}

#[test]
fn criterion_04_ransac_robustness() {
    let mut recovered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let s = plane_pair(&mut rng, 100, 0.4);
        let p = RansacParams { seed, ..RansacParams::for_median_depth(3.0) };
        if let Ok(est) = estimate_relative_pose(&s.matches, &s.depth_i, &s.depth_j, &s.intr, &s.intr, &p) {
            if rotation_geodesic_deg(est.pose.rotation(), s.gt.rotation()) < 0.1 {
                recovered += 1;
            }
        }
    }
    let mut equivalent = 0;
    let trials = 30;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.random_range(6..=12);
        let s = plane_pair(&mut rng, n, 0.34);
        let p = RansacParams { seed, min_inliers: 3, ..RansacParams::for_median_depth(3.0) };
        let Ok(est) = estimate_relative_pose(&s.matches, &s.depth_i, &s.depth_j, &s.intr, &s.intr, &p) else { continue };
        let data = lift_matches(&s.matches, &s.depth_i, &s.depth_j, &s.intr, &s.intr);
        let Some((hyp, score)) = enumerate_all(&data, p.inlier_threshold) else { continue };
        let (pose, mask, _) = refine_from_hypothesis(&data, hyp, p.inlier_threshold);
        let full: Vec<bool> = (0..s.matches.matches.len())
            .map(|k| data.index.iter().position(|&x| x == k).is_some_and(|d| mask[d]))
            .collect();
        if est.hypothesis_score == score && est.pose == pose && est.inlier_mask == full {
            equivalent += 1;
        }
    }
    let pass = recovered >= 99 && equivalent == trials;
    verdict(4, pass, &format!("{recovered}/100 recovered at 40% outliers, {equivalent}/{trials} identical to exhaustive enumeration"));
}

// ---------------------------------------------------------------- 5

fn complete_graph(gt: &[Pose]) -> PoseGraph {
    let mut edges = Vec::new();
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            edges.push(PoseEdge { i, j, pose: relative_pose(&gt[i], &gt[j]), weight: 1.0 });
        }
    }
    PoseGraph::new(gt.len(), edges).unwrap()
}

fn gauge_fixed(gt: &[Pose]) -> Vec<Pose> {
    let inv0 = gt[0].inverse();
    gt.iter().map(|p| p.compose(&inv0)).collect()
}

fn mean_rotation_error(est: &[Matrix3<f64>], gt: &[Pose]) -> f64 {
    let gt = gauge_fixed(gt);
    est.iter().zip(&gt).map(|(a, b)| rotation_geodesic_deg(a, b.rotation())).sum::<f64>() / est.len() as f64
}

/// Rotations chained along a breadth-first tree from view 0.
fn chained_rotations(graph: &PoseGraph) -> Vec<Matrix3<f64>> {
    let mut rot: Vec<Option<Matrix3<f64>>> = vec![None; graph.n];
    rot[0] = Some(Matrix3::identity());
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        let ru = rot[u].unwrap();
        for e in &graph.edges {
            if e.i == u && rot[e.j].is_none() {
                rot[e.j] = Some(e.pose.rotation() * ru);
                queue.push_back(e.j);
            } else if e.j == u && rot[e.i].is_none() {
                rot[e.i] = Some(e.pose.rotation().transpose() * ru);
                queue.push_back(e.i);
            }
        }
    }
    rot.into_iter().map(Option::unwrap).collect()
}

#[test]
fn criterion_05_synchronization() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut exact_worst: f64 = 0.0;
    for n in [3, 4, 6, 9, 12] {
        let gt: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let out = synchronize(&complete_graph(&gt), &SyncParams::default()).unwrap();
        for (a, b) in out.poses.iter().zip(gauge_fixed(&gt)) {
            exact_worst = exact_worst.max(rotation_geodesic_deg(a.rotation(), b.rotation()));
        }
    }
    let (mut synced, mut chained) = (0.0, 0.0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5100 + seed);
        let gt: Vec<Pose> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let mut g = complete_graph(&gt);
        for e in &mut g.edges {
            let r = axis_angle(&unit(&mut rng), 2f64.to_radians()) * e.pose.rotation();
            e.pose = Pose::from_projected(&r, *e.pose.translation()).unwrap();
        }
        let rot = sync_rotations(&g, &SyncParams { seed, ..SyncParams::default() }).unwrap();
        synced += mean_rotation_error(&rot.rotations, &gt) / 50.0;
        chained += mean_rotation_error(&chained_rotations(&g), &gt) / 50.0;
    }
    let pass = exact_worst < 1e-6 && synced <= chained;
    verdict(5, pass, &format!("consistent graphs worst {exact_worst:.2e} deg; 2 deg noise: synced {synced:.3} vs chained {chained:.3} deg"));
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_confidence_behavior() {
    let cfg = PipelineConfig::default();
    let k = cfg.confidence.k;
    let lo = 1.0 / k as f64;

    // uniform fibers, whatever their level
    let mut uniform_exact = true;
    for level in [0.0, -0.7, 0.3, 1.0] {
        let vol = CostVolume { h: 2, w: 3, k, kind: VolumeKind::Aggregated, data: vec![level; 6 * k], invalid: vec![false; 6] };
        let c = geometry_confidence(&vol, cfg.confidence.tau).unwrap();
        uniform_exact &= c.data.iter().all(|v| *v == lo);
    }

    let mut in_range = true;
    let (mut corrupted, mut not_increased) = (0usize, 0usize);
    for seed in 0..3u64 {
        // fine multi-wave texture, and images ray traced from the analytic
        // world rather than splatted, so every view agrees to sub-pixel level
        let spec = SynthSpec { texture_period: [0.5, 1.0], texture_waves: 8, ..SynthSpec::default() };
        let mut b = generate(&spec, seed).unwrap();
        for (k, v) in b.data.views.iter_mut().enumerate() {
            v.image = b.world.trace_view(&b.gt_poses[k], &v.intr).unwrap().1;
        }
        let data = &b.data;
        let depths: Vec<DepthMap> = data.views.iter().map(|v| v.depth.clone()).collect();
        let maps = stage_confidence(data, &b.gt_poses, &depths, &cfg).unwrap();
        in_range &= maps.iter().flat_map(|m| &m.data).all(|v| *v >= lo && *v < 1.0);

        let feats: Vec<FeatureMap> = data.views.iter().map(|v| builtin_features(&v.image)).collect();
        let cands = make_candidates(data.near, data.far, k).unwrap();
        let agg = AdditiveAggregator { beta: cfg.confidence.beta };
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        for r in 0..data.views.len() {
            let sweep = |i: usize| SweepView { features: &feats[i], pose: &b.gt_poses[i], intr: &data.views[i].intr };
            let sources: Vec<SweepView> = (0..data.views.len()).filter(|&i| i != r).map(sweep).collect();
            let base = &depths[r];
            let (gw, gh) = (feats[r].w, feats[r].h);
            let (sx, sy) = (base.width / gw, base.height / gh);
            // move whole grid cells so the cell-centre sample lands exactly
            // on a candidate at least three bins away
            let mut vals = base.values().to_vec();
            let mut picked = Vec::new();
            for y in 0..gh {
                for x in 0..gw {
                    let (u, v) = ((x as f64 + 0.5) * sx as f64 - 0.5, (y as f64 + 0.5) * sy as f64 - 0.5);
                    let Some(z) = base.sample(u, v) else { continue };
                    if !rng.random_bool(0.3) {
                        continue;
                    }
                    let idx = cands.nearest(z) as i64;
                    let shift = rng.random_range(3..=8) * if rng.random_bool(0.5) { 1 } else { -1 };
                    let to = if (0..k as i64).contains(&(idx + shift)) { idx + shift } else { idx - shift };
                    let zc = cands.values()[to as usize];
                    for py in y * sy..(y + 1) * sy {
                        for px in x * sx..(x + 1) * sx {
                            vals[py * base.width + px] = zc;
                        }
                    }
                    picked.push((x, y));
                }
            }
            let bad = DepthMap::from_values(base.width, base.height, vals).unwrap();
            let before = view_confidence(sweep(r), &sources, base, &cands, &agg, cfg.confidence.tau).unwrap();
            let after = view_confidence(sweep(r), &sources, &bad, &cands, &agg, cfg.confidence.tau).unwrap();
            for (x, y) in picked {
                corrupted += 1;
                if after.get(x, y) <= before.get(x, y) {
                    not_increased += 1;
                }
            }
        }
    }
    let frac = not_increased as f64 / corrupted.max(1) as f64;
    let pass = uniform_exact && in_range && corrupted > 0 && frac >= 0.9;
    verdict(
        6,
        pass,
        &format!("range ok {in_range}, uniform fiber exact {uniform_exact}, not increased at {not_increased}/{corrupted} corrupted cells ({:.1}%)", 100.0 * frac),
    );
}

// ---------------------------------------------------------------- 7, 8

/// Three context views plus one held-out target on a box-free room.
fn recovery_scene(seed: u64) -> SynthBundle {
    let spec = SynthSpec { views: 4, boxes: 0, matches_per_pair: 200, targets: vec![1], ..SynthSpec::default() };
    generate(&spec, seed).unwrap()
}

const CONTEXT: [usize; 3] = [0, 2, 3];
const TARGET: usize = 1;

/// 2 deg about a random axis and a center shift of 5% of the camera spread
/// on every pose; every depth scaled by 1.05.
fn perturb(data: &SceneData, gt: &[Pose], seed: u64) -> (SceneData, Vec<Pose>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let c0 = gt[0].center();
    let spread = gt.iter().map(|p| (p.center() - c0).norm()).fold(0.0, f64::max);
    let poses = gt
        .iter()
        .map(|p| {
            let r = axis_angle(&unit(&mut rng), 2f64.to_radians()) * p.rotation();
            let c = p.center() + unit(&mut rng) * 0.05 * spread;
            Pose::new(r, -(r * c)).unwrap()
        })
        .collect();
    let mut scaled = data.clone();
    for v in &mut scaled.views {
        v.depth = v.depth.map_valid(|z| z * 1.05).unwrap();
    }
    (scaled, poses)
}

fn target_psnr(b: &SynthBundle, ctx: &SceneData, gt_ctx: &[Pose], poses: &[Pose], depths: &[DepthMap], cfg: &PipelineConfig) -> f64 {
    let conf = stage_confidence(ctx, poses, depths, cfg).unwrap();
    let scene = stage_scene(ctx, poses, depths, &conf, cfg).unwrap();
    let target = &b.data.views[TARGET];
    let img = render_target(&scene, &b.gt_poses[TARGET], gt_ctx, poses, &target.intr, &cfg.render, None).unwrap();
    evaluate_images(TARGET, &img, &target.image).unwrap().psnr
}

struct Recovery {
    rotation: f64,
    gain: f64,
}

fn recovery_run(seed: u64, tweak: impl Fn(&mut RefineParams)) -> Recovery {
    let b = recovery_scene(seed);
    let ctx = b.data.subset(&CONTEXT);
    let gt: Vec<Pose> = CONTEXT.iter().map(|&k| b.gt_poses[k]).collect();
    let (scaled, init) = perturb(&ctx, &gt, seed);
    let cfg = PipelineConfig::default();
    let mut params = cfg.refine_params(&scaled);
    params.steps = 1000;
    tweak(&mut params);
    let out = fine_align(&scaled, &init, &params).unwrap();
    let rotation = evaluate_poses(&out.poses, &gt).unwrap().rotation_mean;
    let d0: Vec<DepthMap> = scaled.views.iter().map(|v| v.depth.clone()).collect();
    let before = target_psnr(&b, &scaled, &gt, &init, &d0, &cfg);
    let after = target_psnr(&b, &scaled, &gt, &out.poses, &out.depths, &cfg);
    Recovery { rotation, gain: after - before }
}

fn recovery_counts(runs: &[Recovery]) -> (usize, usize) {
    (runs.iter().filter(|r| r.rotation < 0.5).count(), runs.iter().filter(|r| r.gain >= 3.0).count())
}

fn recovery_batch(tweak: impl Fn(&mut RefineParams) + Sync) -> Vec<Recovery> {
    use rayon::prelude::*;
    (0..10u64).into_par_iter().map(|s| recovery_run(s, &tweak)).collect()
}

#[test]
fn criterion_07_fine_alignment_recovery() {
    let runs = recovery_batch(|_| {});
    let (rot_ok, psnr_ok) = recovery_counts(&runs);
    let rots: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.rotation)).collect();
    let gains: Vec<String> = runs.iter().map(|r| format!("{:+.1}", r.gain)).collect();
    verdict(
        7,
        rot_ok >= 8 && psnr_ok >= 8,
        &format!("rotation < 0.5 deg in {rot_ok}/10 [{}], PSNR gain >= 3 dB in {psnr_ok}/10 [{}]", rots.join(" "), gains.join(" ")),
    );
}

#[test]
fn criterion_08_loss_ablation() {
    use rayon::prelude::*;
    // sparse correspondences: 20 per pair
    let outcomes: Vec<Option<bool>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let spec = SynthSpec { views: 3, matches_per_pair: 20, min_pair_matches: 12, ..SynthSpec::default() };
            let b = generate(&spec, seed).unwrap();
            let (data, init) = perturb(&b.data, &b.gt_poses, seed);
            let mut params = PipelineConfig::default().refine_params(&data);
            let full = fine_align(&data, &init, &params).ok()?;
            params.weights.lambda_3d3d = 0.0;
            let ablated = fine_align(&data, &init, &params).ok()?;
            Some(ablated.report.final_components.l2d3d >= full.report.final_components.l2d3d)
        })
        .collect();
    let worse = outcomes.iter().filter(|o| **o == Some(true)).count();
    let part_a = worse >= 14;

    let runs = recovery_batch(|p| p.weights.lambda_2d3d = 0.0);
    let (rot_ok, psnr_ok) = recovery_counts(&runs);
    let part_b = !(rot_ok >= 8 && psnr_ok >= 8);
    verdict(
        8,
        part_a && part_b,
        &format!(
            "without 3D-3D term: equal-or-worse reprojection loss in {worse}/20; without reprojection term: rotation ok {rot_ok}/10, PSNR gain ok {psnr_ok}/10 (should miss a threshold)"
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_end_to_end_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for views in [2usize, 6, 12] {
        let spec = SynthSpec { views, ..SynthSpec::default() };
        let bundle = generate(&spec, 9).unwrap();
        let manifest = write_bundle(&bundle, &tmp.path().join(format!("scene{views}"))).unwrap();
        let data = load_scene_data(&load_manifest(&manifest).unwrap()).unwrap();
        let cfg = PipelineConfig { seed: 9, ..PipelineConfig::default() };
        let report = |dir: &Path| {
            let out = run_persisted(&data, &cfg, dir, false).unwrap();
            (out.poses, std::fs::read(dir.join("report.txt")).unwrap(), out.report.and_then(|r| r.poses).map(|p| p.ate))
        };
        let (pa, ra, ate) = report(&tmp.path().join(format!("a{views}")));
        let (pb, rb, _) = report(&tmp.path().join(format!("b{views}")));
        let text = String::from_utf8_lossy(&ra);
        let emitted = ate.is_some_and(f64::is_finite) && text.lines().any(|l| l.starts_with("ate "));
        let identical = pa == pb && ra == rb;
        pass &= emitted && identical;
        details.push(format!("{views} views: ate {:.2e} identical {identical}", ate.unwrap_or(f64::NAN)));
    }
    verdict(9, pass, &details.join(", "));
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_context_rerender_fidelity() {
    let cfg = PipelineConfig::default();
    let mut worst = f64::INFINITY;
    for seed in 0..3u64 {
        let spec = SynthSpec { boxes: 0, ..SynthSpec::default() };
        let b = generate(&spec, seed).unwrap();
        let out = run_in_memory(&b.data, &cfg).unwrap();
        for e in &out.report.unwrap().context_images {
            worst = worst.min(e.psnr);
        }
    }
    verdict(10, worst >= 30.0, &format!("3 noiseless runs, lowest context PSNR {worst:.2} dB"));
}
