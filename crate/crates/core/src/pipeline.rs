//! End-to-end pipeline: coarse → sync → refine → confidence → scene →
//! render → eval, in memory or with every stage persisted to a directory.
//!
//! Refinement runs before the confidence and scene stages so that the
//! Gaussians are built from the refined depths and poses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::coarse::{estimate_all_pairs, CoarseResult, PairwisePoseEstimate, RansacParams};
use crate::confvol::{
    builtin_features, make_candidates, view_confidence, AdditiveAggregator, ConfidenceMap, SweepView, DEFAULT_BETA,
    DEFAULT_K, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::evalsynth::{evaluate_images, evaluate_poses, EvalParams, EvalReport, OverlapBin};
use crate::geom::Pose;
use crate::io::depth::{load_depth, save_depth, DepthMap};
use crate::io::features::FeatureMap;
use crate::io::manifest::SceneData;
use crate::io::poses::{load_poses, save_poses};
use crate::io::scenefile::{load_scene, save_scene};
use crate::raster::{render, RenderConfig, RenderOutput};
use crate::refine::{fine_align, RefineParams, RefineReport};
use crate::scene::{build_view_gaussians, merge_scene, GaussianParams, GaussianScene};
use crate::sync::{synchronize, PoseGraph, SyncOutput, SyncParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceParams {
    /// Number of depth candidates.
    pub k: usize,
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the guidance volume.
    pub beta: f64,
    /// When false every Gaussian gets full confidence.
    pub enabled: bool,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, tau: DEFAULT_TAU, beta: DEFAULT_BETA, enabled: true }
    }
}

/// Every stage's parameters. Fields missing from a config file take their
/// defaults; `seed` overrides the per-module seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// `None` derives the inlier threshold from the median scene depth.
    pub ransac: Option<RansacParams>,
    pub sync: SyncParams,
    pub confidence: ConfidenceParams,
    pub gaussians: GaussianParams,
    pub render: RenderConfig,
    /// `rounds = 0` skips refinement.
    pub refine: RefineParams,
    pub eval: EvalParams,
}


impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.ransac {
            r.validate()?;
        }
        self.sync.validate()?;
        self.render.validate()?;
        self.refine.validate()?;
        if self.confidence.k < 2 || !(self.confidence.tau > 0.0) || !(self.confidence.beta >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid confidence parameters {:?}", self.confidence)));
        }
        Ok(())
    }

    pub fn ransac_for(&self, data: &SceneData) -> RansacParams {
        let base = self
            .ransac
            .unwrap_or_else(|| RansacParams::for_median_depth(data.median_depth().unwrap_or(1.0)));
        RansacParams { seed: self.seed, ..base }
    }

    pub fn sync_params(&self) -> SyncParams {
        SyncParams { seed: self.seed, ..self.sync }
    }

    pub fn refine_params(&self, data: &SceneData) -> RefineParams {
        RefineParams {
            seed: self.seed,
            ransac: Some(self.refine.ransac.unwrap_or_else(|| self.ransac_for(data))),
            sync: self.sync_params(),
            ..self.refine.clone()
        }
    }
}

pub const STAGES: [&str; 7] = ["coarse", "sync", "refine", "confidence", "scene", "render", "eval"];

pub fn stage_coarse(data: &SceneData, cfg: &PipelineConfig) -> Result<CoarseResult> {
    let r = estimate_all_pairs(data, &cfg.ransac_for(data))?;
    for (i, j, why) in &r.failures {
        log::warn!("pair ({i}, {j}) dropped: {why}");
    }
    Ok(r)
}

pub fn stage_sync(n: usize, coarse: &CoarseResult, cfg: &PipelineConfig) -> Result<SyncOutput> {
    let graph = PoseGraph::from_estimates(n, &coarse.estimates)?;
    synchronize(&graph, &cfg.sync_params())
}

/// Returns refined poses, depths and the report; inputs pass through when
/// refinement is disabled.
pub fn stage_refine(data: &SceneData, poses: &[Pose], cfg: &PipelineConfig) -> Result<(Vec<Pose>, Vec<DepthMap>, Option<RefineReport>)> {
    if cfg.refine.rounds == 0 && !cfg.refine.weights.photometric {
        return Ok((poses.to_vec(), data.views.iter().map(|v| v.depth.clone()).collect(), None));
    }
    let out = fine_align(data, poses, &cfg.refine_params(data))?;
    Ok((out.poses, out.depths, Some(out.report)))
}

pub fn stage_confidence(data: &SceneData, poses: &[Pose], depths: &[DepthMap], cfg: &PipelineConfig) -> Result<Vec<ConfidenceMap>> {
    let n = data.views.len();
    if !cfg.confidence.enabled || n < 2 {
        return Ok(data.views.iter().map(|v| ConfidenceMap::uniform(v.intr.height, v.intr.width, 1.0)).collect());
    }
    let feats: Vec<FeatureMap> = data
        .views
        .iter()
        .map(|v| v.features.clone().unwrap_or_else(|| builtin_features(&v.image)))
        .collect();
    let cands = make_candidates(data.near, data.far, cfg.confidence.k)?;
    let agg = AdditiveAggregator { beta: cfg.confidence.beta };
    (0..n)
        .map(|r| {
            let sweep = |k: usize| SweepView { features: &feats[k], pose: &poses[k], intr: &data.views[k].intr };
            let sources: Vec<SweepView> = (0..n).filter(|&k| k != r).map(sweep).collect();
            view_confidence(sweep(r), &sources, &depths[r], &cands, &agg, cfg.confidence.tau)
        })
        .collect()
}

pub fn stage_scene(
    data: &SceneData,
    poses: &[Pose],
    depths: &[DepthMap],
    conf: &[ConfidenceMap],
    cfg: &PipelineConfig,
) -> Result<GaussianScene> {
    let per_view = data
        .views
        .iter()
        .enumerate()
        .map(|(k, v)| build_view_gaussians(k as u32, &v.image, &depths[k], &poses[k], &v.intr, &conf[k], &cfg.gaussians))
        .collect::<Result<Vec<_>>>()?;
    merge_scene(per_view)
}

pub fn stage_render(data: &SceneData, scene: &GaussianScene, poses: &[Pose], cfg: &PipelineConfig) -> Result<Vec<RenderOutput>> {
    data.views.iter().zip(poses).map(|(v, p)| render(scene, p, &v.intr, &cfg.render)).collect()
}

/// Context re-render quality, plus pose errors when ground truth is present.
pub fn stage_eval(data: &SceneData, poses: &[Pose], renders: &[RenderOutput]) -> Result<EvalReport> {
    let mut report = EvalReport { overlap: data.baseline_deg.map(OverlapBin::from_baseline), ..Default::default() };
    let gt: Option<Vec<Pose>> = data.views.iter().map(|v| v.gt_pose).collect();
    if let Some(gt) = gt {
        if gt.len() >= 2 {
            report.poses = Some(evaluate_poses(poses, &gt)?);
        }
    }
    for (k, (v, r)) in data.views.iter().zip(renders).enumerate() {
        report.context_images.push(evaluate_images(k, &r.color, &v.image)?);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub coarse: Option<CoarseResult>,
    /// Synchronized poses before refinement.
    pub sync_poses: Vec<Pose>,
    pub poses: Vec<Pose>,
    pub depths: Vec<DepthMap>,
    pub refine_report: Option<RefineReport>,
    pub confidence: Vec<ConfidenceMap>,
    pub scene: GaussianScene,
    pub renders: Vec<RenderOutput>,
    pub report: Option<EvalReport>,
}

/// Run every stage without touching the file system.
pub fn run_in_memory(data: &SceneData, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    data.validate()?;
    let n = data.views.len();
    let coarse = stage_coarse(data, cfg)?;
    let sync = stage_sync(n, &coarse, cfg)?;
    let (poses, depths, refine_report) = stage_refine(data, &sync.poses, cfg)?;
    let confidence = stage_confidence(data, &poses, &depths, cfg)?;
    let scene = stage_scene(data, &poses, &depths, &confidence, cfg)?;
    let renders = stage_render(data, &scene, &poses, cfg)?;
    let report = stage_eval(data, &poses, &renders)?;
    Ok(PipelineOutput {
        coarse: Some(coarse),
        sync_poses: sync.poses,
        poses,
        depths,
        refine_report,
        confidence,
        scene,
        renders,
        report: Some(report),
    })
}

/// Text format for pairwise estimates: one line per estimate,
/// `i j inliers matches support score iterations r00 .. r22 t0 t1 t2 mask`
/// with the mask as a string of `0`/`1`. Failed pairs are `# failed i j reason`.
pub fn format_estimates(r: &CoarseResult) -> String {
    let mut s = String::from("# i j inliers matches support score iterations R(row-major) t mask\n");
    for e in &r.estimates {
        let _ = write!(
            s,
            "{} {} {} {} {} {} {}",
            e.i, e.j, e.inlier_count, e.match_count, e.support_weight, e.hypothesis_score, e.iterations
        );
        let (rot, t) = (e.pose.rotation(), e.pose.translation());
        for a in 0..3 {
            for b in 0..3 {
                let _ = write!(s, " {}", rot[(a, b)]);
            }
        }
        let _ = write!(s, " {} {} {} ", t[0], t[1], t[2]);
        s.extend(e.inlier_mask.iter().map(|&m| if m { '1' } else { '0' }));
        s.push('\n');
    }
    for (i, j, why) in &r.failures {
        let _ = writeln!(s, "# failed {i} {j} {}", why.replace('\n', " "));
    }
    s
}

pub fn parse_estimates(text: &str, path: &Path) -> Result<CoarseResult> {
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |m: &str| Error::parse(path, format!("line {}: {m}", n + 1));
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("# failed ") {
            let mut it = rest.splitn(3, ' ');
            let i = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| err("bad failure line"))?;
            let j = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| err("bad failure line"))?;
            failures.push((i, j, it.next().unwrap_or("").to_string()));
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 20 {
            return Err(err(&format!("expected 20 fields, found {}", f.len())));
        }
        let u = |k: usize| f[k].parse::<usize>().map_err(|_| err("bad integer"));
        let x = |k: usize| f[k].parse::<f64>().map_err(|_| err("bad number"));
        let rot = Matrix3::new(x(7)?, x(8)?, x(9)?, x(10)?, x(11)?, x(12)?, x(13)?, x(14)?, x(15)?);
        let pose = Pose::new(rot, Vector3::new(x(16)?, x(17)?, x(18)?)).map_err(|e| err(&e.to_string()))?;
        let inlier_mask = f[19]
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(err("bad mask")),
            })
            .collect::<Result<Vec<bool>>>()?;
        estimates.push(PairwisePoseEstimate {
            i: u(0)?,
            j: u(1)?,
            pose,
            inlier_mask,
            support_weight: x(4)?,
            inlier_count: u(2)?,
            match_count: u(3)?,
            hypothesis_score: x(5)?,
            iterations: u(6)?,
        });
    }
    Ok(CoarseResult { estimates, failures })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn marker(dir: &Path, stage: &str) -> PathBuf {
    dir.join("stages").join(format!("{stage}.done"))
}

/// Error from a stage, with the stage named.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn at<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

/// Paths of the files a persisted run writes.
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn pairs(&self) -> PathBuf {
        self.dir.join("coarse/pairs.txt")
    }
    pub fn sync_poses(&self) -> PathBuf {
        self.dir.join("sync/poses.txt")
    }
    pub fn poses(&self) -> PathBuf {
        self.dir.join("refine/poses.txt")
    }
    pub fn depth(&self, k: usize) -> PathBuf {
        self.dir.join(format!("refine/depth_{k:03}.pfm"))
    }
    pub fn refine_report(&self) -> PathBuf {
        self.dir.join("refine/report.txt")
    }
    pub fn confidence(&self, k: usize) -> PathBuf {
        self.dir.join(format!("confidence/conf_{k:03}.pfm"))
    }
    pub fn scene(&self) -> PathBuf {
        self.dir.join("scene/scene.sags")
    }
    pub fn render(&self, k: usize) -> PathBuf {
        self.dir.join(format!("render/view_{k:03}.png"))
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
}

/// Confidence maps are stored as single-channel float maps.
pub fn save_confidence(c: &ConfidenceMap, path: &Path) -> Result<()> {
    // a zero confidence would read back as an invalid depth; keep it positive
    let vals = c.data.iter().map(|x| x.max(f64::MIN_POSITIVE)).collect();
    save_depth(&DepthMap::from_values(c.w, c.h, vals)?, path)
}

pub fn load_confidence(path: &Path) -> Result<ConfidenceMap> {
    let d = load_depth(path)?;
    Ok(ConfidenceMap { h: d.height, w: d.width, data: d.values().to_vec() })
}

/// Run with every stage persisted under `dir`. With `resume`, stages whose
/// marker exists are loaded from disk instead of recomputed.
///
/// Stage outputs are written before their marker, so an interrupted stage
/// is simply rerun.
pub fn run_persisted(data: &SceneData, cfg: &PipelineConfig, dir: &Path, resume: bool) -> std::result::Result<PipelineOutput, StageError> {
    at("config", cfg.validate())?;
    at("config", data.validate())?;
    let l = RunLayout { dir: dir.to_path_buf() };
    at("config", mkdir(&dir.join("stages")))?;
    at("config", write_file(&l.config(), &cfg.to_toml()))?;
    if !resume {
        for s in STAGES {
            let m = marker(dir, s);
            if m.exists() {
                at("config", fs::remove_file(&m).map_err(|e| Error::io(&m, e)))?;
            }
        }
    }
    let n = data.views.len();
    // once a stage is recomputed every later stage is too
    let mut fresh = false;
    let done = |stage: &str, fresh: &mut bool| -> bool {
        let ok = resume && !*fresh && marker(dir, stage).exists();
        if !ok {
            *fresh = true;
        }
        ok
    };
    let finish = |stage: &'static str| at(stage, write_file(&marker(dir, stage), ""));

    let coarse = if done("coarse", &mut fresh) {
        let p = l.pairs();
        let text = at("coarse", fs::read_to_string(&p).map_err(|e| Error::io(&p, e)))?;
        at("coarse", parse_estimates(&text, &p))?
    } else {
        let c = at("coarse", stage_coarse(data, cfg))?;
        at("coarse", write_file(&l.pairs(), &format_estimates(&c)))?;
        finish("coarse")?;
        c
    };

    let sync_poses = if done("sync", &mut fresh) {
        at("sync", load_poses(&l.sync_poses()))?
    } else {
        let s = at("sync", stage_sync(n, &coarse, cfg))?;
        at("sync", mkdir(&dir.join("sync")))?;
        at("sync", save_poses(&s.poses, &l.sync_poses()))?;
        finish("sync")?;
        s.poses
    };

    let (poses, depths, refine_report) = if done("refine", &mut fresh) {
        let poses = at("refine", load_poses(&l.poses()))?;
        let depths = at("refine", (0..n).map(|k| load_depth(&l.depth(k))).collect::<Result<Vec<_>>>())?;
        (poses, depths, None)
    } else {
        let (p, d, rep) = at("refine", stage_refine(data, &sync_poses, cfg))?;
        at("refine", mkdir(&dir.join("refine")))?;
        at("refine", save_poses(&p, &l.poses()))?;
        for (k, dm) in d.iter().enumerate() {
            at("refine", save_depth(dm, &l.depth(k)))?;
        }
        if let Some(r) = &rep {
            at("refine", write_file(&l.refine_report(), &r.to_text()))?;
        }
        finish("refine")?;
        (p, d, rep)
    };

    let confidence = if done("confidence", &mut fresh) {
        at("confidence", (0..n).map(|k| load_confidence(&l.confidence(k))).collect::<Result<Vec<_>>>())?
    } else {
        let c = at("confidence", stage_confidence(data, &poses, &depths, cfg))?;
        at("confidence", mkdir(&dir.join("confidence")))?;
        for (k, m) in c.iter().enumerate() {
            at("confidence", save_confidence(m, &l.confidence(k)))?;
        }
        finish("confidence")?;
        c
    };

    let scene = if done("scene", &mut fresh) {
        at("scene", load_scene(&l.scene()))?
    } else {
        let s = at("scene", stage_scene(data, &poses, &depths, &confidence, cfg))?;
        at("scene", mkdir(&dir.join("scene")))?;
        at("scene", save_scene(&s, &l.scene()))?;
        finish("scene")?;
        s
    };

    // renders are cheap and needed by eval, so they are always recomputed;
    // the marker only records that the files on disk are complete
    let skip_render_write = done("render", &mut fresh);
    let renders = at("render", stage_render(data, &scene, &poses, cfg))?;
    if !skip_render_write {
        at("render", mkdir(&dir.join("render")))?;
        for (k, r) in renders.iter().enumerate() {
            at("render", r.save(&l.render(k)))?;
        }
        finish("render")?;
    }

    let report = at("eval", stage_eval(data, &poses, &renders))?;
    let mut text = report.to_text();
    // a resumed refine stage only has its text report on disk
    let flagged = match &refine_report {
        Some(r) => Some(r.flagged),
        None => std::fs::read_to_string(l.refine_report()).ok().and_then(|t| {
            t.lines().find_map(|line| line.strip_prefix("flagged ").and_then(|v| v.trim().parse().ok()))
        }),
    };
    if let Some(f) = flagged {
        let _ = writeln!(text, "refine_flagged {f}");
    }
    at("eval", write_file(&l.report(), &text))?;
    finish("eval")?;

    Ok(PipelineOutput {
        coarse: Some(coarse),
        sync_poses,
        poses,
        depths,
        refine_report,
        confidence,
        scene,
        renders,
        report: Some(report),
    })
}
