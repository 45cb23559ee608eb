//! Scene manifest: a TOML document listing views, pairwise correspondence
//! files and the scene depth bounds.
//!
//! ```toml
//! near = 0.5
//! far = 20.0
//! baseline_deg = 10.0          # optional, used only for overlap labels
//!
//! [[views]]
//! image = "images/000.png"
//! depth = "depth/000.pfm"      # or a 16-bit PNG with a `.scale` sidecar
//! features = "feat/000.bin"    # optional
//! gt_pose = "gt/000.txt"       # optional, evaluation only
//! role = "context"             # or "target"; default "context"
//! intrinsics = { fx = 110.0, fy = 110.0, cx = 63.5, cy = 63.5, width = 128, height = 128 }
//!
//! [[pairs]]
//! i = 0
//! j = 1
//! matches = "matches/000_001.txt"
//! ```
//!
//! Relative paths resolve against the manifest's directory. View indices
//! are the positions in `views`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::io::depth::{load_depth, DepthMap};
use crate::io::features::{load_features, FeatureMap};
use crate::io::image::{load_image, ImageRgb};
use crate::io::matches::{load_correspondences, CorrespondenceSet};
use crate::io::poses::load_pose;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewRole {
    #[default]
    Context,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PathBuf>,
    #[serde(default)]
    pub role: ViewRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub i: usize,
    pub j: usize,
    pub matches: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub near: f64,
    pub far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_deg: Option<f64>,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
}

impl SceneManifest {
    pub fn context_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&k| self.views[k].role == ViewRole::Context)
            .collect()
    }

    pub fn target_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&k| self.views[k].role == ViewRole::Target)
            .collect()
    }

    /// Structural invariants (no file access).
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0) || !(self.far > self.near) || !self.far.is_finite() {
            return Err(Error::Bounds(format!(
                "need 0 < near < far < inf, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Validation("manifest lists no views".into()));
        }
        for (k, v) in self.views.iter().enumerate() {
            v.intrinsics
                .validate()
                .map_err(|e| Error::Validation(format!("view {k}: {e}")))?;
        }
        let n = self.views.len();
        let mut seen = std::collections::HashSet::new();
        for p in &self.pairs {
            if p.i >= n || p.j >= n {
                return Err(Error::IndexOutOfRange(format!(
                    "pair ({}, {}) with {n} views",
                    p.i, p.j
                )));
            }
            if p.i >= p.j {
                return Err(Error::Validation(format!("pair ({}, {}) must have i < j", p.i, p.j)));
            }
            if !seen.insert((p.i, p.j)) {
                return Err(Error::Validation(format!("pair ({}, {}) listed twice", p.i, p.j)));
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for v in &mut self.views {
            fix(&mut v.image);
            fix(&mut v.depth);
            if let Some(f) = v.features.as_mut() {
                fix(f);
            }
            if let Some(g) = v.gt_pose.as_mut() {
                fix(g);
            }
        }
        for p in &mut self.pairs {
            fix(&mut p.matches);
        }
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        for v in &self.views {
            out.push(v.image.as_path());
            out.push(v.depth.as_path());
            out.extend(v.features.as_deref());
            out.extend(v.gt_pose.as_deref());
        }
        out.extend(self.pairs.iter().map(|p| p.matches.as_path()));
        out
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SceneManifest> {
    toml::from_str(text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Parse, validate and resolve a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text, path)?;
    m.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    m.resolve(base);
    for f in m.referenced_files() {
        if !f.is_file() {
            return Err(Error::MissingFile(f.to_path_buf()));
        }
    }
    Ok(m)
}

/// Write a manifest. Paths are written as given (callers pass paths relative
/// to the manifest's directory).
pub fn save_manifest(m: &SceneManifest, path: &Path) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A single view with everything loaded.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub image: ImageRgb,
    pub depth: DepthMap,
    pub intr: CameraIntrinsics,
    pub features: Option<FeatureMap>,
    pub gt_pose: Option<Pose>,
    pub role: ViewRole,
}

/// Fully loaded and cross-validated scene.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub views: Vec<ViewData>,
    pub pairs: Vec<CorrespondenceSet>,
    pub near: f64,
    pub far: f64,
    pub baseline_deg: Option<f64>,
}

impl SceneData {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0) || !(self.far > self.near) {
            return Err(Error::Bounds(format!("near={} far={}", self.near, self.far)));
        }
        for (k, v) in self.views.iter().enumerate() {
            let (w, h) = (v.intr.width, v.intr.height);
            if (v.image.width, v.image.height) != (w, h) || (v.depth.width, v.depth.height) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "view {k}: image {}x{}, depth {}x{}, intrinsics {w}x{h}",
                    v.image.width, v.image.height, v.depth.width, v.depth.height
                )));
            }
            if let Some(f) = &v.features {
                if f.scale_to(w, h).is_none() {
                    return Err(Error::DimensionMismatch(format!(
                        "view {k}: feature grid {}x{} is not an integer down-scale of {w}x{h}",
                        f.w, f.h
                    )));
                }
            }
        }
        let n = self.views.len();
        for s in &self.pairs {
            if s.i >= n || s.j >= n || s.i >= s.j {
                return Err(Error::IndexOutOfRange(format!("pair ({}, {})", s.i, s.j)));
            }
            s.validate()?;
            s.validate_bounds(&self.views[s.i].intr, &self.views[s.j].intr)?;
        }
        Ok(())
    }

    /// Median valid depth over all views.
    pub fn median_depth(&self) -> Option<f64> {
        let mut meds: Vec<f64> = self.views.iter().filter_map(|v| v.depth.median()).collect();
        if meds.is_empty() {
            return None;
        }
        meds.sort_by(f64::total_cmp);
        Some(meds[meds.len() / 2])
    }

    /// Restrict to the given views (re-indexed in the given order); pairs
    /// touching other views are dropped.
    pub fn subset(&self, keep: &[usize]) -> SceneData {
        let remap = |k: usize| keep.iter().position(|&x| x == k);
        let pairs = self
            .pairs
            .iter()
            .filter_map(|s| {
                let (a, b) = (remap(s.i)?, remap(s.j)?);
                let mut s = s.clone();
                if a < b {
                    s.i = a;
                    s.j = b;
                } else {
                    s.i = b;
                    s.j = a;
                    for m in &mut s.matches {
                        std::mem::swap(&mut m.p, &mut m.q);
                    }
                }
                Some(s)
            })
            .collect();
        SceneData {
            views: keep.iter().map(|&k| self.views[k].clone()).collect(),
            pairs,
            near: self.near,
            far: self.far,
            baseline_deg: self.baseline_deg,
        }
    }
}

pub fn load_scene_data(m: &SceneManifest) -> Result<SceneData> {
    let mut views = Vec::with_capacity(m.views.len());
    for v in &m.views {
        views.push(ViewData {
            image: load_image(&v.image)?,
            depth: load_depth(&v.depth)?,
            intr: v.intrinsics,
            features: v.features.as_deref().map(load_features).transpose()?,
            gt_pose: v.gt_pose.as_deref().map(load_pose).transpose()?,
            role: v.role,
        });
    }
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for p in &m.pairs {
        let s = load_correspondences(&p.matches)?;
        if (s.i, s.j) != (p.i, p.j) {
            return Err(Error::Validation(format!(
                "{}: header pair ({}, {}) disagrees with manifest ({}, {})",
                p.matches.display(),
                s.i,
                s.j,
                p.i,
                p.j
            )));
        }
        pairs.push(s);
    }
    let data = SceneData {
        views,
        pairs,
        near: m.near,
        far: m.far,
        baseline_deg: m.baseline_deg,
    };
    data.validate()?;
    Ok(data)
}
