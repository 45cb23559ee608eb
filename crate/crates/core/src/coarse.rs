//! Pairwise relative poses from correspondences and metric depth.
//!
//! Matches are lifted to 3D with each view's depth and a rigid transform is
//! fit with RANSAC over 3-point samples, followed by a confidence-weighted
//! re-fit on the inliers.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::io::depth::DepthMap;
use crate::io::manifest::SceneData;
use crate::io::matches::CorrespondenceSet;

/// Fraction of the scene's median depth used as the default inlier threshold.
pub const DEFAULT_THRESHOLD_FACTOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Maximum 3D residual of an inlier, in meters.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub confidence_target: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 2048,
            inlier_threshold: 0.05,
            min_inliers: 6,
            confidence_target: 0.999,
            seed: 0,
        }
    }
}

impl RansacParams {
    /// Defaults with the threshold set to 5% of the median scene depth.
    pub fn for_median_depth(median_depth: f64) -> Self {
        Self {
            inlier_threshold: DEFAULT_THRESHOLD_FACTOR * median_depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1
            || !(self.inlier_threshold > 0.0)
            || !(self.confidence_target > 0.0 && self.confidence_target < 1.0)
        {
            return Err(Error::InvalidInput(format!("invalid RANSAC parameters {self:?}")));
        }
        Ok(())
    }
}

/// Relative pose between two views: maps camera-`i` points to camera-`j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwisePoseEstimate {
    pub i: usize,
    pub j: usize,
    pub pose: Pose,
    /// One flag per input match; matches without valid depth are `false`.
    pub inlier_mask: Vec<bool>,
    /// Sum of inlier match confidences.
    pub support_weight: f64,
    pub inlier_count: usize,
    /// Number of matches in the input set.
    pub match_count: usize,
    /// Score of the best minimal-sample hypothesis.
    pub hypothesis_score: f64,
    pub iterations: usize,
}

impl PairwisePoseEstimate {
    /// Support normalized by the number of matches; used as the edge weight
    /// in synchronization.
    pub fn edge_weight(&self) -> f64 {
        self.support_weight / self.match_count.max(1) as f64
    }
}

/// Weighted least-squares rigid transform with `R p + t ≈ q`.
pub fn rigid_fit_weighted(p: &[Vector3<f64>], q: &[Vector3<f64>], w: &[f64]) -> Result<Pose> {
    if p.len() != q.len() || p.len() != w.len() {
        return Err(Error::InvalidInput("point and weight counts differ".into()));
    }
    if p.len() < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 points, got {}", p.len())));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) || w.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidInput("weights must be non-negative with a positive sum".into()));
    }
    let pc = p.iter().zip(w).fold(Vector3::zeros(), |a, (x, wi)| a + x * *wi) / wsum;
    let qc = q.iter().zip(w).fold(Vector3::zeros(), |a, (x, wi)| a + x * *wi) / wsum;
    let mut h = Matrix3::zeros();
    let mut cp = Matrix3::zeros();
    for ((a, b), wi) in p.iter().zip(q).zip(w) {
        let da = a - pc;
        let db = b - qc;
        h += da * db.transpose() * *wi;
        cp += da * da.transpose() * *wi;
    }
    let sp = cp.singular_values();
    let sh = h.singular_values();
    let spread = |s: &Vector3<f64>| {
        let mut v = [s[0], s[1], s[2]];
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let (sp, sh) = (spread(&sp), spread(&sh));
    if !(sp[0] > 0.0) || sp[1] <= 1e-12 * sp[0] || sh[1] <= 1e-12 * sh[0] {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NumericalRank("SVD failed".into())),
    };
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    // orthonormal up to rounding; project to silence drift past the tolerance
    Pose::from_projected(&r, qc - r * pc)
}

/// Matches lifted to 3D in both cameras.
#[derive(Clone, Debug, Default)]
pub struct LiftedMatches {
    /// Index into the original correspondence list.
    pub index: Vec<usize>,
    pub xi: Vec<Vector3<f64>>,
    pub xj: Vec<Vector3<f64>>,
    pub conf: Vec<f64>,
}

impl LiftedMatches {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Back-project both endpoints; matches touching invalid depth are dropped.
pub fn lift_matches(
    matches: &CorrespondenceSet,
    depth_i: &DepthMap,
    depth_j: &DepthMap,
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
) -> LiftedMatches {
    let mut out = LiftedMatches::default();
    for (k, m) in matches.matches.iter().enumerate() {
        let (Some(di), Some(dj)) = (depth_i.sample(m.p.x, m.p.y), depth_j.sample(m.q.x, m.q.y)) else {
            continue;
        };
        out.index.push(k);
        out.xi.push(intr_i.ray(m.p.x, m.p.y) * di);
        out.xj.push(intr_j.ray(m.q.x, m.q.y) * dj);
        out.conf.push(m.confidence);
    }
    out
}

#[inline]
fn residual(pose: &Pose, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (pose.transform_point(a) - b).norm()
}

/// Inlier mask and its summed confidence under `pose`.
pub fn score_pose(data: &LiftedMatches, pose: &Pose, threshold: f64) -> (Vec<bool>, f64) {
    let mut score = 0.0;
    let mask = (0..data.len())
        .map(|k| {
            let inl = residual(pose, &data.xi[k], &data.xj[k]) <= threshold;
            if inl {
                score += data.conf[k];
            }
            inl
        })
        .collect();
    (mask, score)
}

fn fit_subset(data: &LiftedMatches, idx: &[usize]) -> Result<Pose> {
    let p: Vec<_> = idx.iter().map(|&k| data.xi[k]).collect();
    let q: Vec<_> = idx.iter().map(|&k| data.xj[k]).collect();
    let w = vec![1.0; idx.len()];
    rigid_fit_weighted(&p, &q, &w)
}

/// Confidence-weighted re-fit on the inliers of `pose`, repeated until the
/// inlier set stops changing, then a robust re-weighting pass inside that
/// set (see [`robust_refit`]). The returned mask is always evaluated under
/// the returned pose.
pub fn refine_from_hypothesis(data: &LiftedMatches, pose: Pose, threshold: f64) -> (Pose, Vec<bool>, f64) {
    let (mut mask, mut score) = score_pose(data, &pose, threshold);
    let mut pose = pose;
    for _ in 0..20 {
        let idx: Vec<usize> = (0..data.len()).filter(|&k| mask[k]).collect();
        if idx.len() < 3 {
            break;
        }
        let p: Vec<_> = idx.iter().map(|&k| data.xi[k]).collect();
        let q: Vec<_> = idx.iter().map(|&k| data.xj[k]).collect();
        let w: Vec<_> = idx.iter().map(|&k| data.conf[k]).collect();
        let Ok(next) = rigid_fit_weighted(&p, &q, &w) else { break };
        let (next_mask, next_score) = score_pose(data, &next, threshold);
        let changed = next_mask != mask;
        if next_mask.iter().filter(|b| **b).count() < 3 {
            break;
        }
        pose = next;
        mask = next_mask;
        score = next_score;
        if !changed {
            break;
        }
    }
    if let Some(robust) = robust_refit(data, &pose, &mask, threshold) {
        let (m, s) = score_pose(data, &robust, threshold);
        if m.iter().filter(|b| **b).count() >= 3 {
            return (robust, m, s);
        }
    }
    (pose, mask, score)
}

/// Tukey-weighted IRLS over the inlier set with a MAD scale estimate.
///
/// A few outliers always land inside a generous threshold by chance; a plain
/// least-squares re-fit gives them full weight. The scale is floored at a
/// tiny fraction of the threshold so exact inliers keep unit weight.
fn robust_refit(data: &LiftedMatches, pose: &Pose, mask: &[bool], threshold: f64) -> Option<Pose> {
    let idx: Vec<usize> = (0..data.len()).filter(|&k| mask[k]).collect();
    if idx.len() < 4 {
        return None;
    }
    let p: Vec<_> = idx.iter().map(|&k| data.xi[k]).collect();
    let q: Vec<_> = idx.iter().map(|&k| data.xj[k]).collect();
    let mut pose = *pose;
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..10 {
        let r: Vec<f64> = p.iter().zip(&q).map(|(a, b)| residual(&pose, a, b)).collect();
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        let med = sorted[sorted.len() / 2];
        let c = 4.685 * (1.4826 * med).max(1e-6 * threshold);
        let w: Vec<f64> = idx
            .iter()
            .zip(&r)
            .map(|(&k, &rk)| {
                let u = rk / c;
                if u < 1.0 { data.conf[k] * (1.0 - u * u).powi(2) } else { 0.0 }
            })
            .collect();
        if w.iter().filter(|x| **x > 0.0).count() < 3 || prev.as_ref() == Some(&w) {
            break;
        }
        pose = rigid_fit_weighted(&p, &q, &w).ok()?;
        prev = Some(w);
    }
    Some(pose)
}

fn n_choose_3(n: usize) -> u128 {
    let n = n as u128;
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

fn adaptive_bound(inliers: usize, n: usize, confidence: f64) -> f64 {
    let w = inliers as f64 / n as f64;
    let w3 = w * w * w;
    if w3 >= 1.0 - 1e-15 {
        return 1.0;
    }
    if w3 <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - w3).ln()).ceil().max(1.0)
}

fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    seed ^ ((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        ^ ((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

/// RANSAC over 3D-3D minimal samples.
///
/// When every 3-subset fits in the iteration budget they are enumerated in
/// lexicographic order instead of sampled; otherwise samples are drawn from
/// a generator seeded by `params.seed` and the pair indices, and the loop
/// stops once the standard `1 - (1 - w^3)^n >= confidence` bound is met.
/// Among equal scores the first hypothesis found wins.
pub fn estimate_relative_pose(
    matches: &CorrespondenceSet,
    depth_i: &DepthMap,
    depth_j: &DepthMap,
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<PairwisePoseEstimate> {
    params.validate()?;
    let data = lift_matches(matches, depth_i, depth_j, intr_i, intr_j);
    let n = data.len();
    let fail = |msg: String| Error::EstimationFailed(format!("pair ({}, {}): {msg}", matches.i, matches.j));
    if n < 3 {
        return Err(fail(format!("{n} matches with valid depth")));
    }
    let thr = params.inlier_threshold;

    let mut best: Option<(Pose, f64, usize)> = None;
    let mut iterations = 0usize;
    let consider = |idx: &[usize], best: &mut Option<(Pose, f64, usize)>| {
        let Ok(pose) = fit_subset(&data, idx) else { return };
        let (mask, score) = score_pose(&data, &pose, thr);
        if best.as_ref().is_none_or(|b| score > b.1) {
            let count = mask.iter().filter(|b| **b).count();
            *best = Some((pose, score, count));
        }
    };

    if n_choose_3(n) <= params.max_iterations as u128 {
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    iterations += 1;
                    consider(&[a, b, c], &mut best);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(params.seed, matches.i, matches.j));
        let mut bound = f64::INFINITY;
        while iterations < params.max_iterations && (iterations as f64) < bound {
            iterations += 1;
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            let (lo, hi) = (a.min(b), a.max(b));
            if c >= lo {
                c += 1;
            }
            if c >= hi {
                c += 1;
            }
            let before = best.as_ref().map(|b| b.1);
            consider(&[a, b, c], &mut best);
            if let Some((_, s, count)) = &best {
                if before != Some(*s) {
                    bound = adaptive_bound(*count, n, params.confidence_target);
                }
            }
        }
    }

    let Some((hyp, hyp_score, _)) = best else {
        return Err(fail("every minimal sample was degenerate".into()));
    };
    let (pose, mask, score) = refine_from_hypothesis(&data, hyp, thr);
    let count = mask.iter().filter(|b| **b).count();
    if count < params.min_inliers.max(3) {
        return Err(fail(format!("{count} inliers, need {}", params.min_inliers.max(3))));
    }
    let mut full_mask = vec![false; matches.len()];
    for (k, inl) in mask.iter().enumerate() {
        full_mask[data.index[k]] = *inl;
    }
    Ok(PairwisePoseEstimate {
        i: matches.i,
        j: matches.j,
        pose,
        inlier_mask: full_mask,
        support_weight: score,
        inlier_count: count,
        match_count: matches.len(),
        hypothesis_score: hyp_score,
        iterations,
    })
}

/// Result of estimating every manifest pair.
#[derive(Clone, Debug)]
pub struct CoarseResult {
    pub estimates: Vec<PairwisePoseEstimate>,
    /// Pairs whose estimation failed, with the reason.
    pub failures: Vec<(usize, usize, String)>,
}

/// Estimate every pair; failed pairs are recorded as long as the remaining
/// pose graph still connects all views.
pub fn estimate_all_pairs(data: &SceneData, params: &RansacParams) -> Result<CoarseResult> {
    let results: Vec<Result<PairwisePoseEstimate>> = data
        .pairs
        .par_iter()
        .map(|s| {
            let (vi, vj) = (&data.views[s.i], &data.views[s.j]);
            estimate_relative_pose(s, &vi.depth, &vj.depth, &vi.intr, &vj.intr, params)
        })
        .collect();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in data.pairs.iter().zip(results) {
        match r {
            Ok(e) => estimates.push(e),
            Err(e @ Error::EstimationFailed(_)) => failures.push((s.i, s.j, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let edges: Vec<(usize, usize)> = estimates.iter().map(|e| (e.i, e.j)).collect();
    if !is_connected(data.views.len(), &edges) {
        return Err(Error::UnsolvableScene(format!(
            "pose graph over {} views is disconnected after {} failed pairs",
            data.views.len(),
            failures.len()
        )));
    }
    Ok(CoarseResult { estimates, failures })
}

/// Undirected connectivity over `n` nodes.
pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let root = find(&mut parent, 0);
    (1..n).all(|k| find(&mut parent, k) == root)
}
