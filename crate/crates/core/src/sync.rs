//! Absolute poses from pairwise estimates.
//!
//! Rotations are synchronized spectrally: the weighted block matrix of
//! relative rotations has the stacked absolute rotations as its leading
//! eigenspace, recovered by power iteration on a 3N×3 iterate. Camera
//! centers then follow from a weighted linear least-squares solve. View 0
//! fixes the gauge.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coarse::{is_connected, PairwisePoseEstimate};
use crate::error::{Error, Result};
use crate::geom::{project_to_so3, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEdge {
    pub i: usize,
    pub j: usize,
    /// Camera-`i` frame to camera-`j` frame.
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    pub n: usize,
    pub edges: Vec<PoseEdge>,
}

impl PoseGraph {
    pub fn new(n: usize, edges: Vec<PoseEdge>) -> Result<Self> {
        let g = Self { n, edges };
        g.validate()?;
        Ok(g)
    }

    /// Edge weights are support normalized by match count.
    pub fn from_estimates(n: usize, estimates: &[PairwisePoseEstimate]) -> Result<Self> {
        let edges = estimates
            .iter()
            .map(|e| PoseEdge { i: e.i, j: e.j, pose: e.pose, weight: e.edge_weight() })
            .collect();
        Self::new(n, edges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("pose graph has no views".into()));
        }
        for e in &self.edges {
            if e.i >= self.n || e.j >= self.n || e.i == e.j {
                return Err(Error::IndexOutOfRange(format!("edge ({}, {}) with {} views", e.i, e.j, self.n)));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(Error::InvalidInput(format!("edge ({}, {}) weight {}", e.i, e.j, e.weight)));
            }
        }
        let pairs: Vec<_> = self.edges.iter().map(|e| (e.i, e.j)).collect();
        if !is_connected(self.n, &pairs) {
            return Err(Error::DisconnectedGraph);
        }
        Ok(())
    }

    fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.i] += e.weight;
            d[e.j] += e.weight;
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncParams {
    pub max_power_iters: usize,
    /// Frobenius norm of the change between successive iterates.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self { max_power_iters: 1000, convergence_tol: 1e-10, seed: 0 }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_power_iters < 1 || !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidInput(format!("invalid sync parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationSync {
    pub rotations: Vec<Matrix3<f64>>,
    pub iterations: usize,
    /// False when the iteration cap was hit; the last iterate is returned.
    pub converged: bool,
}

/// Normalized, diagonally shifted rotation block matrix.
///
/// Block (i, j) holds `w_ij R_i R_jᵀ` (the transpose of the edge rotation)
/// and each diagonal block holds the weighted degree. Scaling by
/// `D^-1/2` on both sides puts the spectrum in [0, 2] with the consistent
/// solution at the top. Without the diagonal, bipartite graphs have a
/// symmetric spectrum and the power iteration oscillates.
fn block_matrix(graph: &PoseGraph) -> DMatrix<f64> {
    let n = graph.n;
    let deg = graph.degrees();
    let mut m = DMatrix::zeros(3 * n, 3 * n);
    for e in &graph.edges {
        let s = e.weight / (deg[e.i] * deg[e.j]).sqrt();
        let r = e.pose.rotation();
        for a in 0..3 {
            for b in 0..3 {
                m[(3 * e.i + a, 3 * e.j + b)] += s * r[(b, a)];
                m[(3 * e.j + a, 3 * e.i + b)] += s * r[(a, b)];
            }
        }
    }
    for k in 0..3 * n {
        m[(k, k)] += 1.0;
    }
    m
}

/// Thin QR with the sign of each column chosen so R has a positive
/// diagonal, which makes the orthonormal factor unique.
fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    let qr = y.qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..q.ncols() {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

pub fn sync_rotations(graph: &PoseGraph, params: &SyncParams) -> Result<RotationSync> {
    graph.validate()?;
    params.validate()?;
    let n = graph.n;
    if n == 1 {
        return Ok(RotationSync { rotations: vec![Matrix3::identity()], iterations: 0, converged: true });
    }
    let a = block_matrix(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = DMatrix::from_fn(3 * n, 3, |_, _| StandardNormal.sample(&mut rng));
    let mut y = orthonormalize(init);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_power_iters {
        iterations += 1;
        let next = orthonormalize(&a * &y);
        let change = (&next - &y).norm();
        y = next;
        if change < params.convergence_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("rotation synchronization stopped after {iterations} iterations without converging");
    }

    // Blocks are R_i Q (times sqrt(deg_i)) for an unknown orthogonal Q.
    // A reflection in Q shows up as negative block determinants.
    let block = |y: &DMatrix<f64>, i: usize| -> Matrix3<f64> { y.fixed_view::<3, 3>(3 * i, 0).into_owned() };
    let det_sum: f64 = (0..n).map(|i| block(&y, i).determinant()).sum();
    if det_sum < 0.0 {
        y.column_mut(2).neg_mut();
    }
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        raw.push(project_to_so3(&block(&y, i)).map_err(|_| {
            Error::NumericalRank(format!("rotation block {i} is rank deficient"))
        })?);
    }
    let r0t = raw[0].transpose();
    let mut rotations = Vec::with_capacity(n);
    rotations.push(Matrix3::identity());
    for r in &raw[1..] {
        rotations.push(project_to_so3(&(r * r0t))?);
    }
    Ok(RotationSync { rotations, iterations, converged })
}

/// Weighted least squares over camera centers with center 0 at the origin.
///
/// Each edge states `c_i - c_j = R_jᵀ t_ij`. The normal equations are a
/// weighted graph Laplacian per coordinate, solved by Cholesky after
/// removing view 0.
pub fn sync_translations(graph: &PoseGraph, rotations: &[Matrix3<f64>]) -> Result<Vec<Vector3<f64>>> {
    graph.validate()?;
    let n = graph.n;
    if rotations.len() != n {
        return Err(Error::DimensionMismatch(format!("{} rotations for {n} views", rotations.len())));
    }
    if n == 1 {
        return Ok(vec![Vector3::zeros()]);
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, 3);
    for e in &graph.edges {
        let d = rotations[e.j].transpose() * e.pose.translation();
        let w = e.weight;
        l[(e.i, e.i)] += w;
        l[(e.j, e.j)] += w;
        l[(e.i, e.j)] -= w;
        l[(e.j, e.i)] -= w;
        for k in 0..3 {
            b[(e.i, k)] += w * d[k];
            b[(e.j, k)] -= w * d[k];
        }
    }
    let lr = l.view((1, 1), (n - 1, n - 1)).into_owned();
    let br = b.view((1, 0), (n - 1, 3)).into_owned();
    let chol = lr
        .cholesky()
        .ok_or_else(|| Error::NumericalRank("translation normal equations are singular".into()))?;
    let c = chol.solve(&br);
    let mut out = vec![Vector3::zeros()];
    for i in 1..n {
        let ci = Vector3::new(c[(i - 1, 0)], c[(i - 1, 1)], c[(i - 1, 2)]);
        out.push(-(rotations[i] * ci));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncOutput {
    pub poses: Vec<Pose>,
    pub iterations: usize,
    pub converged: bool,
}

/// Rotations then translations; pose 0 is exactly the identity.
pub fn synchronize(graph: &PoseGraph, params: &SyncParams) -> Result<SyncOutput> {
    let rot = sync_rotations(graph, params)?;
    let trans = sync_translations(graph, &rot.rotations)?;
    let mut poses = Vec::with_capacity(graph.n);
    poses.push(Pose::identity());
    for i in 1..graph.n {
        poses.push(Pose::from_projected(&rot.rotations[i], trans[i])?);
    }
    Ok(SyncOutput { poses, iterations: rot.iterations, converged: rot.converged })
}
