//! Pose-free reconstruction of pixel-aligned 3D Gaussian scenes from sparse
//! views with metric depth and cross-view correspondences.
//!
//! Stages: robust pairwise alignment ([`coarse`]), pose synchronization
//! ([`sync`]), test-time refinement of poses and depths ([`refine`]),
//! cost-volume confidence ([`confvol`]), Gaussian construction ([`scene`])
//! and CPU splatting ([`raster`]). [`evalsynth`] generates synthetic ground
//! truth and computes metrics; [`pipeline`] wires everything together.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coarse;
pub mod confvol;
pub mod error;
pub mod evalsynth;
pub mod geom;
pub mod io;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod scene;
pub mod sync;

pub use error::{Error, Result};
