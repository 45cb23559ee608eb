//! File formats: manifests, images, depth maps, correspondences, features,
//! poses and Gaussian scenes.
//!
//! Binary formats are little-endian, start with four magic bytes and a
//! version byte, and loaders reject versions they do not know.

pub mod depth;
pub mod features;
pub mod image;
pub mod manifest;
pub mod matches;
mod pfm;
pub mod poses;
pub mod scenefile;

pub use self::depth::{load_depth, save_depth, DepthMap};
pub use self::features::{load_features, save_features, FeatureMap};
pub use self::image::{load_image, save_image, ImageRgb};
pub use self::manifest::{load_manifest, load_scene_data, save_manifest, SceneData, SceneManifest, ViewData, ViewRole};
pub use self::matches::{load_correspondences, save_correspondences, CorrespondenceSet, Match};
pub use self::poses::{load_pose, load_poses, save_poses};
pub use self::scenefile::{load_scene, save_scene};

/// Format version bytes understood by this build, as `(format, version)`.
pub fn supported_versions() -> Vec<(&'static str, u8)> {
    vec![
        ("feature map (SAFM)", features::FEATURE_VERSION),
        ("gaussian scene (SAGS)", scenefile::SCENE_VERSION),
    ]
}
