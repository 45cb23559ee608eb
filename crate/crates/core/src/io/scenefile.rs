//! Binary Gaussian scene: `SAGS`, version byte, `n_views` (u32), per-view
//! counts (u64 each), then one record per Gaussian: center (3 x f64),
//! opacity (f64), covariance upper triangle xx xy xz yy yz zz (6 x f64),
//! colour (3 x f64), view id (u32), pixel u v (2 x u32). All little-endian.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{merge_scene, Gaussian, GaussianScene};

pub const SCENE_MAGIC: &[u8; 4] = b"SAGS";
pub const SCENE_VERSION: u8 = 1;
const RECORD: usize = 13 * 8 + 3 * 4;

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    let mut b = Vec::with_capacity(9 + 8 * scene.view_counts.len() + RECORD * scene.len());
    b.extend_from_slice(SCENE_MAGIC);
    b.push(SCENE_VERSION);
    b.extend_from_slice(&(scene.view_counts.len() as u32).to_le_bytes());
    for c in &scene.view_counts {
        b.extend_from_slice(&(*c as u64).to_le_bytes());
    }
    for g in &scene.gaussians {
        let c = &g.covariance;
        let vals = [
            g.center.x,
            g.center.y,
            g.center.z,
            g.opacity,
            c[(0, 0)],
            c[(0, 1)],
            c[(0, 2)],
            c[(1, 1)],
            c[(1, 2)],
            c[(2, 2)],
            g.color[0],
            g.color[1],
            g.color[2],
        ];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in [g.view, g.pixel[0], g.pixel[1]] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 9 || &b[..4] != SCENE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if b[4] != SCENE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version: b[4],
        });
    }
    let truncated = || Error::parse(path, "truncated scene file");
    let n_views = u32::from_le_bytes(b[5..9].try_into().unwrap()) as usize;
    let mut pos = 9;
    let mut counts = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let s = b.get(pos..pos + 8).ok_or_else(truncated)?;
        counts.push(u64::from_le_bytes(s.try_into().unwrap()) as usize);
        pos += 8;
    }
    let total: usize = counts.iter().sum();
    if b.len() != pos + total * RECORD {
        return Err(truncated());
    }
    let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let mut per_view: Vec<Vec<Gaussian>> = Vec::with_capacity(n_views);
    for c in &counts {
        let mut list = Vec::with_capacity(*c);
        for _ in 0..*c {
            let o = pos;
            let cov = Matrix3::new(
                f(o + 32),
                f(o + 40),
                f(o + 48),
                f(o + 40),
                f(o + 56),
                f(o + 64),
                f(o + 48),
                f(o + 64),
                f(o + 72),
            );
            list.push(Gaussian {
                center: Vector3::new(f(o), f(o + 8), f(o + 16)),
                opacity: f(o + 24),
                covariance: cov,
                color: [f(o + 80), f(o + 88), f(o + 96)],
                view: u(o + 104),
                pixel: [u(o + 108), u(o + 112)],
            });
            pos += RECORD;
        }
        per_view.push(list);
    }
    let scene = if total == 0 {
        GaussianScene {
            gaussians: Vec::new(),
            view_counts: counts,
            bbox_min: Vector3::zeros(),
            bbox_max: Vector3::zeros(),
        }
    } else {
        merge_scene(per_view)?
    };
    scene.validate().map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(seed: u64, n: usize) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_view = (0..3)
            .map(|view| {
                (0..n / 3 + (view == 0) as usize * (n % 3))
                    .map(|_| {
                        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                        Gaussian {
                            center: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                            opacity: rng.random_range(0.0..0.999),
                            covariance: a * a.transpose() + Matrix3::identity() * 1e-3,
                            color: [rng.random(), rng.random(), rng.random()],
                            view: view as u32,
                            pixel: [rng.random_range(0..640), rng.random_range(0..480)],
                        }
                    })
                    .collect()
            })
            .collect();
        merge_scene(per_view).unwrap()
    }

    #[test]
    fn random_scene_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let s = random_scene(7, 100);
        save_scene(&s, &p).unwrap();
        assert_eq!(load_scene(&p).unwrap(), s);
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        save_scene(&random_scene(1, 4), &p).unwrap();
        let mut b = fs::read(&p).unwrap();
        b[4] = 2;
        fs::write(&p, &b).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::UnsupportedVersion { version: 2, .. })));
        b.truncate(20);
        b[4] = SCENE_VERSION;
        fs::write(&p, &b).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::Parse { .. })));
    }
}
