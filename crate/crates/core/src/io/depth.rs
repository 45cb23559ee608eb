use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::io::image::has_ext;
use crate::io::pfm;

/// Per-pixel metric z-depth with a validity mask.
///
/// Valid entries are finite and strictly positive; invalid entries store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Non-finite and non-positive values become invalid.
    pub fn from_values(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} depth values for {width}x{height}",
                raw.len()
            )));
        }
        let valid: Vec<bool> = raw.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let values = raw
            .into_iter()
            .zip(&valid)
            .map(|(d, ok)| if *ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_values(width, height, vec![depth; width * height])
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.values[i])
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Median of the valid depths, `None` if nothing is valid.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(d, _)| *d)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }

    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let raw = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(d, ok)| if *ok { f(*d) } else { 0.0 })
            .collect();
        Self::from_values(self.width, self.height, raw)
    }

    /// Bilinear lookup at a sub-pixel position.
    ///
    /// Interpolation is done in inverse depth, which is affine in pixel
    /// coordinates over a plane, so planar surfaces are sampled exactly.
    /// Returns `None` when the position is outside the image or any
    /// neighbour with non-zero weight is invalid.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let taps = bilinear_taps(u, v, self.width, self.height)?;
        let mut inv = 0.0;
        for (x, y, w) in taps {
            if w == 0.0 {
                continue;
            }
            inv += w / self.get(x, y)?;
        }
        Some(1.0 / inv)
    }
}

/// The four bilinear taps `(x, y, weight)` for a position inside
/// `[0, w-1] x [0, h-1]`.
pub fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> Option<[(usize, usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    Some([
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ])
}

/// Load a depth map: PFM (`Pf`), or a 16-bit grayscale PNG whose metric scale
/// is read from the sidecar file `<path>.scale`.
pub fn load_depth(path: &Path) -> Result<DepthMap> {
    if has_ext(path, "png") {
        let sidecar = scale_sidecar(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let scale: f64 = text
            .trim()
            .parse()
            .map_err(|_| Error::parse(&sidecar, "scale must be a single decimal"))?;
        return load_depth_png(path, scale);
    }
    let (w, h, ch, data) = pfm::read(path)?;
    if ch != 1 {
        return Err(Error::parse(path, "depth PFM must be single channel (Pf)"));
    }
    DepthMap::from_values(w, h, data.into_iter().map(|x| x as f64).collect())
}

/// 16-bit PNG depth: metric depth = raw * scale; raw 0 is invalid.
pub fn load_depth_png(path: &Path, scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::parse(path, format!("invalid depth scale {scale}")));
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            msg: other.to_string(),
        },
    })?;
    let g = img.into_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.pixels().map(|p| p[0] as f64 * scale).collect();
    DepthMap::from_values(w, h, raw)
}

/// Save as PFM (bit-exact for float32 values) or 16-bit PNG plus scale sidecar.
pub fn save_depth(d: &DepthMap, path: &Path) -> Result<()> {
    if has_ext(path, "png") {
        return save_depth_png(d, path, 0.001);
    }
    let data: Vec<f32> = d.values.iter().map(|x| *x as f32).collect();
    pfm::write(path, d.width, d.height, 1, &data)
}

pub fn save_depth_png(d: &DepthMap, path: &Path, scale: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(d.width as u32, d.height as u32, |u, v| {
            let raw = match d.get(u as usize, v as usize) {
                Some(z) => (z / scale).round().clamp(1.0, 65535.0) as u16,
                None => 0,
            };
            Luma([raw])
        });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let sidecar = scale_sidecar(path);
    fs::write(&sidecar, format!("{scale}\n")).map_err(|e| Error::io(&sidecar, e))
}

fn scale_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_depth(&d, &p).unwrap();
        let back = load_depth(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.get(1, 0), Some(2.0));
        assert_eq!(back.get(0, 1), Some(3.0));
    }

    #[test]
    fn pfm_invalid_entries_stay_masked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_values(3, 1, vec![1.5, -2.0, f64::NAN]).unwrap();
        assert_eq!(d.valid_count(), 1);
        save_depth(&d, &p).unwrap();
        assert_eq!(load_depth(&p).unwrap(), d);
    }

    #[test]
    fn png_scale_definition() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(2, 1, vec![1500u16, 0]).unwrap();
        buf.save(&p).unwrap();
        let d = load_depth_png(&p, 0.001).unwrap();
        assert!((d.get(0, 0).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(d.get(1, 0), None);
    }

    #[test]
    fn png_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthMap::from_values(2, 1, vec![1.2345, 0.0]).unwrap();
        save_depth(&d, &p).unwrap();
        let back = load_depth(&p).unwrap();
        assert!((back.get(0, 0).unwrap() - 1.235).abs() < 1e-9);
        assert!(!back.is_valid(1, 0));
    }

    #[test]
    fn malformed_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"P6\n2 2\n255\n").unwrap();
        assert!(matches!(load_depth(&p), Err(Error::Parse { .. })));
        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0").unwrap();
        assert!(matches!(load_depth(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn sample_is_exact_on_planes() {
        // inverse depth affine in pixel coordinates
        let (w, h) = (5, 4);
        let inv = |u: f64, v: f64| 0.2 + 0.03 * u - 0.01 * v;
        let raw = (0..w * h).map(|i| 1.0 / inv((i % w) as f64, (i / w) as f64)).collect();
        let d = DepthMap::from_values(w, h, raw).unwrap();
        for (u, v) in [(0.3, 0.7), (3.9, 2.2), (4.0, 3.0), (1.0, 1.5)] {
            let s = d.sample(u, v).unwrap();
            assert!((s - 1.0 / inv(u, v)).abs() < 1e-12);
        }
        assert!(d.sample(4.01, 0.0).is_none());
        assert!(d.sample(-0.01, 0.0).is_none());
    }

    #[test]
    fn sample_drops_invalid_neighbours() {
        let d = DepthMap::from_values(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(d.sample(0.5, 0.5).is_none());
        // zero-weight neighbour does not matter
        assert_eq!(d.sample(0.0, 0.5), Some(1.0));
    }
}
