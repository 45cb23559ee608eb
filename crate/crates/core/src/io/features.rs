use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SAFM";
pub const FEATURE_VERSION: u8 = 1;

/// Dense grid of unit-norm descriptors, cell-major (`[(y * w + x) * d + c]`).
///
/// The grid covers the image at an integer down-scale factor; cell `(x, y)`
/// is centred at image pixel `((x + 0.5) * s - 0.5, (y + 0.5) * s - 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    /// Normalizes every cell; all-zero cells become the first basis vector.
    pub fn new_normalized(h: usize, w: usize, d: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d || d == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {h}x{w}x{d}",
                data.len()
            )));
        }
        for cell in data.chunks_exact_mut(d) {
            let n = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 && n.is_finite() {
                cell.iter_mut().for_each(|x| *x /= n);
            } else {
                cell.iter_mut().for_each(|x| *x = 0.0);
                cell[0] = 1.0;
            }
        }
        Ok(Self { h, w, d, data })
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.w + x) * self.d;
        &self.data[o..o + self.d]
    }

    /// Integer down-scale factor relative to an image, if it is one.
    pub fn scale_to(&self, width: usize, height: usize) -> Option<usize> {
        if self.w == 0 || !width.is_multiple_of(self.w) || !height.is_multiple_of(self.h) {
            return None;
        }
        let s = width / self.w;
        (height / self.h == s).then_some(s)
    }

    /// Bilinear sample (not renormalized) at grid coordinates, clamped to the
    /// grid edge. Writes into `out`.
    pub fn sample_into(&self, gx: f64, gy: f64, out: &mut [f64]) {
        let gx = gx.clamp(0.0, (self.w - 1) as f64);
        let gy = gy.clamp(0.0, (self.h - 1) as f64);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        out.iter_mut().for_each(|x| *x = 0.0);
        for (x, y, wgt) in taps {
            if wgt == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(self.cell(x, y)) {
                *o += wgt * c;
            }
        }
    }
}

/// Binary layout: `SAFM`, version byte, `h w d` as u32 LE, then `h*w*d` f32 LE.
pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 17 || &b[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if b[4] != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version: b[4],
        });
    }
    let u = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]) as usize;
    let (h, w, d) = (u(5), u(9), u(13));
    let n = h * w * d;
    if b.len() != 17 + 4 * n {
        return Err(Error::parse(path, format!("payload size does not match {h}x{w}x{d}")));
    }
    let data = b[17..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureMap::new_normalized(h, w, d, data)
}

pub fn save_features(f: &FeatureMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(17 + 4 * f.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    for v in [f.h, f.w, f.d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in &f.data {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
