use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::io::pfm;

/// Linear RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: [f64; 3]) {
        self.data[v * self.width + u] = c;
    }

    /// Luma (Rec. 601 weights).
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }

    /// Box-filter downsample by an integer factor (trailing partial blocks dropped).
    pub fn downsample(&self, factor: usize) -> ImageRgb {
        let w = self.width / factor;
        let h = self.height / factor;
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = ImageRgb::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let c = self.get(x * factor + dx, y * factor + dy);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                out.set(x, y, [acc[0] * norm, acc[1] * norm, acc[2] * norm]);
            }
        }
        out
    }
}

/// Load an 8/16-bit PNG or a colour PFM.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    if has_ext(path, "pfm") {
        let (w, h, ch, data) = pfm::read(path)?;
        if ch != 3 {
            return Err(Error::parse(path, "expected a colour (PF) file"));
        }
        let px = data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        return ImageRgb::from_data(w, h, px);
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            msg: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img.color().bytes_per_pixel() / img.color().channel_count() {
        1 => img
            .to_rgb8()
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect(),
        _ => img
            .to_rgb16()
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 65535.0,
                    p[1] as f64 / 65535.0,
                    p[2] as f64 / 65535.0,
                ]
            })
            .collect(),
    };
    ImageRgb::from_data(w, h, data)
}

/// Save as 8-bit PNG (values clamped and rounded) or as colour PFM by extension.
pub fn save_image(img: &ImageRgb, path: &Path) -> Result<()> {
    if has_ext(path, "pfm") {
        let data: Vec<f32> = img.data.iter().flat_map(|c| c.map(|x| x as f32)).collect();
        return pfm::write(path, img.width, img.height, 3, &data);
    }
    let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |u, v| {
            let c = img.get(u as usize, v as usize);
            Rgb([to8(c[0]), to8(c[1]), to8(c[2])])
        });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub(crate) fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}
