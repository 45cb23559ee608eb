//! Portable float map: ASCII header, little-endian float32 payload (negative
//! scale), rows stored bottom-to-top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height * channels);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for v in (0..height).rev() {
        for x in &data[v * row..(v + 1) * row] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, channels, data)` with rows top-to-bottom.
pub(crate) fn read(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, format!("truncated header: missing {what}")));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let channels = match token("tag")?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, format!("unknown PFM tag {other:?}"))),
    };
    let width: usize = token("width")?
        .parse()
        .map_err(|_| Error::parse(path, "bad width"))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| Error::parse(path, "bad height"))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|_| Error::parse(path, "bad scale"))?;
    if !(scale < 0.0) {
        return Err(Error::parse(path, "only little-endian PFM (negative scale) is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos + 4 * n {
        return Err(Error::parse(path, "truncated payload"));
    }
    let raw: Vec<f32> = bytes[pos..pos + 4 * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for v in 0..height {
        let src = (height - 1 - v) * row;
        data[v * row..(v + 1) * row].copy_from_slice(&raw[src..src + row]);
    }
    Ok((width, height, channels, data))
}
