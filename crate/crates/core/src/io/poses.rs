use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::Pose;

/// Parse one or more world-to-camera poses: each pose is three rows of four
/// numbers (`[R | t]`), poses separated by blank lines. `#` starts a comment.
pub fn parse_poses(text: &str) -> std::result::Result<Vec<Pose>, String> {
    let mut poses = Vec::new();
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let flush = |rows: &mut Vec<[f64; 4]>, poses: &mut Vec<Pose>, line: usize| -> std::result::Result<(), String> {
        if rows.is_empty() {
            return Ok(());
        }
        if rows.len() != 3 {
            return Err(format!("line {line}: pose block has {} rows, expected 3", rows.len()));
        }
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        let p = Pose::new(r, t).map_err(|e| format!("line {line}: {e}"))?;
        poses.push(p);
        rows.clear();
        Ok(())
    };
    let mut last = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        last = n + 1;
        if line.is_empty() {
            flush(&mut rows, &mut poses, n + 1)?;
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| format!("line {}: non-numeric field", n + 1))?;
        if vals.len() != 4 {
            return Err(format!("line {}: expected 4 values, found {}", n + 1, vals.len()));
        }
        rows.push([vals[0], vals[1], vals[2], vals[3]]);
        if rows.len() == 3 {
            flush(&mut rows, &mut poses, n + 1)?;
        }
    }
    flush(&mut rows, &mut poses, last)?;
    Ok(poses)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for (k, p) in poses.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let r = p.rotation();
        let t = p.translation();
        for i in 0..3 {
            let _ = writeln!(out, "{} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        }
    }
    out
}

pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|m| Error::parse(path, m))
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let mut v = load_poses(path)?;
    if v.len() != 1 {
        return Err(Error::parse(path, format!("expected one pose, found {}", v.len())));
    }
    Ok(v.remove(0))
}

/// Written in shortest round-trip decimal form: loading is exact.
pub fn save_poses(poses: &[Pose], path: &Path) -> Result<()> {
    fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}
