use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geom::CameraIntrinsics;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    /// Pixel in view `i`.
    pub p: Vector2<f64>,
    /// Pixel in view `j`.
    pub q: Vector2<f64>,
    pub confidence: f64,
}

/// Matches between views `i` and `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub i: usize,
    pub j: usize,
    pub matches: Vec<Match>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Confidence range and uniqueness of `p`. Pixel bounds need the
    /// cameras, see [`CorrespondenceSet::validate_bounds`].
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.matches.len());
        for (k, m) in self.matches.iter().enumerate() {
            if !(m.confidence > 0.0 && m.confidence <= 1.0) {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) match {k}: confidence {} outside (0, 1]",
                    self.i, self.j, m.confidence
                )));
            }
            if !m.p.iter().chain(m.q.iter()).all(|x| x.is_finite()) {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) match {k}: non-finite pixel",
                    self.i, self.j
                )));
            }
            if !seen.insert((m.p.x.to_bits(), m.p.y.to_bits())) {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) match {k}: duplicate p entry ({}, {})",
                    self.i, self.j, m.p.x, m.p.y
                )));
            }
        }
        Ok(())
    }

    pub fn validate_bounds(&self, intr_i: &CameraIntrinsics, intr_j: &CameraIntrinsics) -> Result<()> {
        for (k, m) in self.matches.iter().enumerate() {
            if !intr_i.contains(&m.p) || !intr_j.contains(&m.q) {
                return Err(Error::DimensionMismatch(format!(
                    "pair ({}, {}) match {k}: pixel outside image bounds",
                    self.i, self.j
                )));
            }
        }
        Ok(())
    }
}

/// Text format: a header line `i j count`, then `count` rows of
/// `u1 v1 u2 v2 conf`. Blank lines and `#` comments are ignored.
pub fn load_correspondences(path: &Path) -> Result<CorrespondenceSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set = parse_correspondences(&text).map_err(|(line, msg)| {
        Error::parse(path, format!("line {line}: {msg}"))
    })?;
    set.validate()?;
    Ok(set)
}

fn parse_correspondences(text: &str) -> std::result::Result<CorrespondenceSet, (usize, String)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines.next().ok_or((1, "empty file".to_string()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err((hl, "header must be `i j count`".into()));
    }
    let num = |s: &str, what: &str| -> std::result::Result<usize, (usize, String)> {
        s.parse().map_err(|_| (hl, format!("bad {what} {s:?}")))
    };
    let (i, j, count) = (num(h[0], "i")?, num(h[1], "j")?, num(h[2], "count")?);
    let mut matches = Vec::with_capacity(count);
    for (ln, line) in lines {
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| (ln, "non-numeric field".to_string()))?;
        if vals.len() != 5 {
            return Err((ln, format!("expected 5 fields, found {}", vals.len())));
        }
        matches.push(Match {
            p: Vector2::new(vals[0], vals[1]),
            q: Vector2::new(vals[2], vals[3]),
            confidence: vals[4],
        });
    }
    if matches.len() != count {
        return Err((hl, format!("header declares {count} matches, found {}", matches.len())));
    }
    Ok(CorrespondenceSet { i, j, matches })
}

/// Values are written in shortest round-trip form, so loading reproduces
/// them exactly.
pub fn save_correspondences(set: &CorrespondenceSet, path: &Path) -> Result<()> {
    let mut out = format!("{} {} {}\n", set.i, set.j, set.matches.len());
    for m in &set.matches {
        let _ = writeln!(out, "{} {} {} {} {}", m.p.x, m.p.y, m.q.x, m.q.y, m.confidence);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
