//! Mask quality: region similarity J, boundary F-measure, J&F and cIoU.
//!
//! The boundary measure is a simplified matcher for small synthetic grids:
//! boundary pixels are mask pixels with a 4-neighbour in the background (or
//! off the grid), and two boundary pixels match when their Chebyshev
//! distance is at most `tol`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_BOUNDARY_TOL: usize = 1;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskFrame {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskFrame {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("mask dimensions must be positive");
        }
        if bits.len() != height * width {
            return invalid(format!(
                "mask has {} bits, expected {height}x{width}",
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Filled axis-aligned rectangle, clipped to the grid.
    pub fn rect(
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        let mut m = Self::empty(height, width);
        for r in top..(top + rows).min(height) {
            for c in left..(left + cols).min(width) {
                m.bits[r * width + c] = true;
            }
        }
        m
    }

    /// Parses rows of `'0'`/`'1'` characters.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut bits = Vec::with_capacity(height * width);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return invalid(format!(
                    "mask row {i} has length {}, expected {width}",
                    row.len()
                ));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return invalid(format!("mask row {i} contains '{other}'")),
                }
            }
        }
        Self::from_bits(height, width, bits)
    }

    pub fn to_rows(&self) -> Vec<String> {
        self.bits
            .chunks(self.width)
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// The first `keep` foreground pixels in row-major order.
    pub fn truncated(&self, keep: usize) -> Self {
        let mut left = keep;
        let bits = self
            .bits
            .iter()
            .map(|&b| {
                if b && left > 0 {
                    left -= 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        Self { bits, ..*self }
    }

    /// Pixels of the mask that touch background or the grid edge (4-connectivity).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                if edge
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1)
                {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return invalid(format!(
                "mask dimensions differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }

    fn overlap(&self, other: &Self) -> Result<(usize, usize)> {
        self.same_dims(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Ok((inter, union))
    }
}

/// On-disk mask: `{"h": H, "w": W, "rows": ["0110", ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFile {
    pub h: usize,
    pub w: usize,
    pub rows: Vec<String>,
}

impl From<&MaskFrame> for MaskFile {
    fn from(m: &MaskFrame) -> Self {
        Self {
            h: m.height,
            w: m.width,
            rows: m.to_rows(),
        }
    }
}

impl TryFrom<MaskFile> for MaskFrame {
    type Error = crate::Error;

    fn try_from(f: MaskFile) -> Result<Self> {
        let m = MaskFrame::from_rows(&f.rows)?;
        if (m.height, m.width) != (f.h, f.w) {
            return invalid(format!(
                "mask declares {}x{} but rows are {}x{}",
                f.h, f.w, m.height, m.width
            ));
        }
        Ok(m)
    }
}

impl Serialize for MaskFrame {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskFrame {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        MaskFile::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; two empty masks agree perfectly.
pub fn region_j(pred: &MaskFrame, gt: &MaskFrame) -> Result<f64> {
    let (inter, union) = pred.overlap(gt)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

// Fraction of `from` pixels with a `to` pixel within Chebyshev distance `tol`.
fn matched_fraction(from: &[(usize, usize)], to: &MaskFrame, tol: usize) -> f64 {
    let hits = from
        .iter()
        .filter(|&&(r, c)| {
            let rows = r.saturating_sub(tol)..=(r + tol).min(to.height - 1);
            rows.into_iter().any(|rr| {
                let cols = c.saturating_sub(tol)..=(c + tol).min(to.width - 1);
                cols.into_iter().any(|cc| to.get(rr, cc))
            })
        })
        .count();
    hits as f64 / from.len() as f64
}

pub fn boundary_f(pred: &MaskFrame, gt: &MaskFrame, tol: usize) -> Result<f64> {
    pred.same_dims(gt)?;
    let pb = pred.boundary();
    let gb = gt.boundary();
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let as_mask = |pts: &[(usize, usize)]| {
        let mut m = MaskFrame::empty(gt.height, gt.width);
        for &(r, c) in pts {
            m.bits[r * gt.width + c] = true;
        }
        m
    };
    let precision = matched_fraction(&pb, &as_mask(&gb), tol);
    let recall = matched_fraction(&gb, &as_mask(&pb), tol);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JfSummary {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
}

/// Per-frame J and F.
pub fn per_frame_jf(preds: &[MaskFrame], gts: &[MaskFrame], tol: usize) -> Result<Vec<(f64, f64)>> {
    if preds.len() != gts.len() {
        return invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        ));
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Ok((region_j(p, g)?, boundary_f(p, g, tol)?)))
        .collect()
}

pub fn jf_summary(preds: &[MaskFrame], gts: &[MaskFrame], tol: usize) -> Result<JfSummary> {
    if preds.is_empty() {
        return invalid("J&F needs at least one frame");
    }
    let frames = per_frame_jf(preds, gts, tol)?;
    Ok(summarize(&frames))
}

pub(crate) fn summarize(frames: &[(f64, f64)]) -> JfSummary {
    let n = frames.len() as f64;
    let j_mean = frames.iter().map(|f| f.0).sum::<f64>() / n;
    let f_mean = frames.iter().map(|f| f.1).sum::<f64>() / n;
    JfSummary {
        j_mean,
        f_mean,
        jf: (j_mean + f_mean) / 2.0,
    }
}

/// Cumulative intersection over cumulative union.
pub fn ciou(preds: &[MaskFrame], gts: &[MaskFrame]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return invalid("cIoU needs equal-length, non-empty mask sequences");
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = p.overlap(g)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
