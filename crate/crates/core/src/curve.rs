//! Per-frame relevance curves and their conditioning.
//!
//! Raw logits arrive at token-time resolution `L_t`. The conditioning chain
//! is: resample to the frame count `T`, apply the sigmoid, then smooth.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relevance scores in `[0, 1]`, one per frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityCurve {
    values: Vec<f64>,
}

/// Unbounded pre-activation scores, one per token-time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawScoreCurve {
    values: Vec<f64>,
}

impl SimilarityCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("similarity curve must have at least one frame");
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return invalid(format!("curve value {v} at frame {i} is outside [0, 1]"));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Mean of the values over the inclusive frame range.
    pub fn mean_over(&self, start: usize, end: usize) -> f64 {
        self.sum_over(start, end) / (end - start + 1) as f64
    }

    /// Sum of the values over the inclusive frame range, accumulated left to right.
    pub fn sum_over(&self, start: usize, end: usize) -> f64 {
        self.values[start..=end].iter().sum()
    }
}

impl RawScoreCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("raw score curve must have at least one step");
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return invalid(format!("raw score {v} at step {i} is not finite"));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Curves that can be linearly resampled without leaving their domain.
pub trait Resample: Sized {
    fn samples(&self) -> &[f64];
    fn from_resampled(values: Vec<f64>) -> Self;
}

impl Resample for SimilarityCurve {
    fn samples(&self) -> &[f64] {
        &self.values
    }
    // Interpolation is convex, so [0, 1] is preserved.
    fn from_resampled(values: Vec<f64>) -> Self {
        Self { values }
    }
}

impl Resample for RawScoreCurve {
    fn samples(&self) -> &[f64] {
        &self.values
    }
    fn from_resampled(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(raw: &RawScoreCurve) -> SimilarityCurve {
    SimilarityCurve {
        values: raw.values.iter().map(|&x| sigmoid(x)).collect(),
    }
}

/// Gaussian kernel settings. Defaults are one frame of spread over a
/// seven-tap window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub sigma: f64,
    pub radius: usize,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            radius: 3,
        }
    }
}

impl SmoothParams {
    /// Shrinks the radius so it fits a curve of `len` frames.
    pub fn fitted(self, len: usize) -> Self {
        Self {
            radius: self.radius.min(len.saturating_sub(1)),
            ..self
        }
    }
}

/// Normalized taps `exp(-k^2 / 2 sigma^2)` for `k` in `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= z);
    taps
}

// Half-sample symmetric reflection: -1 -> 0, -2 -> 1, n -> n-1.
fn reflect(i: i64, n: i64) -> usize {
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j as usize
}

pub fn gaussian_smooth(
    curve: &SimilarityCurve,
    sigma: f64,
    radius: usize,
) -> Result<SimilarityCurve> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return invalid(format!("smoothing sigma must be positive, got {sigma}"));
    }
    if radius == 0 {
        return invalid("smoothing radius must be positive");
    }
    let n = curve.len();
    if radius >= n {
        return invalid(format!(
            "smoothing radius {radius} must be smaller than the curve length {n}"
        ));
    }
    let kernel = gaussian_kernel(sigma, radius);
    let (lo, hi) = min_max(&curve.values);
    let r = radius as i64;
    let values = (0..n as i64)
        .map(|i| {
            let acc: f64 = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * curve.values[reflect(i + k, n as i64)])
                .sum();
            // A convex combination cannot leave the input range; clamp away rounding.
            acc.clamp(lo, hi)
        })
        .collect();
    Ok(SimilarityCurve { values })
}

/// Align-corners linear resampling to `target_len` points.
///
/// Output point `j` reads source coordinate `j * (L - 1) / (target_len - 1)`.
/// A single output point takes the source value at index `(L - 1) / 2`.
pub fn resample_linear<C: Resample>(curve: &C, target_len: usize) -> Result<C> {
    let src = curve.samples();
    if src.is_empty() {
        return invalid("cannot resample an empty curve");
    }
    if target_len == 0 {
        return invalid("resample target length must be positive");
    }
    let n = src.len();
    if target_len == 1 {
        return Ok(C::from_resampled(vec![src[(n - 1) / 2]]));
    }
    let denom = target_len - 1;
    let values = (0..target_len)
        .map(|j| {
            // Integer position keeps endpoints and identity resampling exact.
            let num = j * (n - 1);
            let i0 = num / denom;
            let rem = num % denom;
            if rem == 0 {
                return src[i0];
            }
            let t = rem as f64 / denom as f64;
            let (a, b) = (src[i0], src[i0 + 1]);
            ((1.0 - t) * a + t * b).clamp(a.min(b), a.max(b))
        })
        .collect();
    Ok(C::from_resampled(values))
}

pub fn normalize_weights(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return invalid(format!("weights must be finite and non-negative, got {v}"));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Resample raw logits to `frames`, activate, then smooth.
pub fn condition(
    raw: &RawScoreCurve,
    frames: usize,
    smooth: Option<SmoothParams>,
) -> Result<SimilarityCurve> {
    let resampled = resample_linear(raw, frames)?;
    let activated = activate(&resampled);
    match smooth {
        Some(p) => smooth_fitted(&activated, p),
        None => Ok(activated),
    }
}

/// Smooths with the radius shrunk to fit; single-frame curves pass through.
pub fn smooth_fitted(curve: &SimilarityCurve, params: SmoothParams) -> Result<SimilarityCurve> {
    let p = params.fitted(curve.len());
    if p.radius == 0 {
        return Ok(curve.clone());
    }
    gaussian_smooth(curve, p.sigma, p.radius)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// On-disk curve: `{"length": T, "values": [...], "raw": false}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    pub length: usize,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub raw: bool,
}

/// A parsed curve file, either already in `[0, 1]` or raw logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedCurve {
    Similarity(SimilarityCurve),
    Raw(RawScoreCurve),
}

impl CurveFile {
    pub fn from_similarity(curve: &SimilarityCurve) -> Self {
        Self {
            length: curve.len(),
            values: curve.values.clone(),
            raw: false,
        }
    }

    pub fn from_raw(curve: &RawScoreCurve) -> Self {
        Self {
            length: curve.len(),
            values: curve.values.clone(),
            raw: true,
        }
    }

    pub fn into_curve(self) -> Result<LoadedCurve> {
        if self.length != self.values.len() {
            return invalid(format!(
                "curve declares length {} but has {} values",
                self.length,
                self.values.len()
            ));
        }
        if self.raw {
            RawScoreCurve::new(self.values).map(LoadedCurve::Raw)
        } else {
            SimilarityCurve::new(self.values).map(LoadedCurve::Similarity)
        }
    }
}
