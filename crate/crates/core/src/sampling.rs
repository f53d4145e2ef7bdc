//! Frame-sampling strategies.
//!
//! All strategies return a [`SampleSet`] of `min(K, T)` sorted, distinct
//! frame indices. Randomized strategies take an explicit [`RngStream`].

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curve::{normalize_weights, SimilarityCurve};
use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub indices: Vec<usize>,
    pub k_requested: usize,
    pub center: Option<usize>,
}

impl SampleSet {
    fn new(indices: Vec<usize>, k_requested: usize, center: Option<usize>) -> Self {
        let set = Self {
            indices,
            k_requested,
            center,
        };
        debug_assert!(set.indices.windows(2).all(|w| w[0] < w[1]));
        set
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }

    /// Checks every structural invariant against a horizon of `frames`.
    pub fn check(&self, frames: usize) -> Result<()> {
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return invalid("sample indices are not strictly increasing");
        }
        if self.indices.last().is_some_and(|&i| i >= frames) {
            return invalid(format!("sample index outside [0, {frames})"));
        }
        if self.indices.len() != self.k_requested.min(frames) {
            return invalid(format!(
                "sample has {} indices, expected {}",
                self.indices.len(),
                self.k_requested.min(frames)
            ));
        }
        if let Some(c) = self.center {
            if !self.contains(c) {
                return invalid(format!("sample does not contain its center {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FirstK,
    Uniform,
    Random,
    TopK,
    NearbyK,
    Mcs,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FirstK,
        Strategy::Uniform,
        Strategy::Random,
        Strategy::TopK,
        Strategy::NearbyK,
        Strategy::Mcs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FirstK => "firstk",
            Strategy::Uniform => "uniform",
            Strategy::Random => "random",
            Strategy::TopK => "topk",
            Strategy::NearbyK => "nearbyk",
            Strategy::Mcs => "mcs",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(self, Strategy::Random | Strategy::Mcs)
    }

    /// Whether the strategy is built around the moment center.
    pub fn uses_center(self) -> bool {
        matches!(self, Strategy::TopK | Strategy::NearbyK | Strategy::Mcs)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown sampling strategy '{s}'")))
    }
}

fn check_counts(frames: usize, k: usize) -> Result<()> {
    if frames == 0 {
        return invalid("frame count must be positive");
    }
    if k == 0 {
        return invalid("sample count must be positive");
    }
    Ok(())
}

pub fn sample_first_k(frames: usize, k: usize) -> Result<SampleSet> {
    check_counts(frames, k)?;
    Ok(SampleSet::new((0..k.min(frames)).collect(), k, None))
}

/// `round_half_up(i * (T - 1) / (K - 1))`, or the midpoint when `K == 1`.
pub fn sample_uniform(frames: usize, k: usize) -> Result<SampleSet> {
    check_counts(frames, k)?;
    Ok(SampleSet::new(uniform_indices(frames, k), k, None))
}

fn uniform_indices(frames: usize, k: usize) -> Vec<usize> {
    // Requests beyond T would only repeat frames.
    let k = k.min(frames);
    if k == 1 {
        return vec![(frames - 1) / 2];
    }
    let span = frames - 1;
    let steps = k - 1;
    let mut out: Vec<usize> = (0..k)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect();
    out.dedup();
    out
}

pub fn sample_random(frames: usize, k: usize, stream: &RngStream) -> Result<SampleSet> {
    check_counts(frames, k)?;
    let mut rng = stream.rng();
    let mut indices = rand::seq::index::sample(&mut rng, frames, k.min(frames)).into_vec();
    indices.sort_unstable();
    Ok(SampleSet::new(indices, k, None))
}

/// Frames ranked by descending score, ties to the smaller index.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

pub fn sample_top_k(curve: &SimilarityCurve, k: usize) -> Result<SampleSet> {
    check_counts(curve.len(), k)?;
    let mut indices: Vec<usize> = ranked(curve.values()).into_iter().take(k).collect();
    indices.sort_unstable();
    Ok(SampleSet::new(indices, k, None))
}

/// Contiguous block around `center`, one extra frame on the left when the
/// block length is even, shifted to stay inside the video.
pub fn sample_nearby_k(frames: usize, k: usize, center: usize) -> Result<SampleSet> {
    check_counts(frames, k)?;
    if center >= frames {
        return invalid(format!("center {center} outside [0, {frames})"));
    }
    let len = k.min(frames);
    let start = center.saturating_sub(len / 2).min(frames - len);
    Ok(SampleSet::new(
        (start..start + len).collect(),
        k,
        Some(center),
    ))
}

/// Smallest index whose cumulative probability reaches each `u`.
///
/// `weights[0]` is frame `offset`. Uniforms must lie in `[0, 1]`.
pub fn inverse_cdf_with_uniforms(
    weights: &[f64],
    offset: usize,
    uniforms: &[f64],
) -> Result<Vec<usize>> {
    let p = normalize_weights(weights)?;
    let mut cdf: Vec<f64> = p
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    // Pin the tail to exactly 1 from the last positive bin on, so rounding
    // in the running sum can never hand a draw to trailing zero weights.
    let last_positive = p
        .iter()
        .rposition(|x| *x > 0.0)
        .expect("normalized weights have mass");
    cdf[last_positive..].iter_mut().for_each(|f| *f = 1.0);

    uniforms
        .iter()
        .map(|&u| {
            if !(0.0..=1.0).contains(&u) {
                return invalid(format!("uniform draw {u} outside [0, 1]"));
            }
            let mut i = cdf.partition_point(|f| *f < u);
            // u == 0 would otherwise land on a leading zero-weight bin.
            while p[i] == 0.0 {
                i += 1;
            }
            Ok(offset + i)
        })
        .collect()
}

/// Stratified uniforms `(m + v_m) / k` for `m` in `0..k`, `v_m` in `(0, 1)`.
pub fn stratified_uniforms<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|m| {
            let v: f64 = rng.sample(Open01);
            (m as f64 + v) / k as f64
        })
        .collect()
}

/// `k` inverse-CDF draws over `weights`, labelled from `offset`, in draw order.
pub fn inverse_cdf_sample(
    weights: &[f64],
    offset: usize,
    k: usize,
    stream: &RngStream,
) -> Result<Vec<usize>> {
    let us = stratified_uniforms(k, &mut stream.rng());
    inverse_cdf_with_uniforms(weights, offset, &us)
}

/// Moment-centric sampling result with its side allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McsOutcome {
    pub set: SampleSet,
    pub k_left: usize,
    pub k_right: usize,
    /// True when every non-center weight was zero and uniform coverage was used.
    pub fallback: bool,
}

/// `round_half_up((K - 1) * w_left / (w_left + w_right))`.
pub fn allocate(k: usize, w_left: f64, w_right: f64) -> (usize, usize) {
    let side = k - 1;
    let total = w_left + w_right;
    if total <= 0.0 {
        return (0, 0);
    }
    let share = side as f64 * (w_left / total);
    let k_left = ((share + 0.5).floor() as usize).min(side);
    (k_left, side - k_left)
}

pub fn mcs(
    curve: &SimilarityCurve,
    k: usize,
    center: usize,
    stream: &RngStream,
) -> Result<McsOutcome> {
    let frames = curve.len();
    check_counts(frames, k)?;
    if center >= frames {
        return invalid(format!("center {center} outside [0, {frames})"));
    }
    let s = curve.values();
    let w_left: f64 = s[..center].iter().sum();
    let w_right: f64 = s[center + 1..].iter().sum();

    if w_left + w_right <= 0.0 {
        let indices = uniform_with_center(frames, k, center);
        let k_left = indices.iter().filter(|&&i| i < center).count();
        let k_right = indices.len() - 1 - k_left;
        return Ok(McsOutcome {
            set: SampleSet::new(indices, k, Some(center)),
            k_left,
            k_right,
            fallback: true,
        });
    }

    let (k_left, k_right) = allocate(k, w_left, w_right);
    let mut picked = vec![false; frames];
    picked[center] = true;
    // A side with zero mass always receives a zero allocation.
    if k_left > 0 {
        for i in inverse_cdf_sample(&s[..center], 0, k_left, &stream.child("left"))? {
            picked[i] = true;
        }
    }
    if k_right > 0 {
        for i in inverse_cdf_sample(
            &s[center + 1..],
            center + 1,
            k_right,
            &stream.child("right"),
        )? {
            picked[i] = true;
        }
    }

    let target = k.min(frames);
    let mut have = picked.iter().filter(|p| **p).count();
    if have < target {
        for i in ranked(s) {
            if have == target {
                break;
            }
            if !picked[i] {
                picked[i] = true;
                have += 1;
            }
        }
    }
    let indices = picked
        .iter()
        .enumerate()
        .filter(|(_, p)| **p)
        .map(|(i, _)| i)
        .collect();
    Ok(McsOutcome {
        set: SampleSet::new(indices, k, Some(center)),
        k_left,
        k_right,
        fallback: false,
    })
}

// Uniform coverage, with the sample nearest the center (ties to the
// smaller index) moved onto the center.
fn uniform_with_center(frames: usize, k: usize, center: usize) -> Vec<usize> {
    let mut idx = uniform_indices(frames, k);
    if idx.binary_search(&center).is_err() {
        let nearest = (0..idx.len())
            .min_by_key(|&j| (idx[j].abs_diff(center), idx[j]))
            .expect("at least one uniform sample");
        idx[nearest] = center;
        idx.sort_unstable();
    }
    idx
}

/// Dispatches to a strategy; `center` is required by NearbyK and MCS.
pub fn sample(
    strategy: Strategy,
    curve: &SimilarityCurve,
    k: usize,
    center: Option<usize>,
    stream: &RngStream,
) -> Result<McsOutcome> {
    let frames = curve.len();
    let need_center =
        || center.ok_or_else(|| Error::Validation(format!("{strategy} needs a moment center")));
    let set = match strategy {
        Strategy::FirstK => sample_first_k(frames, k)?,
        Strategy::Uniform => sample_uniform(frames, k)?,
        Strategy::Random => sample_random(frames, k, stream)?,
        Strategy::TopK => sample_top_k(curve, k)?,
        Strategy::NearbyK => sample_nearby_k(frames, k, need_center()?)?,
        Strategy::Mcs => return mcs(curve, k, need_center()?, stream),
    };
    Ok(McsOutcome {
        set,
        k_left: 0,
        k_right: 0,
        fallback: false,
    })
}
