//! Temporal sentence grounding on a similarity curve.

use serde::{Deserialize, Serialize};

use crate::curve::SimilarityCurve;
use crate::error::{invalid, Result};

/// Default threshold for segment extraction.
pub const DEFAULT_THETA: f64 = 0.4;

/// Recall thresholds reported by [`tsg_metrics`] by default.
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Window maximizing cumulative similarity and its center frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentResult {
    pub window_start: usize,
    pub center: usize,
    pub window: usize,
}

impl MomentResult {
    pub fn window_end(&self) -> usize {
        self.window_start + self.window - 1
    }
}

/// Inclusive frame run with its mean score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl Segment {
    pub fn frame_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn interval(&self) -> Interval {
        Interval::frames(self.start, self.end)
    }
}

/// Half-open interval on the real time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start > end {
            return invalid(format!("malformed interval [{start}, {end})"));
        }
        Ok(Self { start, end })
    }

    /// Frames `start..=end` as `[start, end + 1)`, so one frame has length 1.
    pub fn frames(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self {
            start: start as f64,
            end: (end + 1) as f64,
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

pub fn default_window(frames: usize) -> usize {
    frames.div_ceil(10).clamp(1, frames.max(1))
}

/// Start of the length-`w` window with the largest sum; ties go to the
/// smallest start.
pub fn moment_center(curve: &SimilarityCurve, w: usize) -> Result<MomentResult> {
    let s = curve.values();
    let n = s.len();
    if w == 0 || w > n {
        return invalid(format!("window {w} must be in [1, {n}]"));
    }

    // Running sums locate the near-optimal starts; the survivors are then
    // re-summed left to right so exact ties resolve to the smallest start
    // instead of to accumulated rounding.
    let mut running = Vec::with_capacity(n - w + 1);
    let mut acc: f64 = s[..w].iter().sum();
    running.push(acc);
    for i in 1..=n - w {
        acc += s[i + w - 1] - s[i - 1];
        running.push(acc);
    }
    let best = running.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-9 * (1.0 + best.abs());

    let mut best_start = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for (i, r) in running.iter().enumerate() {
        if *r < best - slack {
            continue;
        }
        let exact = curve.sum_over(i, i + w - 1);
        if exact > best_sum {
            best_sum = exact;
            best_start = i;
        }
    }
    Ok(MomentResult {
        window_start: best_start,
        center: best_start + w / 2,
        window: w,
    })
}

/// Maximal runs with `S_i >= theta`.
pub fn extract_segments(curve: &SimilarityCurve, theta: f64) -> Vec<Segment> {
    let s = curve.values();
    let mut out = Vec::new();
    let mut run_start = None;
    for i in 0..=s.len() {
        let hit = i < s.len() && s[i] >= theta;
        match (hit, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                out.push(Segment {
                    start,
                    end: i - 1,
                    score: curve.mean_over(start, i - 1),
                });
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// Segment with the largest total score; ties go to the earliest start.
pub fn best_segment(segments: &[Segment], curve: &SimilarityCurve) -> Option<Segment> {
    let mut best: Option<(f64, Segment)> = None;
    for seg in segments {
        let mass = curve.sum_over(seg.start, seg.end);
        let better = match best {
            None => true,
            Some((m, b)) => mass > m || (mass == m && seg.start < b.start),
        };
        if better {
            best = Some((mass, *seg));
        }
    }
    best.map(|(_, s)| s)
}

pub fn interval_iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        // Two degenerate points.
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsgReport {
    /// `(threshold, recall)` sorted by threshold.
    pub recalls: Vec<(f64, f64)>,
    pub mean_iou: f64,
}

impl TsgReport {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, r)| *r)
    }
}

/// Recall at each IoU threshold plus mean IoU. A missing prediction scores 0.
pub fn tsg_metrics(
    pairs: &[(Option<Interval>, Interval)],
    thresholds: &[f64],
) -> Result<TsgReport> {
    if pairs.is_empty() {
        return invalid("tsg_metrics needs at least one prediction/ground-truth pair");
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return invalid(format!("IoU threshold {t} is outside (0, 1]"));
    }
    let ious: Vec<f64> = pairs
        .iter()
        .map(|(pred, gt)| pred.map_or(0.0, |p| interval_iou(p, *gt)))
        .collect();
    let n = ious.len() as f64;
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let recalls = ts
        .into_iter()
        .map(|t| (t, ious.iter().filter(|iou| **iou >= t).count() as f64 / n))
        .collect();
    Ok(TsgReport {
        recalls,
        mean_iou: ious.iter().sum::<f64>() / n,
    })
}

/// Everything grounding produces for one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub moment: MomentResult,
    pub segments: Vec<Segment>,
    pub best: Option<Segment>,
    /// Best thresholded segment, or the moment window when nothing passes.
    pub predicted: (usize, usize),
}

pub fn ground(curve: &SimilarityCurve, window: usize, theta: f64) -> Result<Grounding> {
    if !(theta > 0.0 && theta < 1.0) {
        return invalid(format!("theta must lie in (0, 1), got {theta}"));
    }
    let moment = moment_center(curve, window)?;
    let segments = extract_segments(curve, theta);
    let best = best_segment(&segments, curve);
    let predicted = best.map_or((moment.window_start, moment.window_end()), |s| {
        (s.start, s.end)
    });
    Ok(Grounding {
        moment,
        segments,
        best,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sim(v: &[f64]) -> SimilarityCurve {
        SimilarityCurve::new(v.to_vec()).unwrap()
    }

    // Independent oracle: every window summed from scratch.
    fn brute_moment(s: &[f64], w: usize) -> usize {
        let mut best = 0;
        let mut best_sum = f64::NEG_INFINITY;
        for i in 0..=s.len() - w {
            let mut sum = 0.0;
            for v in &s[i..i + w] {
                sum += v;
            }
            if sum > best_sum {
                best_sum = sum;
                best = i;
            }
        }
        best
    }

    #[test]
    fn moment_examples() {
        let m = moment_center(&sim(&[0.1, 0.2, 0.9, 0.8, 0.1]), 2).unwrap();
        assert_eq!((m.window_start, m.center), (2, 3));

        let flat = sim(&[0.3; 17]);
        for w in 1..=17 {
            let m = moment_center(&flat, w).unwrap();
            assert_eq!((m.window_start, m.center), (0, w / 2));
        }

        let m = moment_center(&sim(&[0.5, 0.1, 0.9, 0.2, 0.3, 0.0]), 6).unwrap();
        assert_eq!((m.window_start, m.center), (0, 3));

        assert!(moment_center(&flat, 18).is_err());
        assert!(moment_center(&flat, 0).is_err());
    }

    #[test]
    fn default_window_is_tenth_rounded_up() {
        assert_eq!(default_window(1), 1);
        assert_eq!(default_window(10), 1);
        assert_eq!(default_window(11), 2);
        assert_eq!(default_window(120), 12);
    }

    #[test]
    fn segment_examples() {
        let c = sim(&[0.1, 0.5, 0.6, 0.1, 0.7]);
        let segs = extract_segments(&c, 0.4);
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start, segs[0].end), (1, 2));
        assert_abs_diff_eq!(segs[0].score, 0.55, epsilon = 1e-12);
        assert_eq!((segs[1].start, segs[1].end), (4, 4));
        assert_abs_diff_eq!(segs[1].score, 0.7, epsilon = 1e-12);

        let best = best_segment(&segs, &c).unwrap();
        assert_eq!((best.start, best.end), (1, 2));
        assert_eq!(best_segment(&segs[1..], &c), Some(segs[1]));
        assert_eq!(best_segment(&[], &c), None);

        assert!(extract_segments(&sim(&[0.1, 0.2]), 0.4).is_empty());
        let all = extract_segments(&sim(&[0.4, 0.9, 0.5]), 0.4);
        assert_eq!((all.len(), all[0].start, all[0].end), (1, 0, 2));
    }

    #[test]
    fn best_segment_tie_prefers_earliest() {
        let c = sim(&[0.5, 0.0, 0.5]);
        let segs = extract_segments(&c, 0.4);
        assert_eq!(best_segment(&segs, &c).unwrap().start, 0);
    }

    #[test]
    fn iou_examples() {
        let a = Interval::new(2.0, 7.0).unwrap();
        let b = Interval::new(4.0, 9.0).unwrap();
        assert_abs_diff_eq!(interval_iou(a, b), 3.0 / 7.0, epsilon = 1e-15);
        assert_eq!(interval_iou(a, a), 1.0);
        assert_eq!(interval_iou(a, Interval::new(8.0, 9.0).unwrap()), 0.0);
        assert_eq!(
            interval_iou(Interval::frames(3, 3), Interval::frames(3, 3)),
            1.0
        );
        assert!(Interval::new(3.0, 1.0).is_err());
    }

    #[test]
    fn tsg_examples() {
        let pair = (
            Some(Interval::new(2.0, 7.0).unwrap()),
            Interval::new(4.0, 9.0).unwrap(),
        );
        let r = tsg_metrics(&[pair], &DEFAULT_RECALL_THRESHOLDS).unwrap();
        assert_eq!(r.recall_at(0.3), Some(1.0));
        assert_eq!(r.recall_at(0.5), Some(0.0));
        assert_eq!(r.recall_at(0.7), Some(0.0));
        assert_abs_diff_eq!(r.mean_iou, 3.0 / 7.0, epsilon = 1e-12);

        let gt = Interval::frames(5, 9);
        let r = tsg_metrics(&[(Some(gt), gt), (None, gt)], &[0.5]).unwrap();
        assert_eq!(r.recall_at(0.5), Some(0.5));
        assert_eq!(r.mean_iou, 0.5);

        let r = tsg_metrics(&[(Some(gt), gt); 3], &DEFAULT_RECALL_THRESHOLDS).unwrap();
        assert!(r.recalls.iter().all(|(_, v)| *v == 1.0));
        assert_eq!(r.mean_iou, 1.0);

        assert!(tsg_metrics(&[], &[0.5]).is_err());
        assert!(tsg_metrics(&[(None, gt)], &[0.0]).is_err());
    }

    #[test]
    fn ground_falls_back_to_window() {
        let c = sim(&[0.1, 0.2, 0.3, 0.2, 0.1]);
        let g = ground(&c, 3, 0.4).unwrap();
        assert!(g.best.is_none());
        assert_eq!(g.predicted, (1, 3));
    }

    fn unit_curve(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..max_len)
    }

    proptest! {
        #[test]
        fn moment_matches_brute_force(v in unit_curve(200), wf in 0.0f64..1.0) {
            let w = 1 + ((v.len() - 1) as f64 * wf) as usize;
            let m = moment_center(&sim(&v), w).unwrap();
            prop_assert_eq!(m.window_start, brute_moment(&v, w));
            prop_assert_eq!(m.center, m.window_start + w / 2);
        }

        #[test]
        fn segments_are_sorted_disjoint_maximal(v in unit_curve(80), theta in 0.01f64..0.99) {
            let segs = extract_segments(&sim(&v), theta);
            for pair in segs.windows(2) {
                prop_assert!(pair[0].end + 1 < pair[1].start);
            }
            for s in &segs {
                prop_assert!((s.start..=s.end).all(|i| v[i] >= theta));
                prop_assert!(s.start == 0 || v[s.start - 1] < theta);
                prop_assert!(s.end + 1 == v.len() || v[s.end + 1] < theta);
            }
            let covered: usize = segs.iter().map(Segment::frame_count).sum();
            prop_assert_eq!(covered, v.iter().filter(|x| **x >= theta).count());
        }

        #[test]
        fn higher_theta_covers_subset(v in unit_curve(80), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = sim(&v);
            let low = extract_segments(&c, lo);
            for s in extract_segments(&c, hi) {
                prop_assert!(low.iter().any(|l| l.start <= s.start && s.end <= l.end));
            }
        }

        #[test]
        fn iou_symmetric_bounded(a0 in 0usize..50, al in 0usize..20, b0 in 0usize..50, bl in 0usize..20) {
            let a = Interval::frames(a0, a0 + al);
            let b = Interval::frames(b0, b0 + bl);
            let x = interval_iou(a, b);
            prop_assert_eq!(x, interval_iou(b, a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, a == b);
        }

        #[test]
        fn recalls_non_increasing(ious in prop::collection::vec((0usize..30, 0usize..10), 1..20)) {
            let gt = Interval::frames(10, 19);
            let pairs: Vec<_> = ious.iter().map(|(s, l)| (Some(Interval::frames(*s, s + l)), gt)).collect();
            let r = tsg_metrics(&pairs, &[0.1, 0.3, 0.5, 0.7, 0.9, 1.0]).unwrap();
            prop_assert!(r.recalls.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }
}
