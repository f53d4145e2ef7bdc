//! Bidirectional anchor-updated propagation.
//!
//! Propagation starts at the moment center, runs forward to the last frame,
//! then restarts at the center and runs backward to frame 0. At each anchor
//! frame the tracker's memory is cleared and re-seeded from a fresh
//! prediction when the accumulated tracking confidence drops below
//! `lambda * S^p`:
//!
//! ```text
//! clear  <=>  prod(S^t since last reset) < lambda * S^p
//! ```
//!
//! The running product resets to 1 after every clear and at the start of
//! each pass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{invalid, Result};
use crate::metrics::MaskFrame;
use crate::sampling::SampleSet;

pub const DEFAULT_LAMBDA: f64 = 0.9;

/// True when memory should be cleared at this anchor.
pub fn memory_update_decision(cum_track: f64, s_p: f64, lambda: f64) -> bool {
    cum_track < lambda * s_p
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationPlan {
    pub horizon: usize,
    pub anchor: usize,
    pub forward_order: Vec<usize>,
    pub backward_order: Vec<usize>,
    pub anchor_set: BTreeSet<usize>,
}

pub fn plan_bap(horizon: usize, anchor: usize, anchors: &SampleSet) -> Result<PropagationPlan> {
    if anchor >= horizon {
        return invalid(format!("anchor {anchor} outside [0, {horizon})"));
    }
    if !anchors.contains(anchor) {
        return invalid(format!("anchor {anchor} is not among the sampled frames"));
    }
    if let Some(&i) = anchors.indices.iter().find(|&&i| i >= horizon) {
        return invalid(format!("sampled frame {i} outside [0, {horizon})"));
    }
    Ok(PropagationPlan {
        horizon,
        anchor,
        forward_order: (anchor + 1..horizon).collect(),
        backward_order: (0..anchor).rev().collect(),
        anchor_set: anchors.indices.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    pub mask: MaskFrame,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: MaskFrame,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("tracker failed at frame {frame}: {reason}")]
pub struct TrackerFailure {
    pub frame: usize,
    pub reason: String,
}

/// The segmentation tracker as seen by propagation.
pub trait TrackerPort {
    type State;

    /// Mask dimensions, used for the empty mask emitted on failure.
    fn dims(&self) -> (usize, usize);

    fn init(&self, frame: usize, seed: &MaskFrame) -> Self::State;

    /// Advances one frame. Scores lie in `[0, 1]`.
    fn step(
        &self,
        state: &mut Self::State,
        frame: usize,
    ) -> std::result::Result<TrackStep, TrackerFailure>;

    /// Fresh single-frame prediction, independent of memory.
    fn predict(&self, frame: usize) -> Prediction;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Memory-update decision taken at an anchor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub frame: usize,
    pub direction: Direction,
    pub cum_track: f64,
    pub s_p: f64,
    pub threshold: f64,
    pub cleared: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub events: Vec<UpdateEvent>,
}

impl UpdateLog {
    pub fn updates(&self) -> usize {
        self.events.iter().filter(|e| e.cleared).count()
    }

    pub fn cleared_frames(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.cleared)
            .map(|e| e.frame)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOutput {
    pub masks: Vec<MaskFrame>,
    /// Tracking score per frame; the start frame reports its prediction score.
    pub scores: Vec<f64>,
    pub log: UpdateLog,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return invalid(format!("lambda must lie in (0, 1], got {lambda}"));
    }
    Ok(())
}

pub fn run_bap<T: TrackerPort>(
    plan: &PropagationPlan,
    tracker: &T,
    lambda: f64,
) -> Result<PropagationOutput> {
    check_lambda(lambda)?;
    let (h, w) = tracker.dims();
    let mut masks: Vec<Option<MaskFrame>> = vec![None; plan.horizon];
    let mut scores = vec![0.0; plan.horizon];
    let mut log = UpdateLog::default();

    let start = tracker.predict(plan.anchor);
    masks[plan.anchor] = Some(start.mask.clone());
    scores[plan.anchor] = start.score;

    for (direction, order) in [
        (Direction::Forward, &plan.forward_order),
        (Direction::Backward, &plan.backward_order),
    ] {
        let mut state = tracker.init(plan.anchor, &start.mask);
        let mut cum_track = 1.0;
        for &frame in order {
            let (mask, s_t) = match tracker.step(&mut state, frame) {
                Ok(step) => (step.mask, step.score),
                Err(_) => (MaskFrame::empty(h, w), 0.0),
            };
            let mut out = mask;
            let mut cleared = false;
            if plan.anchor_set.contains(&frame) {
                let fresh = tracker.predict(frame);
                cleared = memory_update_decision(cum_track, fresh.score, lambda);
                log.events.push(UpdateEvent {
                    frame,
                    direction,
                    cum_track,
                    s_p: fresh.score,
                    threshold: lambda * fresh.score,
                    cleared,
                });
                if cleared {
                    state = tracker.init(frame, &fresh.mask);
                    out = fresh.mask;
                    cum_track = 1.0;
                }
            }
            if !cleared {
                cum_track *= s_t;
            }
            masks[frame] = Some(out);
            scores[frame] = s_t;
        }
    }

    let masks = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            m.ok_or_else(|| crate::Error::Validation(format!("frame {i} was never visited")))
        })
        .collect::<Result<_>>()?;
    Ok(PropagationOutput { masks, scores, log })
}

/// Plain forward propagation from frame 0 with no memory updates.
pub fn run_forward_baseline<T: TrackerPort>(
    horizon: usize,
    tracker: &T,
) -> Result<PropagationOutput> {
    if horizon == 0 {
        return invalid("horizon must be positive");
    }
    let (h, w) = tracker.dims();
    let start = tracker.predict(0);
    let mut state = tracker.init(0, &start.mask);
    let mut masks = vec![start.mask];
    let mut scores = vec![start.score];
    for frame in 1..horizon {
        let (mask, s) = match tracker.step(&mut state, frame) {
            Ok(step) => (step.mask, step.score),
            Err(_) => (MaskFrame::empty(h, w), 0.0),
        };
        masks.push(mask);
        scores.push(s);
    }
    Ok(PropagationOutput {
        masks,
        scores,
        log: UpdateLog::default(),
    })
}

/// Parameters of the deterministic stand-in tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockTrackerParams {
    /// Tracking score before any distance decay.
    pub base_track_score: f64,
    /// Tracking score lost per frame of distance from the last init.
    pub track_decay: f64,
    /// Mask quality lost per frame of distance from the last init.
    pub quality_decay: f64,
    /// Prediction score on frames containing the target.
    pub p_in: f64,
    /// Prediction score on frames without the target.
    pub p_out: f64,
}

impl MockTrackerParams {
    pub fn perfect() -> Self {
        Self {
            base_track_score: 1.0,
            track_decay: 0.0,
            quality_decay: 0.0,
            p_in: 1.0,
            p_out: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.base_track_score > 0.0 && self.base_track_score <= 1.0) {
            return invalid("base_track_score must lie in (0, 1]");
        }
        if !(self.track_decay >= 0.0 && self.quality_decay >= 0.0) {
            return invalid("decay rates must be non-negative");
        }
        if !(unit(self.p_in) && unit(self.p_out)) {
            return invalid("prediction scores must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Tracker driven by ground-truth masks and distance-based decay.
///
/// At distance `d` frames from its last initialization the tracking score
/// is `clamp(q0 - eta * d)` and the mask keeps the first
/// `round(clamp(1 - delta * d) * area)` ground-truth pixels. A tracker
/// seeded with an empty mask follows nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct MockTracker {
    params: MockTrackerParams,
    gt: Vec<MaskFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockState {
    pub init_frame: usize,
    pub has_target: bool,
}

impl MockTracker {
    pub fn new(params: MockTrackerParams, gt: Vec<MaskFrame>) -> Result<Self> {
        params.validate()?;
        let Some(first) = gt.first() else {
            return invalid("mock tracker needs at least one ground-truth frame");
        };
        let dims = (first.height(), first.width());
        if gt.iter().any(|m| (m.height(), m.width()) != dims) {
            return invalid("ground-truth masks must share dimensions");
        }
        Ok(Self { params, gt })
    }

    pub fn params(&self) -> &MockTrackerParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.gt.len()
    }

    pub fn track_score(&self, distance: usize) -> f64 {
        (self.params.base_track_score - self.params.track_decay * distance as f64).clamp(0.0, 1.0)
    }

    pub fn quality(&self, distance: usize) -> f64 {
        (1.0 - self.params.quality_decay * distance as f64).clamp(0.0, 1.0)
    }
}

impl TrackerPort for MockTracker {
    type State = MockState;

    fn dims(&self) -> (usize, usize) {
        (self.gt[0].height(), self.gt[0].width())
    }

    fn init(&self, frame: usize, seed: &MaskFrame) -> MockState {
        MockState {
            init_frame: frame,
            has_target: !seed.is_empty(),
        }
    }

    fn step(
        &self,
        state: &mut MockState,
        frame: usize,
    ) -> std::result::Result<TrackStep, TrackerFailure> {
        let gt = self.gt.get(frame).ok_or_else(|| TrackerFailure {
            frame,
            reason: "frame outside the video".into(),
        })?;
        let d = frame.abs_diff(state.init_frame);
        let mask = if state.has_target {
            let keep = (self.quality(d) * gt.area() as f64).round() as usize;
            gt.truncated(keep)
        } else {
            MaskFrame::empty(gt.height(), gt.width())
        };
        Ok(TrackStep {
            mask,
            score: self.track_score(d),
        })
    }

    fn predict(&self, frame: usize) -> Prediction {
        let gt = &self.gt[frame];
        if gt.is_empty() {
            Prediction {
                mask: gt.clone(),
                score: self.params.p_out,
            }
        } else {
            Prediction {
                mask: gt.clone(),
                score: self.params.p_in,
            }
        }
    }
}
