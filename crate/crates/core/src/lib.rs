//! Temporal grounding and key-moment frame sampling, decoupled from any
//! multimodal model.
//!
//! The crate works on per-frame relevance curves and binary mask grids:
//!
//! - [`curve`]: activation, smoothing, resampling and weight normalization.
//! - [`grounding`]: moment-center detection, threshold segments, TSG metrics.
//! - [`sampling`]: FirstK / Uniform / Random / TopK / NearbyK and moment-centric sampling.
//! - [`matching`]: query-token/frame-token similarity, matching loss and its gradient.
//! - [`propagation`]: bidirectional anchor-updated propagation over an abstract tracker.
//! - [`metrics`]: region J, boundary F, J&F and cIoU.
//! - [`harness`]: synthetic scenarios, the end-to-end pipeline and strategy comparison.

pub mod curve;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod propagation;
pub mod rng;
pub mod sampling;

pub use curve::{RawScoreCurve, SimilarityCurve, SmoothParams};
pub use error::{Error, Result};
pub use grounding::{Interval, MomentResult, Segment, TsgReport};
pub use harness::{CompareTable, RunParams, RunResult, Scenario, ScenarioConfig};
pub use matching::TokenMatrix;
pub use metrics::{JfSummary, MaskFrame};
pub use propagation::{MockTracker, PropagationPlan, TrackerPort, UpdateLog};
pub use rng::RngStream;
pub use sampling::{SampleSet, Strategy};
