//! Synthetic scenarios, the end-to-end pipeline and strategy comparison.
//!
//! A scenario stands in for a video plus a referring expression: a
//! similarity curve built from Gaussian bumps and noise, a ground-truth
//! interval in which the target is visible, a moving rectangle as the
//! target mask, and the parameters of a [`MockTracker`].

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{smooth_fitted, SimilarityCurve, SmoothParams};
use crate::error::{invalid, Result};
use crate::grounding::{default_window, ground, interval_iou, Grounding, Interval, DEFAULT_THETA};
use crate::metrics::{per_frame_jf, summarize, JfSummary, MaskFrame, DEFAULT_BOUNDARY_TOL};
use crate::propagation::{
    plan_bap, run_bap, MockTracker, MockTrackerParams, PropagationOutput, DEFAULT_LAMBDA,
};
use crate::rng::RngStream;
use crate::sampling::{sample, SampleSet, Strategy};

/// Columns of the per-run CSV, in order.
pub const CSV_COLUMNS: [&str; 9] = [
    "scenario",
    "strategy",
    "seed",
    "k",
    "jf",
    "j_mean",
    "f_mean",
    "tsg_iou",
    "n_updates",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

/// A rectangle moving at constant velocity, clamped inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub top: f64,
    pub left: f64,
    #[serde(default)]
    pub v_row: f64,
    #[serde(default)]
    pub v_col: f64,
}

impl RectGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return invalid("mask grid must be non-empty");
        }
        if self.rows == 0 || self.cols == 0 {
            return invalid("target rectangle must be non-empty");
        }
        if self.rows > self.grid_h || self.cols > self.grid_w {
            return invalid(format!(
                "{}x{} rectangle does not fit a {}x{} grid",
                self.rows, self.cols, self.grid_h, self.grid_w
            ));
        }
        if ![self.top, self.left, self.v_row, self.v_col]
            .iter()
            .all(|x| x.is_finite())
        {
            return invalid("rectangle position and velocity must be finite");
        }
        Ok(())
    }

    pub fn mask_at(&self, frame: usize) -> MaskFrame {
        let place = |start: f64, v: f64, span: usize, size: usize| {
            let max = (span - size) as f64;
            (start + v * frame as f64).round().clamp(0.0, max) as usize
        };
        let top = place(self.top, self.v_row, self.grid_h, self.rows);
        let left = place(self.left, self.v_col, self.grid_w, self.cols);
        MaskFrame::rect(self.grid_h, self.grid_w, top, left, self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub horizon: usize,
    /// Inclusive frames in which the target is visible.
    pub gt_interval: (usize, usize),
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub noise_sigma: f64,
    pub tracker: MockTrackerParams,
    pub mask: RectGeometry,
}

fn default_name() -> String {
    "scenario".to_string()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return invalid("scenario horizon must be positive");
        }
        let (s, e) = self.gt_interval;
        if s > e || e >= self.horizon {
            return invalid(format!(
                "gt interval ({s}, {e}) must satisfy 0 <= start <= end < {}",
                self.horizon
            ));
        }
        for b in &self.bumps {
            if !(b.amplitude.is_finite() && b.amplitude >= 0.0) {
                return invalid("bump amplitudes must be non-negative");
            }
            if !(b.width.is_finite() && b.width > 0.0 && b.center.is_finite()) {
                return invalid("bump centers must be finite and widths positive");
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return invalid("noise_sigma must be non-negative");
        }
        self.tracker.validate()?;
        self.mask.validate()
    }

    /// Target visible only in the last third of the video while the tracker
    /// drifts.
    pub fn late_target_drift() -> Self {
        let horizon = 60;
        Self {
            name: "late-target-drift".into(),
            horizon,
            gt_interval: (40, 59),
            bumps: vec![
                Bump {
                    center: 49.5,
                    width: 6.0,
                    amplitude: 0.9,
                },
                Bump {
                    center: 15.0,
                    width: 4.0,
                    amplitude: 0.25,
                },
            ],
            noise_sigma: 0.05,
            tracker: MockTrackerParams {
                base_track_score: 0.98,
                track_decay: 0.01,
                quality_decay: 0.03,
                p_in: 0.95,
                p_out: 0.1,
            },
            mask: RectGeometry {
                grid_h: 16,
                grid_w: 16,
                rows: 5,
                cols: 6,
                top: 2.0,
                left: -6.0,
                v_row: 0.1,
                v_col: 0.25,
            },
        }
    }

    /// Target visible throughout and a tracker that never drifts.
    pub fn perfect_tracker() -> Self {
        Self {
            name: "perfect-tracker".into(),
            gt_interval: (0, 59),
            tracker: MockTrackerParams::perfect(),
            ..Self::late_target_drift()
        }
    }
}

/// A config plus the seed that fixes its noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub config: ScenarioConfig,
    pub seed: u64,
}

/// Curve and ground-truth masks derived from a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub curve: SimilarityCurve,
    pub gt_masks: Vec<MaskFrame>,
}

impl Scenario {
    pub fn gt_interval(&self) -> Interval {
        Interval::frames(self.config.gt_interval.0, self.config.gt_interval.1)
    }

    pub fn materialize(&self) -> Result<Materialized> {
        let cfg = &self.config;
        cfg.validate()?;
        let mut rng = RngStream::new(self.seed, "curve-noise").rng();
        let noise = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| crate::Error::Validation(e.to_string()))?;
        let values = (0..cfg.horizon)
            .map(|t| {
                let signal: f64 = cfg
                    .bumps
                    .iter()
                    .map(|b| {
                        let z = (t as f64 - b.center) / b.width;
                        b.amplitude * (-0.5 * z * z).exp()
                    })
                    .sum();
                let eps = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (signal + eps).clamp(0.0, 1.0)
            })
            .collect();
        let (s, e) = cfg.gt_interval;
        let gt_masks = (0..cfg.horizon)
            .map(|t| {
                if (s..=e).contains(&t) {
                    cfg.mask.mask_at(t)
                } else {
                    MaskFrame::empty(cfg.mask.grid_h, cfg.mask.grid_w)
                }
            })
            .collect();
        Ok(Materialized {
            curve: SimilarityCurve::new(values)?,
            gt_masks,
        })
    }
}

pub fn gen_scenario(config: ScenarioConfig, seed: u64) -> Result<(Scenario, Materialized)> {
    let scenario = Scenario { config, seed };
    let m = scenario.materialize()?;
    Ok((scenario, m))
}

/// One scenario per seed, each named `<config name>-<seed>`.
pub fn scenario_family(
    config: &ScenarioConfig,
    seeds: impl IntoIterator<Item = u64>,
) -> Vec<Scenario> {
    seeds
        .into_iter()
        .map(|seed| Scenario {
            config: ScenarioConfig {
                name: format!("{}-{seed}", config.name),
                ..config.clone()
            },
            seed,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub k: usize,
    /// Grounding window; `None` picks a tenth of the video.
    pub window: Option<usize>,
    pub theta: f64,
    pub lambda: f64,
    /// Smoothing applied to the scenario curve before grounding.
    pub smooth: Option<SmoothParams>,
    pub boundary_tol: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            k: 8,
            window: None,
            theta: DEFAULT_THETA,
            lambda: DEFAULT_LAMBDA,
            smooth: Some(SmoothParams::default()),
            boundary_tol: DEFAULT_BOUNDARY_TOL,
        }
    }
}

/// Where propagation was started for a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorProtocol {
    /// The moment center.
    MomentCenter,
    /// The strategy's first sampled frame.
    FirstSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub k: usize,
    pub sample: SampleSet,
    pub k_left: usize,
    pub k_right: usize,
    pub grounding: Grounding,
    pub tsg_iou: f64,
    pub anchor: usize,
    pub anchor_protocol: AnchorProtocol,
    pub per_frame_j: Vec<f64>,
    pub per_frame_f: Vec<f64>,
    pub jf: JfSummary,
    pub n_updates: usize,
}

pub fn run_pipeline(
    scenario: &Scenario,
    strategy: Strategy,
    params: &RunParams,
    seed: u64,
) -> Result<RunResult> {
    let m = scenario.materialize()?;
    run_materialized(scenario, &m, strategy, params, seed)
}

pub fn run_materialized(
    scenario: &Scenario,
    m: &Materialized,
    strategy: Strategy,
    params: &RunParams,
    seed: u64,
) -> Result<RunResult> {
    run_traced(scenario, m, strategy, params, seed).map(|(r, _)| r)
}

/// Like [`run_materialized`], also returning the raw propagation output.
pub fn run_traced(
    scenario: &Scenario,
    m: &Materialized,
    strategy: Strategy,
    params: &RunParams,
    seed: u64,
) -> Result<(RunResult, PropagationOutput)> {
    let frames = m.curve.len();
    let curve = match params.smooth {
        Some(p) => smooth_fitted(&m.curve, p)?,
        None => m.curve.clone(),
    };
    let window = params.window.unwrap_or_else(|| default_window(frames));
    let grounding = ground(&curve, window, params.theta)?;
    let (ps, pe) = grounding.predicted;
    let tsg_iou = interval_iou(Interval::frames(ps, pe), scenario.gt_interval());

    let center = grounding.moment.center;
    let stream = RngStream::new(seed, format!("sample/{strategy}"));
    let outcome = sample(strategy, &curve, params.k, Some(center), &stream)?;

    let (anchor, anchor_protocol) = if strategy.uses_center() {
        (center, AnchorProtocol::MomentCenter)
    } else {
        (outcome.set.indices[0], AnchorProtocol::FirstSample)
    };
    // TopK need not contain the center; it joins the checkpoints.
    let mut checkpoints = outcome.set.clone();
    if let Err(pos) = checkpoints.indices.binary_search(&anchor) {
        checkpoints.indices.insert(pos, anchor);
    }

    let tracker = MockTracker::new(scenario.config.tracker, m.gt_masks.clone())?;
    let plan = plan_bap(frames, anchor, &checkpoints)?;
    let out = run_bap(&plan, &tracker, params.lambda)?;
    let per_frame = per_frame_jf(&out.masks, &m.gt_masks, params.boundary_tol)?;

    let result = RunResult {
        scenario: scenario.config.name.clone(),
        strategy,
        seed,
        k: params.k,
        sample: outcome.set,
        k_left: outcome.k_left,
        k_right: outcome.k_right,
        grounding,
        tsg_iou,
        anchor,
        anchor_protocol,
        per_frame_j: per_frame.iter().map(|f| f.0).collect(),
        per_frame_f: per_frame.iter().map(|f| f.1).collect(),
        jf: summarize(&per_frame),
        n_updates: out.log.updates(),
    };
    Ok((result, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub k: usize,
    pub jf: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub tsg_iou: f64,
    pub n_updates: usize,
}

impl From<&RunResult> for RunRow {
    fn from(r: &RunResult) -> Self {
        Self {
            scenario: r.scenario.clone(),
            strategy: r.strategy,
            seed: r.seed,
            k: r.k,
            jf: r.jf.jf,
            j_mean: r.jf.j_mean,
            f_mean: r.jf.f_mean,
            tsg_iou: r.tsg_iou,
            n_updates: r.n_updates,
        }
    }
}

/// Per-strategy aggregate; standard deviations are population values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub runs: usize,
    pub jf_mean: f64,
    pub jf_std: f64,
    pub miou: f64,
    pub miou_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub anchor_protocol: String,
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
}

/// Shifted by the first value so constant inputs give exactly zero spread.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let shift = xs[0];
    let d_mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - shift - d_mean).powi(2)).sum::<f64>() / n;
    (shift + d_mean, var.sqrt())
}

/// Runs every `(scenario, strategy, seed)` triple. `workers = None` uses
/// rayon's global pool. Output order never depends on scheduling.
pub fn compare_strategies(
    corpus: &[Scenario],
    strategies: &[Strategy],
    params: &RunParams,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<CompareTable> {
    if corpus.is_empty() {
        return invalid("comparison corpus is empty");
    }
    if strategies.is_empty() || seeds.is_empty() {
        return invalid("comparison needs at least one strategy and one seed");
    }
    let materialized = corpus
        .iter()
        .map(Scenario::materialize)
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (si, st) in strategies.iter().enumerate() {
        for ci in 0..corpus.len() {
            for &seed in seeds {
                jobs.push((si, *st, ci, seed));
            }
        }
    }
    let run_all = || {
        jobs.par_iter()
            .map(|&(si, st, ci, seed)| {
                run_materialized(&corpus[ci], &materialized[ci], st, params, seed)
                    .map(|r| ((si, ci, seed), RunRow::from(&r)))
            })
            .collect::<Result<Vec<_>>>()
    };
    let mut keyed = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::Validation(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };
    keyed.sort_by_key(|(key, _)| *key);
    let runs: Vec<RunRow> = keyed.into_iter().map(|(_, row)| row).collect();

    let summary = strategies
        .iter()
        .map(|&st| {
            let jf: Vec<f64> = runs
                .iter()
                .filter(|r| r.strategy == st)
                .map(|r| r.jf)
                .collect();
            let iou: Vec<f64> = runs
                .iter()
                .filter(|r| r.strategy == st)
                .map(|r| r.tsg_iou)
                .collect();
            let (jf_mean, jf_std) = mean_std(&jf);
            let (miou, miou_std) = mean_std(&iou);
            SummaryRow {
                strategy: st,
                runs: jf.len(),
                jf_mean,
                jf_std,
                miou,
                miou_std,
            }
        })
        .collect();
    Ok(CompareTable {
        anchor_protocol: "center strategies (topk, nearbyk, mcs) start at the moment center; \
                          others start at their first sampled frame"
            .into(),
        runs,
        summary,
    })
}

impl CompareTable {
    pub fn summary_for(&self, strategy: Strategy) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }

    pub fn runs_csv(&self) -> Result<String> {
        to_csv(&self.runs)
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| crate::Error::Validation(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::Validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| crate::Error::Validation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_bump(amplitude: f64) -> ScenarioConfig {
        ScenarioConfig {
            name: "bump".into(),
            horizon: 80,
            gt_interval: (35, 45),
            bumps: vec![Bump {
                center: 40.0,
                width: 5.0,
                amplitude,
            }],
            noise_sigma: 0.0,
            ..ScenarioConfig::late_target_drift()
        }
    }

    #[test]
    fn bump_peak_value() {
        let (_, m) = gen_scenario(single_bump(0.9), 1).unwrap();
        let v = m.curve.values();
        let peak = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(peak, 40);
        assert_eq!(v[40], 0.9);
    }

    #[test]
    fn flat_zero_curve() {
        let (_, m) = gen_scenario(single_bump(0.0), 1).unwrap();
        assert!(m.curve.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::late_target_drift();
        let a = gen_scenario(cfg.clone(), 9).unwrap();
        let b = gen_scenario(cfg.clone(), 9).unwrap();
        assert_eq!(a, b);
        let c = gen_scenario(cfg, 10).unwrap();
        assert_ne!(a.1.curve, c.1.curve);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = ScenarioConfig::late_target_drift();
        cfg.mask.rows = 40;
        assert!(gen_scenario(cfg, 0).is_err());
        let mut cfg = ScenarioConfig::late_target_drift();
        cfg.gt_interval = (10, 60);
        assert!(gen_scenario(cfg, 0).is_err());
        let mut cfg = ScenarioConfig::late_target_drift();
        cfg.bumps[0].amplitude = -1.0;
        assert!(gen_scenario(cfg, 0).is_err());
    }

    #[test]
    fn rectangle_stays_inside_grid() {
        let g = ScenarioConfig::late_target_drift().mask;
        for t in 0..200 {
            let m = g.mask_at(t);
            assert_eq!(m.area(), g.rows * g.cols);
        }
    }

    #[test]
    fn masks_empty_outside_interval() {
        let (_, m) = gen_scenario(ScenarioConfig::late_target_drift(), 3).unwrap();
        assert!(m.gt_masks[..40].iter().all(MaskFrame::is_empty));
        assert!(m.gt_masks[40..].iter().all(|x| !x.is_empty()));
    }

    #[test]
    fn indicator_curve_grounds_exactly() {
        let mut cfg = single_bump(0.0);
        cfg.bumps = (20..=35)
            .map(|c| Bump {
                center: c as f64,
                width: 0.05,
                amplitude: 1.0,
            })
            .collect();
        cfg.gt_interval = (20, 35);
        let scenario = Scenario {
            config: cfg,
            seed: 0,
        };
        let m = scenario.materialize().unwrap();
        for (i, v) in m.curve.values().iter().enumerate() {
            if (20..=35).contains(&i) {
                assert_eq!(*v, 1.0);
            } else {
                assert!(*v < 1e-12);
            }
        }
        for smooth in [None, Some(SmoothParams::default())] {
            let params = RunParams {
                smooth,
                ..RunParams::default()
            };
            let r = run_pipeline(&scenario, Strategy::Mcs, &params, 0).unwrap();
            assert_eq!(r.tsg_iou, 1.0);
        }
    }

    #[test]
    fn perfect_tracker_scores_one_for_every_strategy() {
        let scenario = Scenario {
            config: ScenarioConfig::perfect_tracker(),
            seed: 4,
        };
        for st in Strategy::ALL {
            let r = run_pipeline(&scenario, st, &RunParams::default(), 11).unwrap();
            assert_eq!(r.jf.jf, 1.0, "{st}");
            r.sample.check(60).unwrap();
        }
    }

    #[test]
    fn anchors_follow_protocol() {
        let scenario = Scenario {
            config: ScenarioConfig::late_target_drift(),
            seed: 2,
        };
        let r = run_pipeline(&scenario, Strategy::FirstK, &RunParams::default(), 0).unwrap();
        assert_eq!(
            (r.anchor, r.anchor_protocol),
            (0, AnchorProtocol::FirstSample)
        );
        let r = run_pipeline(&scenario, Strategy::Mcs, &RunParams::default(), 0).unwrap();
        assert_eq!(r.anchor, r.grounding.moment.center);
        assert_eq!(r.anchor_protocol, AnchorProtocol::MomentCenter);
        for x in r
            .per_frame_j
            .iter()
            .chain(&r.per_frame_f)
            .chain([&r.tsg_iou, &r.jf.jf])
        {
            assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn single_scenario_row_matches_pipeline() {
        let scenario = Scenario {
            config: ScenarioConfig::late_target_drift(),
            seed: 5,
        };
        let params = RunParams::default();
        let table = compare_strategies(
            std::slice::from_ref(&scenario),
            &[Strategy::Uniform, Strategy::Mcs],
            &params,
            &[3],
            Some(2),
        )
        .unwrap();
        for st in [Strategy::Uniform, Strategy::Mcs] {
            let direct = run_pipeline(&scenario, st, &params, 3).unwrap();
            let row = table.summary_for(st).unwrap();
            assert_eq!(row.jf_mean, direct.jf.jf);
            assert_eq!(row.miou, direct.tsg_iou);
            assert_eq!(row.jf_std, 0.0);
        }
    }

    #[test]
    fn summary_mean_is_mean_of_runs() {
        let corpus = scenario_family(&ScenarioConfig::late_target_drift(), 0..3);
        let table = compare_strategies(
            &corpus,
            &Strategy::ALL,
            &RunParams::default(),
            &[0, 1, 2],
            None,
        )
        .unwrap();
        for s in &table.summary {
            let rows: Vec<&RunRow> = table
                .runs
                .iter()
                .filter(|r| r.strategy == s.strategy)
                .collect();
            assert_eq!(rows.len(), 9);
            let mean = rows.iter().map(|r| r.jf).sum::<f64>() / rows.len() as f64;
            assert!((mean - s.jf_mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_header_is_fixed() {
        let scenario = Scenario {
            config: ScenarioConfig::perfect_tracker(),
            seed: 0,
        };
        let table = compare_strategies(
            &[scenario],
            &[Strategy::FirstK],
            &RunParams::default(),
            &[0],
            Some(1),
        )
        .unwrap();
        let csv = table.runs_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(
            compare_strategies(&[], &[Strategy::Mcs], &RunParams::default(), &[0], None).is_err()
        );
    }
}
