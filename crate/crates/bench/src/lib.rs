//! Fixtures shared by the criterion benches.

use moment_core::harness::{Bump, Materialized, Scenario, ScenarioConfig};

/// Late-target scenario stretched to `frames` frames.
pub fn scenario(frames: usize, seed: u64) -> Scenario {
    let base = ScenarioConfig::late_target_drift();
    let scale = frames as f64 / base.horizon as f64;
    let config = ScenarioConfig {
        name: format!("bench-{frames}"),
        horizon: frames,
        gt_interval: (frames * 2 / 3, frames - 1),
        bumps: base
            .bumps
            .iter()
            .map(|b| Bump {
                center: b.center * scale,
                width: b.width * scale,
                amplitude: b.amplitude,
            })
            .collect(),
        ..base
    };
    Scenario { config, seed }
}

pub fn materialized(frames: usize, seed: u64) -> Materialized {
    scenario(frames, seed)
        .materialize()
        .expect("bench scenario is valid")
}
