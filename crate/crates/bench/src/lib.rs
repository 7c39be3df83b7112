//! Shared fixtures for the criterion benchmarks.

use ctsls::simgen::{generate_replicate, ErrorScenario, SimConfig, TrueParams};
use ctsls::CensoredSample;

/// A seeded scenario-1 replicate at the requested size and censoring rate.
pub fn simulated_sample(n: usize, censor_rate: f64) -> CensoredSample {
    let config = SimConfig {
        n,
        censor_rate,
        scenario: ErrorScenario::scenario_one(),
        true_params: TrueParams::default(),
        seed: 42,
        calibration_pop: 50_000,
    };
    generate_replicate(&config, 0).expect("generation succeeds").0
}
