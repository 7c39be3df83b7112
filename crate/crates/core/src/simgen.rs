//! Synthetic data generation: reduced-form model
//! `X = α₁ᵀZ + α₂ᵀD + ξ₁`, `Y = β₁X + β₂ᵀD + ξ₂` with
//! `Z ~ N(0, 0.8²I)`, `D ~ N(0, I)`, mixture-of-Gaussians errors, and
//! normal censoring `C ~ N(μ, σ_c²)` calibrated so that `P(Y > C) = π_c`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::CensoredSample;
use crate::error::{Error, Result};

/// One bivariate-normal mixture component for the error pair `(ξ₁, ξ₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean1: f64,
    pub mean2: f64,
    pub var1: f64,
    pub var2: f64,
    pub rho: f64,
    pub proportion: f64,
}

/// Error distribution: a finite mixture of correlated bivariate normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorScenario {
    pub name: String,
    pub components: Vec<MixtureComponent>,
}

impl ErrorScenario {
    /// Single Gaussian with negative cross-correlation.
    pub fn scenario_one() -> Self {
        Self {
            name: "scenario1".into(),
            components: vec![MixtureComponent {
                mean1: 0.0,
                mean2: 0.0,
                var1: 0.5,
                var2: 1.0,
                rho: -0.42,
                proportion: 1.0,
            }],
        }
    }

    /// Three-component Gaussian mixture.
    pub fn scenario_two() -> Self {
        Self {
            name: "scenario2".into(),
            components: vec![
                MixtureComponent {
                    mean1: 5.0,
                    mean2: 4.0,
                    var1: 0.2,
                    var2: 1.0,
                    rho: 0.7,
                    proportion: 0.5,
                },
                MixtureComponent {
                    mean1: 5.0,
                    mean2: 1.0,
                    var1: 0.4,
                    var2: 0.5,
                    rho: 0.5,
                    proportion: 0.3,
                },
                MixtureComponent {
                    mean1: 5.0,
                    mean2: 5.0,
                    var1: 0.3,
                    var2: 2.0,
                    rho: -0.9,
                    proportion: 0.2,
                },
            ],
        }
    }

    /// Resolves the named paper scenario ("1"/"scenario1", "2"/"scenario2").
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "1" | "scenario1" => Ok(Self::scenario_one()),
            "2" | "scenario2" => Ok(Self::scenario_two()),
            other => Err(Error::InvalidScenario(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidScenario("no components".into()));
        }
        let mut total = 0.0;
        for c in &self.components {
            if c.proportion <= 0.0 {
                return Err(Error::InvalidScenario(
                    "component proportions must be positive".into(),
                ));
            }
            if c.var1 <= 0.0 || c.var2 <= 0.0 {
                return Err(Error::InvalidScenario(
                    "component variances must be positive".into(),
                ));
            }
            if c.rho.abs() >= 1.0 {
                return Err(Error::InvalidScenario("|rho| must be below 1".into()));
            }
            total += c.proportion;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidScenario(format!(
                "proportions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Structural coefficients of the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta1: f64,
    pub beta2: Vec<f64>,
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            alpha1: vec![0.5, 0.5],
            alpha2: vec![0.3, 0.3],
            beta1: 1.0,
            beta2: vec![0.5, 0.5],
        }
    }
}

fn default_calibration_pop() -> usize {
    100_000
}

/// A full grid-cell specification: sample size, target censoring rate,
/// error scenario, truths, and the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub censor_rate: f64,
    pub scenario: ErrorScenario,
    #[serde(default)]
    pub true_params: TrueParams,
    pub seed: u64,
    #[serde(default = "default_calibration_pop")]
    pub calibration_pop: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.n < 20 {
            return Err(Error::InvalidSimConfig(format!(
                "n = {} is below the minimum of 20",
                self.n
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::InvalidSimConfig(format!(
                "censor_rate = {} must lie in [0, 1)",
                self.censor_rate
            )));
        }
        if self.true_params.beta2.len() != self.true_params.alpha2.len() {
            return Err(Error::InvalidSimConfig(
                "alpha2 and beta2 must have equal length".into(),
            ));
        }
        if self.calibration_pop < 1000 {
            return Err(Error::InvalidSimConfig(
                "calibration_pop must be at least 1000".into(),
            ));
        }
        Ok(())
    }
}

/// Calibrated censoring distribution `C ~ N(μ, σ_c²)`; `mu = None` means
/// censoring is disabled (the `π_c = 0` sentinel for `C = +∞`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mu: Option<f64>,
    pub sigma_c: f64,
}

/// Splitmix64-based stream derivation: replicate streams are decorrelated
/// functions of the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn pick_component(scenario: &ErrorScenario, u: f64) -> usize {
    let mut acc = 0.0;
    for (k, c) in scenario.components.iter().enumerate() {
        acc += c.proportion;
        if u < acc {
            return k;
        }
    }
    scenario.components.len() - 1
}

/// Draws one error pair: component by proportion, then the bivariate normal
/// via the 2×2 Cholesky factor.
pub fn draw_errors<R: RngCore>(scenario: &ErrorScenario, rng: &mut R) -> (f64, f64) {
    let k = pick_component(scenario, rng.gen::<f64>());
    let c = &scenario.components[k];
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    let xi1 = c.mean1 + c.var1.sqrt() * e1;
    let xi2 = c.mean2 + c.var2.sqrt() * (c.rho * e1 + (1.0 - c.rho * c.rho).sqrt() * e2);
    (xi1, xi2)
}

/// One latent draw of `(X, Y)` from the reduced-form model.
fn draw_latent<R: RngCore>(params: &TrueParams, scenario: &ErrorScenario, rng: &mut R) -> Latent {
    let q = params.alpha1.len();
    let p = params.alpha2.len();
    let z: Vec<f64> = (0..q)
        .map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let (xi1, xi2) = draw_errors(scenario, rng);
    let x = dot(&params.alpha1, &z) + dot(&params.alpha2, &d) + xi1;
    let y = params.beta1 * x + dot(&params.beta2, &d) + xi2;
    Latent { z, d, x, y }
}

struct Latent {
    z: Vec<f64>,
    d: Vec<f64>,
    x: f64,
    y: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Calibrates `(μ, σ_c)` against a large generated population: `σ_c` is the
/// population standard deviation of `Y`, and `μ` solves `P(Y > C) = π_c`
/// by monotone bisection of the empirical exceedance fraction over draws
/// paired with independent standard normals, to tolerance `10⁻⁴`.
pub fn calibrate_censoring(config: &SimConfig) -> Result<Calibration> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let big_n = config.calibration_pop;
    let mut y = Vec::with_capacity(big_n);
    for _ in 0..big_n {
        y.push(draw_latent(&config.true_params, &config.scenario, &mut rng).y);
    }
    let mean = y.iter().sum::<f64>() / big_n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (big_n as f64 - 1.0);
    let sigma_c = var.sqrt();

    if config.censor_rate == 0.0 {
        return Ok(Calibration { mu: None, sigma_c });
    }

    let r: Vec<f64> = (0..big_n).map(|_| rng.sample(StandardNormal)).collect();
    let frac = |mu: f64| -> f64 {
        let count = y
            .iter()
            .zip(&r)
            .filter(|(&yi, &ri)| yi > mu + sigma_c * ri)
            .count();
        count as f64 / big_n as f64
    };

    // frac is non-increasing in mu; bracket where it spans (0, 1)
    let lo0 = y
        .iter()
        .zip(&r)
        .map(|(&yi, &ri)| yi - sigma_c * ri)
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let hi0 = y
        .iter()
        .zip(&r)
        .map(|(&yi, &ri)| yi - sigma_c * ri)
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    let target = config.censor_rate;
    if !(frac(hi0)..=frac(lo0)).contains(&target) {
        return Err(Error::CalibrationBracket { target });
    }
    let (mut lo, mut hi) = (lo0, hi0);
    let mut best = (lo + hi) / 2.0;
    let mut best_gap = f64::INFINITY;
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        let f = frac(mid);
        let gap = (f - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = mid;
        }
        if gap <= 1e-4 {
            break;
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        mu: Some(best),
        sigma_c,
    })
}

/// Latent truths retained alongside a generated sample.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub y_true: Vec<f64>,
    pub beta1_true: f64,
}

type CalibrationCache = Mutex<HashMap<String, Calibration>>;

fn calibration_cache() -> &'static CalibrationCache {
    static CACHE: OnceLock<CalibrationCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached calibration for a config (computed once per distinct config).
pub fn calibration_for(config: &SimConfig) -> Result<Calibration> {
    // n does not enter the calibration; share entries across sample sizes
    let key = serde_json::to_string(&(
        &config.scenario,
        &config.true_params,
        config.censor_rate.to_bits(),
        config.seed,
        config.calibration_pop,
    ))?;
    if let Some(c) = calibration_cache().lock().unwrap().get(&key) {
        return Ok(*c);
    }
    let c = calibrate_censoring(config)?;
    calibration_cache().lock().unwrap().insert(key, c);
    Ok(c)
}

/// Generates one replicate from the calibrated model using the supplied
/// stream. Draw order is fixed per subject (Z, D, errors, censoring) so a
/// given stream yields a bit-identical sample.
pub fn generate_dataset<R: RngCore>(
    config: &SimConfig,
    calibration: &Calibration,
    rng: &mut R,
) -> Result<(CensoredSample, Oracle)> {
    config.validate()?;
    let n = config.n;
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    let mut exposures = Vec::with_capacity(n);
    let mut confounders = Vec::with_capacity(n);
    let mut instruments = Vec::with_capacity(n);
    let mut y_true = Vec::with_capacity(n);
    for _ in 0..n {
        let l = draw_latent(&config.true_params, &config.scenario, rng);
        let (time, event) = match calibration.mu {
            Some(mu) => {
                let c = mu + calibration.sigma_c * rng.sample::<f64, _>(StandardNormal);
                if l.y <= c {
                    (l.y, true)
                } else {
                    (c, false)
                }
            }
            None => (l.y, true),
        };
        times.push(time);
        events.push(event);
        exposures.push(l.x);
        confounders.push(l.d);
        instruments.push(l.z);
        y_true.push(l.y);
    }
    let sample = CensoredSample::from_parts(times, events, exposures, confounders, instruments)?;
    Ok((
        sample,
        Oracle {
            y_true,
            beta1_true: config.true_params.beta1,
        },
    ))
}

/// Convenience: calibrate (cached) and generate replicate `r` of a config.
/// Replicate `r` uses the derived stream `r + 1`; stream 0 is reserved for
/// calibration.
pub fn generate_replicate(config: &SimConfig, r: usize) -> Result<(CensoredSample, Oracle)> {
    let calibration = calibration_for(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, r as u64 + 1));
    generate_dataset(config, &calibration, &mut rng)
}
