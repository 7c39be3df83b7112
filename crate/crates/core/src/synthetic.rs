//! Leurgans synthetic outcomes and their subject-specific variances.
//!
//! The synthetic outcome `Y*_i = Ỹ_i + ∫_{-∞}^{Ỹ_i} G(t-)/(1-G(t-)) dt`
//! is an unbiased surrogate for the latent log event time under independent
//! censoring. Its variance exceeds `Var(Y_i)` by a double integral driven by
//! the censoring distribution; the reciprocal variance is the subject weight
//! in the second-stage fit.

use crate::dataset::CensoredSample;
use crate::error::{Error, Result};
use crate::km::{HazardIntegral, StepDistribution};

/// Synthetic outcomes `Y*` together with the censoring CDF that produced
/// them.
#[derive(Debug, Clone)]
pub struct SyntheticOutcome {
    values: Vec<f64>,
    generator_g: StepDistribution,
}

impl SyntheticOutcome {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn generator_g(&self) -> &StepDistribution {
        &self.generator_g
    }
}

/// Subject-specific weights `ω_i = 1/Var(Y*_i)`. Not normalized: scale
/// cancels in weighted least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn unit(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w <= 0.0) {
            return Err(Error::NonPositiveVariance(w));
        }
        Ok(Self { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Applies the Leurgans transform with censoring CDF `g`.
pub fn leurgans_transform(
    sample: &CensoredSample,
    g: &StepDistribution,
) -> Result<SyntheticOutcome> {
    let integral = HazardIntegral::new(g);
    let values = sample
        .subjects()
        .iter()
        .map(|s| Ok(s.log_time + integral.inner(s.log_time)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SyntheticOutcome {
        values,
        generator_g: g.clone(),
    })
}

/// `Var(Y*) = Var(Y) + 2 ∫_{G^{-1}(0)}^{s_max} {1-F(s)} ∫_{-∞}^{μ_Y+s}
/// G/(1-G) dt ds`, with the outer integral truncated at the largest jump of
/// `F` (beyond which `1-F = 0` under the restricted-moment convention).
///
/// Both integrals are evaluated exactly: `1-F` is constant between jumps of
/// `F` and the inner integral is piecewise linear, so each outer cell is an
/// increment of the precomputed quadratic antiderivative.
pub fn synthetic_variance(
    mu_y: f64,
    f: &StepDistribution,
    g: &StepDistribution,
    var_y: f64,
) -> Result<f64> {
    let integral = HazardIntegral::new(g);
    synthetic_variance_with(mu_y, f, g.support_floor(), &integral, var_y)
}

/// Shared-table form of [`synthetic_variance`]; `integral` must be built
/// from the same `G` whose support floor is passed.
pub fn synthetic_variance_with(
    mu_y: f64,
    f: &StepDistribution,
    g_support_floor: f64,
    integral: &HazardIntegral,
    var_y: f64,
) -> Result<f64> {
    if var_y <= 0.0 || !var_y.is_finite() {
        return Err(Error::NonPositiveVariance(var_y));
    }
    let jumps = f.jump_times();
    if jumps.is_empty() {
        return Err(Error::EmptyResidualDistribution);
    }
    let lower = g_support_floor;
    let s_max = *jumps.last().expect("non-empty");
    if s_max <= lower {
        return Ok(var_y);
    }

    let mut total = 0.0;
    let mut a = lower;
    let mut surv = 1.0 - f.value(a);
    let mut k_a = integral.outer(mu_y + a)?;
    let first = jumps.partition_point(|&t| t <= lower);
    for &b in &jumps[first..] {
        let k_b = integral.outer(mu_y + b)?;
        total += surv * (k_b - k_a);
        surv = 1.0 - f.value(b);
        a = b;
        k_a = k_b;
    }
    debug_assert_eq!(a, s_max);
    Ok(var_y + 2.0 * total)
}

/// Weights `ω_i = 1/Var(Y*_i)` with the pooled residual distribution
/// shifted per subject by its linear predictor `μ_{Y_i}`.
pub fn compute_weights(
    sample: &CensoredSample,
    g: &StepDistribution,
    f_residual: &StepDistribution,
    mu_y: &[f64],
    var_y: f64,
) -> Result<WeightVector> {
    assert_eq!(sample.n(), mu_y.len(), "mu_y length mismatch");
    let integral = HazardIntegral::new(g);
    let floor = g.support_floor();
    let weights = mu_y
        .iter()
        .map(|&m| {
            let v = synthetic_variance_with(m, f_residual, floor, &integral, var_y)?;
            Ok(1.0 / v)
        })
        .collect::<Result<Vec<f64>>>()?;
    WeightVector::new(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CensoredSample;
    use crate::km::km_censoring;
    use approx::assert_relative_eq;

    fn sample_from(times: &[f64], events: &[u8]) -> CensoredSample {
        CensoredSample::from_parts_relaxed(
            times.to_vec(),
            events.iter().map(|&e| e == 1).collect(),
            vec![0.0; times.len()],
            vec![Vec::new(); times.len()],
            vec![vec![0.0]; times.len()],
        )
        .unwrap()
    }

    #[test]
    fn no_censoring_is_identity() {
        let s = sample_from(&[0.3, 1.2, 2.7], &[1, 1, 1]);
        let g = km_censoring(&s).unwrap();
        let y = leurgans_transform(&s, &g).unwrap();
        assert_eq!(y.values(), &[0.3, 1.2, 2.7]);
    }

    #[test]
    fn hand_fixture_transform() {
        let s = sample_from(&[1.0, 2.0, 3.0], &[1, 0, 1]);
        let g = km_censoring(&s).unwrap();
        let y = leurgans_transform(&s, &g).unwrap();
        assert_eq!(y.values()[0], 1.0);
        assert_eq!(y.values()[1], 2.0);
        assert_relative_eq!(y.values()[2], 4.0, max_relative = 1e-12);
    }

    #[test]
    fn transform_dominates_observed_time() {
        let s = sample_from(&[1.0, 1.5, 2.0, 3.0, 4.0], &[1, 0, 0, 1, 1]);
        let g = km_censoring(&s).unwrap();
        let y = leurgans_transform(&s, &g).unwrap();
        for (v, s) in y.values().iter().zip(s.subjects()) {
            assert!(*v >= s.log_time);
        }
    }

    #[test]
    fn variance_zero_g_returns_var_y() {
        let f = StepDistribution::new(vec![-1.0, 0.0, 1.0], vec![0.25, 0.5, 1.0]).unwrap();
        let g = StepDistribution::zero();
        assert_eq!(synthetic_variance(0.0, &f, &g, 2.5).unwrap(), 2.5);
    }

    #[test]
    fn variance_point_mass_below_floor() {
        // F entirely below G^{-1}(0): the outer integrand vanishes
        let f = StepDistribution::new(vec![-3.0], vec![1.0]).unwrap();
        let g = StepDistribution::new(vec![0.0, 1.0], vec![0.2, 0.6]).unwrap();
        assert_eq!(synthetic_variance(0.0, &f, &g, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn variance_rejects_non_positive_var() {
        let f = StepDistribution::new(vec![0.0], vec![1.0]).unwrap();
        let g = StepDistribution::zero();
        assert!(matches!(
            synthetic_variance(0.0, &f, &g, 0.0),
            Err(Error::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn variance_exceeds_var_y() {
        let f = StepDistribution::new(vec![-1.0, 0.5, 2.0], vec![0.3, 0.7, 1.0]).unwrap();
        let g = StepDistribution::new(vec![-0.5, 1.0], vec![0.3, 0.6]).unwrap();
        for &mu in &[-1.0, 0.0, 0.7, 2.0] {
            let v = synthetic_variance(mu, &f, &g, 1.0).unwrap();
            assert!(v >= 1.0);
        }
    }

    #[test]
    fn variance_matches_direct_grid_quadrature() {
        // independent oracle: brute-force trapezoid on a fine grid
        let f = StepDistribution::new(vec![-1.0, 0.5, 2.0], vec![0.3, 0.7, 1.0]).unwrap();
        let g = StepDistribution::new(vec![-0.5, 1.0], vec![0.3, 0.6]).unwrap();
        let mu = 0.4;
        let var_y = 1.3;
        let exact = synthetic_variance(mu, &f, &g, var_y).unwrap();

        let lower = g.support_floor();
        let s_max = 2.0;
        let steps = 400_000;
        let h = (s_max - lower) / steps as f64;
        let inner = |u: f64| crate::km::integrate_hazard_ratio(&g, u).unwrap();
        let mut acc = 0.0;
        for k in 0..steps {
            let s = lower + h * (k as f64 + 0.5);
            acc += h * (1.0 - f.value(s)) * inner(mu + s);
        }
        assert_relative_eq!(exact, var_y + 2.0 * acc, max_relative = 1e-6);
    }

    #[test]
    fn weights_decrease_with_shift_into_heavier_censoring() {
        // larger mu pushes the inner integral's upper limit into regions of
        // higher censoring mass, so the variance grows and the weight shrinks
        let s = sample_from(&[0.5, 1.0], &[1, 1]);
        let big = sample_from(&[0.5, 1.0, 1.5, 2.0, 3.0], &[1, 0, 1, 0, 1]);
        let g = km_censoring(&big).unwrap();
        let f = StepDistribution::new(vec![0.0, 2.0, 4.0], vec![0.25, 0.5, 1.0]).unwrap();
        let w = compute_weights(&s, &g, &f, &[0.0, 2.0], 1.0).unwrap();
        assert!(w.as_slice()[1] < w.as_slice()[0]);
    }

    #[test]
    fn constant_weights_without_censoring() {
        let s = sample_from(&[0.5, 1.0, 1.5], &[1, 1, 1]);
        let g = km_censoring(&s).unwrap();
        let f = StepDistribution::new(vec![-0.5, 0.5], vec![0.5, 1.0]).unwrap();
        let w = compute_weights(&s, &g, &f, &[0.1, 0.2, 0.3], 2.0).unwrap();
        for &wi in w.as_slice() {
            assert_relative_eq!(wi, 0.5, max_relative = 1e-12);
        }
    }
}
