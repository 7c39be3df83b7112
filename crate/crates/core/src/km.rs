//! Product-limit (Kaplan–Meier) estimation and exact piecewise integration.
//!
//! Two roles of the product-limit estimator appear here: `km_censoring`
//! estimates the censoring distribution `G` (roles of event and censoring
//! reversed), `km_event` estimates a residual distribution `F` from
//! right-censored residuals. Both return a [`StepDistribution`], a
//! right-continuous piecewise-constant CDF with left-limit queries.
//!
//! Integration against the censoring hazard ratio `G(t-)/(1-G(t-))` is exact:
//! the integrand is constant between jump times, so the integral is a finite
//! sum over pieces.

use crate::dataset::CensoredSample;
use crate::error::{Error, Result};

/// Clamp threshold for `1 - G` in hazard-ratio denominators.
pub const EPS_CLAMP: f64 = 1e-8;

/// Right-continuous piecewise-constant CDF.
///
/// `cdf_values[k]` is the value of the CDF on `[jump_times[k], jump_times[k+1])`;
/// the CDF is 0 below the first jump. `tail_cap`, when set, truncates the
/// hazard-ratio integrand beyond the largest event time (Efron tail
/// convention for an improper estimate that reaches 1).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    jump_times: Vec<f64>,
    cdf_values: Vec<f64>,
    support_floor: f64,
    tail_cap: Option<f64>,
}

impl StepDistribution {
    /// Builds a step CDF, validating monotonicity and range.
    pub fn new(jump_times: Vec<f64>, cdf_values: Vec<f64>) -> Result<Self> {
        Self::with_tail_cap(jump_times, cdf_values, None)
    }

    pub fn with_tail_cap(
        jump_times: Vec<f64>,
        cdf_values: Vec<f64>,
        tail_cap: Option<f64>,
    ) -> Result<Self> {
        if jump_times.len() != cdf_values.len() {
            return Err(Error::InvalidStepDistribution(
                "jump_times and cdf_values must have equal length".into(),
            ));
        }
        if jump_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidStepDistribution(
                "jump_times must be strictly increasing".into(),
            ));
        }
        if jump_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidStepDistribution(
                "jump_times must be finite".into(),
            ));
        }
        if cdf_values
            .windows(2)
            .any(|w| w[0] > w[1] + f64::EPSILON)
        {
            return Err(Error::InvalidStepDistribution(
                "cdf_values must be non-decreasing".into(),
            ));
        }
        if cdf_values.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
            return Err(Error::InvalidStepDistribution(
                "cdf_values must lie in [0, 1]".into(),
            ));
        }
        let support_floor = jump_times.first().copied().unwrap_or(f64::INFINITY);
        Ok(Self {
            jump_times,
            cdf_values,
            support_floor,
            tail_cap,
        })
    }

    /// The identically-zero CDF (no jumps).
    pub fn zero() -> Self {
        Self {
            jump_times: Vec::new(),
            cdf_values: Vec::new(),
            support_floor: f64::INFINITY,
            tail_cap: None,
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf_values
    }

    /// `G^{-1}(0)`: the largest `t` with CDF 0 (the first jump time, or
    /// `+inf` for the zero CDF).
    pub fn support_floor(&self) -> f64 {
        self.support_floor
    }

    pub fn tail_cap(&self) -> Option<f64> {
        self.tail_cap
    }

    pub fn is_zero(&self) -> bool {
        self.jump_times.is_empty()
    }

    /// Right-continuous value at `t`.
    pub fn value(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cdf_values[k - 1]
        }
    }

    /// Left limit: the value on the piece strictly below `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&x| x < t);
        if k == 0 {
            0.0
        } else {
            self.cdf_values[k - 1]
        }
    }

    /// Probability mass at each jump, with any mass beyond the last jump
    /// assigned to the last jump value (restricted-moment convention).
    fn restricted_masses(&self) -> Vec<f64> {
        let mut masses = Vec::with_capacity(self.jump_times.len());
        let mut prev = 0.0;
        for &v in &self.cdf_values {
            masses.push(v - prev);
            prev = v;
        }
        if let Some(last) = masses.last_mut() {
            *last += 1.0 - prev;
        }
        masses
    }

    /// Mean and variance of the distribution under the restricted-moment
    /// convention (trailing mass sits at the last jump value).
    pub fn restricted_mean_var(&self) -> Result<(f64, f64)> {
        if self.jump_times.is_empty() {
            return Err(Error::EmptyResidualDistribution);
        }
        let masses = self.restricted_masses();
        let mut mean = 0.0;
        let mut second = 0.0;
        for (&t, &m) in self.jump_times.iter().zip(&masses) {
            mean += m * t;
            second += m * t * t;
        }
        Ok((mean, (second - mean * mean).max(0.0)))
    }
}

/// Generic product-limit fit: treats `flags[i] == true` as the event of
/// interest; subjects with `flags[i] == false` leave the risk set without
/// contributing a jump.
fn product_limit(values: &[f64], flags: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut jump_times = Vec::new();
    let mut cdf_values = Vec::new();
    let mut survivor = 1.0;
    let mut pos = 0;
    while pos < n {
        let t = values[order[pos]];
        let mut d = 0usize;
        let mut tied = 0usize;
        while pos + tied < n && values[order[pos + tied]] == t {
            if flags[order[pos + tied]] {
                d += 1;
            }
            tied += 1;
        }
        let at_risk = n - pos;
        if d > 0 {
            survivor *= 1.0 - d as f64 / at_risk as f64;
            jump_times.push(t);
            cdf_values.push((1.0 - survivor).clamp(0.0, 1.0));
        }
        pos += tied;
    }
    (jump_times, cdf_values)
}

/// Product-limit estimate of the censoring distribution `G` from
/// `(time, 1 - delta)`.
///
/// Tie convention: events at a tied time stay in the risk set of the
/// censoring estimate at that time. If the largest observation is a
/// censoring event the estimate reaches 1 (improper tail); the hazard-ratio
/// integrand is then truncated at the largest event time.
pub fn km_censoring(sample: &CensoredSample) -> Result<StepDistribution> {
    if sample.n() == 0 {
        return Err(Error::EmptySample);
    }
    let times: Vec<f64> = sample.subjects().iter().map(|s| s.log_time).collect();
    let censored: Vec<bool> = sample.subjects().iter().map(|s| !s.event).collect();
    let (jump_times, cdf_values) = product_limit(&times, &censored);

    let improper = cdf_values.last().is_some_and(|&v| v >= 1.0 - EPS_CLAMP);
    let tail_cap = if improper {
        let last_event = sample
            .subjects()
            .iter()
            .filter(|s| s.event)
            .map(|s| s.log_time)
            .fold(f64::NEG_INFINITY, f64::max);
        Some(last_event)
    } else {
        None
    };
    StepDistribution::with_tail_cap(jump_times, cdf_values, tail_cap)
}

/// Product-limit CDF treating `events[i] == true` as the event of interest.
/// Used for the residual distribution in the reweighting loop.
pub fn km_event(values: &[f64], events: &[bool]) -> Result<StepDistribution> {
    assert_eq!(values.len(), events.len(), "values/events length mismatch");
    if !events.iter().any(|&e| e) {
        return Err(Error::ZeroEvents);
    }
    let (jump_times, cdf_values) = product_limit(values, events);
    StepDistribution::new(jump_times, cdf_values)
}

/// Exact value of `∫_{-∞}^{upper} G(t-)/(1-G(t-)) dt`.
pub fn integrate_hazard_ratio(g: &StepDistribution, upper: f64) -> Result<f64> {
    HazardIntegral::new(g).inner(upper)
}

/// Precomputed cumulative tables for the hazard-ratio integrand of a step
/// CDF: `I(u) = ∫_{-∞}^{u} G/(1-G) dt` (piecewise linear) and its
/// antiderivative `K(u) = ∫_{-∞}^{u} I(t) dt` (piecewise quadratic).
///
/// Evaluation is O(log #segments), so the double integral in the synthetic
/// variance reduces to a sum over the outer grid only.
#[derive(Debug, Clone)]
pub struct HazardIntegral {
    /// Segment start points (strictly increasing).
    starts: Vec<f64>,
    /// Slope (hazard ratio) on each segment.
    slopes: Vec<f64>,
    /// `I(starts[j])`.
    inner_cum: Vec<f64>,
    /// `K(starts[j])`.
    outer_cum: Vec<f64>,
    /// Smallest point beyond which the integral diverges, `+inf` if proper.
    diverges_from: f64,
    /// Number of segments whose denominator was clamped.
    clamped_segments: usize,
}

impl HazardIntegral {
    pub fn new(g: &StepDistribution) -> Self {
        let cap = g.tail_cap().unwrap_or(f64::INFINITY);
        let mut starts = Vec::new();
        let mut slopes = Vec::new();
        let mut diverges_from = f64::INFINITY;
        let mut clamped_segments = 0usize;

        let times = g.jump_times();
        let values = g.cdf_values();
        for k in 0..times.len() {
            let start = times[k];
            let end = times.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let c = values[k];
            if start >= cap {
                break;
            }
            let seg_end = end.min(cap);
            let denom = 1.0 - c;
            let slope = if denom < EPS_CLAMP {
                clamped_segments += 1;
                if seg_end > start {
                    diverges_from = diverges_from.min(start);
                }
                c / EPS_CLAMP
            } else {
                c / denom
            };
            starts.push(start);
            slopes.push(slope);
            if seg_end < end {
                // truncated: zero slope beyond the cap
                starts.push(seg_end);
                slopes.push(0.0);
                break;
            }
        }

        let m = starts.len();
        let mut inner_cum = vec![0.0; m];
        let mut outer_cum = vec![0.0; m];
        for j in 1..m {
            let dx = starts[j] - starts[j - 1];
            inner_cum[j] = inner_cum[j - 1] + slopes[j - 1] * dx;
            outer_cum[j] =
                outer_cum[j - 1] + inner_cum[j - 1] * dx + 0.5 * slopes[j - 1] * dx * dx;
        }
        Self {
            starts,
            slopes,
            inner_cum,
            outer_cum,
            diverges_from,
            clamped_segments,
        }
    }

    pub fn clamped_segments(&self) -> usize {
        self.clamped_segments
    }

    fn segment_below(&self, u: f64) -> Option<usize> {
        let k = self.starts.partition_point(|&x| x <= u);
        k.checked_sub(1)
    }

    fn check_divergence(&self, upper: f64) -> Result<()> {
        if upper > self.diverges_from {
            return Err(Error::HazardDiverges {
                start: self.diverges_from,
                upper,
            });
        }
        Ok(())
    }

    /// `I(u) = ∫_{-∞}^{u} G(t-)/(1-G(t-)) dt`.
    pub fn inner(&self, u: f64) -> Result<f64> {
        self.check_divergence(u)?;
        Ok(match self.segment_below(u) {
            None => 0.0,
            Some(j) => self.inner_cum[j] + self.slopes[j] * (u - self.starts[j]),
        })
    }

    /// `K(u) = ∫_{-∞}^{u} I(t) dt`.
    pub fn outer(&self, u: f64) -> Result<f64> {
        self.check_divergence(u)?;
        Ok(match self.segment_below(u) {
            None => 0.0,
            Some(j) => {
                let dx = u - self.starts[j];
                self.outer_cum[j] + self.inner_cum[j] * dx + 0.5 * self.slopes[j] * dx * dx
            }
        })
    }
}

/// Cumulative table for `Q(u) = ∫ 1/(1-G(t)) dt` (right-continuous `G`),
/// normalized so differences `Q(b) - Q(a)` give `∫_a^b`. Used by the
/// martingale correction in the sandwich variance.
#[derive(Debug, Clone)]
pub struct SurvivalInverseIntegral {
    starts: Vec<f64>,
    slopes: Vec<f64>,
    cum: Vec<f64>,
}

impl SurvivalInverseIntegral {
    pub fn new(g: &StepDistribution) -> Self {
        let times = g.jump_times();
        let values = g.cdf_values();
        // Anchor at the first jump; below it the integrand is 1.
        let anchor = times.first().copied().unwrap_or(0.0);
        let mut starts = vec![anchor];
        let mut slopes = vec![1.0 / (1.0 - values.first().copied().unwrap_or(0.0)).max(EPS_CLAMP)];
        for k in 1..times.len() {
            starts.push(times[k]);
            slopes.push(1.0 / (1.0 - values[k]).max(EPS_CLAMP));
        }
        let m = starts.len();
        let mut cum = vec![0.0; m];
        for j in 1..m {
            cum[j] = cum[j - 1] + slopes[j - 1] * (starts[j] - starts[j - 1]);
        }
        Self { starts, slopes, cum }
    }

    /// `Q(u)` with `Q(anchor) = 0`; slope 1 below the anchor.
    pub fn eval(&self, u: f64) -> f64 {
        let k = self.starts.partition_point(|&x| x <= u);
        match k.checked_sub(1) {
            None => u - self.starts[0],
            Some(j) => self.cum[j] + self.slopes[j] * (u - self.starts[j]),
        }
    }
}
