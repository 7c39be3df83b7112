//! Two-stage estimation: stage-1 least squares, stage-2 weighted least
//! squares on synthetic outcomes, the iterative reweighting loop, and the
//! comparator estimators (cOLS, classical uncensored TSLS).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::CensoredSample;
use crate::error::{Error, Result};
use crate::km::{km_censoring, km_event, HazardIntegral};
use crate::synthetic::{compute_weights, leurgans_transform, SyntheticOutcome, WeightVector};
use crate::variance;

/// Stacked parameter vector `θ = (α₀, α₁, α₂, β₀, β₁, β₂)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterVector {
    pub alpha0: f64,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: Vec<f64>,
}

impl ParameterVector {
    pub fn from_stages(alpha: &[f64], beta: &[f64], q: usize, p: usize) -> Self {
        assert_eq!(alpha.len(), 1 + q + p);
        assert_eq!(beta.len(), 2 + p);
        Self {
            alpha0: alpha[0],
            alpha1: alpha[1..=q].to_vec(),
            alpha2: alpha[1 + q..].to_vec(),
            beta0: beta[0],
            beta1: beta[1],
            beta2: beta[2..].to_vec(),
        }
    }

    pub fn q(&self) -> usize {
        self.alpha1.len()
    }

    pub fn p(&self) -> usize {
        self.alpha2.len()
    }

    pub fn dim(&self) -> usize {
        (1 + self.q() + self.p()) + (2 + self.p())
    }

    /// Index of `β₁` in the stacked ordering.
    pub fn beta1_index(&self) -> usize {
        (1 + self.q() + self.p()) + 1
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.alpha0);
        v.extend_from_slice(&self.alpha1);
        v.extend_from_slice(&self.alpha2);
        v.push(self.beta0);
        v.push(self.beta1);
        v.extend_from_slice(&self.beta2);
        DVector::from_vec(v)
    }

    pub fn alpha_block(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.q() + self.p());
        v.push(self.alpha0);
        v.extend_from_slice(&self.alpha1);
        v.extend_from_slice(&self.alpha2);
        v
    }

    pub fn beta_block(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.p());
        v.push(self.beta0);
        v.push(self.beta1);
        v.extend_from_slice(&self.beta2);
        v
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.stacked();
        let b = other.stacked();
        (a - b).amax()
    }

    /// Linear predictor `μ_{X_i} = α₀ + α₁ᵀZ_i + α₂ᵀD_i`.
    pub fn mu_x(&self, sample: &CensoredSample) -> Vec<f64> {
        sample
            .subjects()
            .iter()
            .map(|s| {
                self.alpha0
                    + dot(&self.alpha1, &s.instruments)
                    + dot(&self.alpha2, &s.confounders)
            })
            .collect()
    }

    /// Linear predictor `μ_{Y_i} = β₀ + β₁μ_{X_i} + β₂ᵀD_i`.
    pub fn mu_y(&self, sample: &CensoredSample, mu_x: &[f64]) -> Vec<f64> {
        sample
            .subjects()
            .iter()
            .zip(mu_x)
            .map(|(s, &mx)| self.beta0 + self.beta1 * mx + dot(&self.beta2, &s.confounders))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerical diagnostics surfaced with a fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    /// Condition number estimate of the assembled Jacobian.
    pub a_condition: f64,
    /// Number of hazard-ratio segments whose denominator was clamped.
    pub clamp_activations: usize,
    /// First-stage R² (instrument relevance).
    pub first_stage_r2: f64,
}

/// Estimates, covariance, and the iteration trace of a fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ParameterVector,
    /// Sandwich covariance of the stacked parameter vector.
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    /// 95% Wald intervals, one pair per stacked component.
    pub conf_intervals: Vec<(f64, f64)>,
    pub p_values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Parameter snapshot after every refit, starting at `θ̂⁽⁰⁾`.
    pub trace: Vec<ParameterVector>,
    pub weights_final: WeightVector,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn beta1(&self) -> f64 {
        self.theta.beta1
    }

    pub fn beta1_variance(&self) -> f64 {
        let k = self.theta.beta1_index();
        self.covariance[(k, k)]
    }

    pub fn beta1_interval(&self) -> (f64, f64) {
        self.conf_intervals[self.theta.beta1_index()]
    }
}

/// Options for [`fit_ctsls`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitOptions {
    /// Max-norm stopping tolerance on the parameter update.
    pub tol: f64,
    /// Maximum number of reweighting iterations.
    pub kmax: usize,
    /// When false, keeps unit weights and skips the reweighting loop.
    pub weighted: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            kmax: 10,
            weighted: true,
        }
    }
}

/// Weighted least squares via QR of the row-scaled design.
///
/// Minimizes `Σ ω_i (y_i - x_iᵀb)²` by a column-pivoted orthogonal
/// factorization of `diag(√ω) X`; normal equations are never formed.
pub fn solve_weighted_ls(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
) -> Result<DVector<f64>> {
    let (n, k) = design.shape();
    assert_eq!(response.len(), n);
    assert_eq!(weights.len(), n);
    if n < k {
        return Err(Error::RankDeficient((0..k).collect()));
    }
    let mut scaled = design.clone();
    let mut rhs = response.clone();
    for i in 0..n {
        let s = weights[i].sqrt();
        for j in 0..k {
            scaled[(i, j)] *= s;
        }
        rhs[i] *= s;
    }
    let qr = scaled.col_piv_qr();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    let tol = r00 * 1e-10;
    let deficient_positions: Vec<usize> = (0..k).filter(|&j| r[(j, j)].abs() <= tol).collect();
    if !deficient_positions.is_empty() {
        // map pivoted positions back to original column indices
        let mut idx =
            nalgebra::RowDVector::<f64>::from_iterator(k, (0..k).map(|j| j as f64));
        qr.p().permute_columns(&mut idx);
        let mut deficient: Vec<usize> = deficient_positions
            .iter()
            .map(|&j| idx[j] as usize)
            .collect();
        deficient.sort_unstable();
        return Err(Error::RankDeficient(deficient));
    }
    // R y = Qᵀ rhs, then undo the column permutation
    let qtb = qr.q().transpose() * rhs;
    let mut y = DVector::zeros(k);
    for j in (0..k).rev() {
        let mut acc = qtb[j];
        for l in (j + 1)..k {
            acc -= r[(j, l)] * y[l];
        }
        y[j] = acc / r[(j, j)];
    }
    qr.p().inv_permute_rows(&mut y);
    Ok(y)
}

/// Stage-1 fit: unweighted least squares of `X` on `[1, Z, D]`.
#[derive(Debug, Clone)]
pub struct Stage1Fit {
    /// Coefficients in `[intercept, Z..., D...]` order.
    pub alpha: Vec<f64>,
    /// Fitted values `μ̂_{X_i}`.
    pub fitted_x: Vec<f64>,
    pub r_squared: f64,
}

pub fn stage1_fit(sample: &CensoredSample) -> Result<Stage1Fit> {
    let design = sample.stage1_design();
    let x = DVector::from_iterator(
        sample.n(),
        sample.subjects().iter().map(|s| s.exposure),
    );
    let unit = vec![1.0; sample.n()];
    let alpha = solve_weighted_ls(&design, &x, &unit)?;
    let fitted = &design * &alpha;
    let mean = x.mean();
    let sst: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let ssr: f64 = x.iter().zip(fitted.iter()).map(|(v, f)| (v - f).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    Ok(Stage1Fit {
        alpha: alpha.iter().copied().collect(),
        fitted_x: fitted.iter().copied().collect(),
        r_squared,
    })
}

/// Stage-2 design `[1, μ̂_X, D]`.
fn stage2_design(sample: &CensoredSample, fitted_x: &[f64]) -> DMatrix<f64> {
    let n = sample.n();
    let p = sample.p();
    DMatrix::from_fn(n, 2 + p, |i, j| match j {
        0 => 1.0,
        1 => fitted_x[i],
        _ => sample.subjects()[i].confounders[j - 2],
    })
}

/// Stage-2 fit: weighted least squares of `Y*` on `[1, μ̂_X, D]`; solves the
/// weighted estimating equation exactly for fixed weights.
pub fn stage2_fit(
    synthetic: &SyntheticOutcome,
    fitted_x: &[f64],
    sample: &CensoredSample,
    weights: &WeightVector,
) -> Result<Vec<f64>> {
    let design = stage2_design(sample, fitted_x);
    let y = DVector::from_column_slice(synthetic.values());
    let beta = solve_weighted_ls(&design, &y, weights.as_slice())?;
    Ok(beta.iter().copied().collect())
}

/// Iterative reweighted censored TSLS.
///
/// The censoring CDF and synthetic outcomes are computed once. Stage 1 is
/// weight-free and fits once; the reweighting loop refits stage 2 only:
/// fitted values give residuals, a product-limit fit of the residuals gives
/// the pooled residual distribution, and its restricted variance plus the
/// per-subject shift give the new weights. Stops when the max-norm update
/// falls below `tol` or after `kmax` iterations; non-convergence is flagged,
/// not an error.
pub fn fit_ctsls(sample: &CensoredSample, opts: &FitOptions) -> Result<FitResult> {
    let g = km_censoring(sample)?;
    let clamp_activations = HazardIntegral::new(&g).clamped_segments();
    let ystar = leurgans_transform(sample, &g)?;
    let s1 = stage1_fit(sample)?;
    let events = sample.events();
    let n = sample.n();

    let mut weights = WeightVector::unit(n);
    let beta0 = stage2_fit(&ystar, &s1.fitted_x, sample, &weights)?;
    let mut theta = ParameterVector::from_stages(&s1.alpha, &beta0, sample.q(), sample.p());
    let mut trace = vec![theta.clone()];
    let mut converged = !opts.weighted;
    let mut iterations = 0;

    if opts.weighted {
        for k in 1..=opts.kmax {
            let mu_y = theta.mu_y(sample, &s1.fitted_x);
            let residuals: Vec<f64> = ystar
                .values()
                .iter()
                .zip(&mu_y)
                .map(|(y, m)| y - m)
                .collect();
            let f_hat = km_event(&residuals, &events)?;
            let (_, var_y) = f_hat.restricted_mean_var()?;
            // A degenerate residual distribution (zero restricted variance,
            // e.g. an exact fit) gives no information to weight by; keep
            // constant weights for this pass instead of failing.
            weights = if var_y > 0.0 {
                compute_weights(sample, &g, &f_hat, &mu_y, var_y)?
            } else {
                WeightVector::unit(n)
            };
            let beta = stage2_fit(&ystar, &s1.fitted_x, sample, &weights)?;
            let next = ParameterVector::from_stages(&s1.alpha, &beta, sample.q(), sample.p());
            let delta = theta.max_abs_diff(&next);
            theta = next;
            trace.push(theta.clone());
            iterations = k;
            if delta < opts.tol {
                converged = true;
                break;
            }
        }
    }

    let contribs = variance::score_contributions(sample, &theta, &g, &ystar, &weights)?;
    let parts = variance::sandwich_parts(sample, &theta, &ystar, &weights, &contribs)?;
    let (std_errors, conf_intervals, p_values) =
        variance::wald_inference(&theta.stacked(), &parts.covariance, 0.95)?;

    Ok(FitResult {
        theta,
        covariance: parts.covariance,
        std_errors,
        conf_intervals,
        p_values,
        iterations,
        converged,
        trace,
        weights_final: weights,
        diagnostics: FitDiagnostics {
            a_condition: parts.a_condition,
            clamp_activations,
            first_stage_r2: s1.r_squared,
        },
    })
}

/// Censored one-stage least squares: `Y*` regressed directly on the
/// observed exposure and confounders, no instrumentation, unit weights.
///
/// The covariance is the classical heteroskedasticity sandwich treating
/// `Y*` as data — deliberately naive, as the comparator is defined. The
/// fit has no first stage, so the α block of the result is zero with zero
/// covariance.
pub fn fit_cols(sample: &CensoredSample) -> Result<FitResult> {
    let g = km_censoring(sample)?;
    let clamp_activations = HazardIntegral::new(&g).clamped_segments();
    let ystar = leurgans_transform(sample, &g)?;
    let n = sample.n();
    let (p, q) = (sample.p(), sample.q());

    let x_obs: Vec<f64> = sample.subjects().iter().map(|s| s.exposure).collect();
    let design = stage2_design(sample, &x_obs);
    let y = DVector::from_column_slice(ystar.values());
    let unit = vec![1.0; n];
    let beta = solve_weighted_ls(&design, &y, &unit)?;

    // HC0 sandwich on the one-stage design
    let k = design.ncols();
    let xtx = design.transpose() * &design;
    let xtx_inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient((0..k).collect()))?;
    let fitted = &design * &beta;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let e = y[i] - fitted[i];
        let xi = design.row(i).transpose();
        meat += &xi * xi.transpose() * (e * e);
    }
    let cov_beta = &xtx_inv * meat * &xtx_inv;

    let dim1 = 1 + q + p;
    let dim = dim1 + 2 + p;
    let mut covariance = DMatrix::zeros(dim, dim);
    covariance.view_mut((dim1, dim1), (k, k)).copy_from(&cov_beta);

    let alpha = vec![0.0; dim1];
    let beta_vec: Vec<f64> = beta.iter().copied().collect();
    let theta = ParameterVector::from_stages(&alpha, &beta_vec, q, p);
    let (std_errors, conf_intervals, p_values) =
        variance::wald_inference(&theta.stacked(), &covariance, 0.95)?;
    Ok(FitResult {
        trace: vec![theta.clone()],
        theta,
        covariance,
        std_errors,
        conf_intervals,
        p_values,
        iterations: 0,
        converged: true,
        weights_final: WeightVector::unit(n),
        diagnostics: FitDiagnostics {
            a_condition: 0.0,
            clamp_activations,
            first_stage_r2: 0.0,
        },
    })
}

/// Classical TSLS with the classical GMM sandwich; requires a fully
/// observed sample. Serves as the exact oracle for the no-censoring
/// reduction, with the sandwich assembled independently of the censored
/// path.
pub fn fit_tsls_uncensored(sample: &CensoredSample) -> Result<FitResult> {
    if sample.subjects().iter().any(|s| !s.event) {
        return Err(Error::CensoredSubjectsPresent);
    }
    let n = sample.n();
    let (p, q) = (sample.p(), sample.q());
    let s1 = stage1_fit(sample)?;
    let design2 = stage2_design(sample, &s1.fitted_x);
    let y = DVector::from_iterator(n, sample.subjects().iter().map(|s| s.log_time));
    let unit = vec![1.0; n];
    let beta = solve_weighted_ls(&design2, &y, &unit)?;
    let beta_vec: Vec<f64> = beta.iter().copied().collect();
    let theta = ParameterVector::from_stages(&s1.alpha, &beta_vec, q, p);

    // classical sandwich: direct assembly from per-subject scores
    let dim1 = 1 + q + p;
    let dim2 = 2 + p;
    let dim = dim1 + dim2;
    let u = sample.stage1_design();
    let mu_x = &s1.fitted_x;
    let mu_y = theta.mu_y(sample, mu_x);

    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let s = &sample.subjects()[i];
        let ui = u.row(i).transpose();
        let vi = design2.row(i).transpose();
        let x_res = s.exposure - mu_x[i];
        let y_res = s.log_time - mu_y[i];

        let mut left = DVector::zeros(dim2);
        left[0] = theta.beta1;
        left[1] = theta.beta1 * mu_x[i] + mu_y[i] - s.log_time;
        for j in 0..p {
            left[2 + j] = theta.beta1 * s.confounders[j];
        }

        a.view_mut((0, 0), (dim1, dim1)).syger(1.0, &ui, &ui, 1.0);
        a.view_mut((dim1, 0), (dim2, dim1))
            .gemm(1.0, &left, &ui.transpose(), 1.0);
        a.view_mut((dim1, dim1), (dim2, dim2))
            .syger(1.0, &vi, &vi, 1.0);

        let mut score = DVector::zeros(dim);
        for j in 0..dim1 {
            score[j] = ui[j] * x_res;
        }
        for j in 0..dim2 {
            score[dim1 + j] = vi[j] * y_res;
        }
        b.syger(1.0, &score, &score, 1.0);
    }
    // syger fills the lower triangle; symmetrize
    let a = symmetrize_blocks(a, dim1, dim);
    let b = {
        let mut b = b / n as f64;
        for i in 0..dim {
            for j in 0..i {
                b[(j, i)] = b[(i, j)];
            }
        }
        b
    };
    let a = a / n as f64;
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or(Error::SingularAHat(f64::INFINITY))?;
    let covariance = (&a_inv * b * a_inv.transpose()) / n as f64;
    let covariance = (&covariance + covariance.transpose()) * 0.5;

    let (std_errors, conf_intervals, p_values) =
        variance::wald_inference(&theta.stacked(), &covariance, 0.95)?;
    Ok(FitResult {
        trace: vec![theta.clone()],
        theta,
        covariance,
        std_errors,
        conf_intervals,
        p_values,
        iterations: 0,
        converged: true,
        weights_final: WeightVector::unit(n),
        diagnostics: FitDiagnostics {
            a_condition: 0.0,
            clamp_activations: 0,
            first_stage_r2: s1.r_squared,
        },
    })
}

fn symmetrize_blocks(mut a: DMatrix<f64>, dim1: usize, dim: usize) -> DMatrix<f64> {
    // A11 and A22 were accumulated with syger (lower triangle only)
    for i in 0..dim1 {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    for i in dim1..dim {
        for j in dim1..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    // A12 stays zero
    for i in 0..dim1 {
        for j in dim1..dim {
            a[(i, j)] = 0.0;
        }
    }
    a
}
