//! Sandwich covariance `Â⁻¹B̂Â⁻ᵀ/n` for the two-stage estimator, with the
//! martingale correction for estimation of the censoring distribution, plus
//! Wald inference.
//!
//! Per-subject scores are
//! `Ψ₁ⱼ = [1, Zⱼ, Dⱼ]ᵀ(Xⱼ − μ_{Xⱼ})` and
//! `Ψ₂ⱼ = ωⱼ[1, μ_{Xⱼ}, Dⱼ]ᵀ(Y*ⱼ − μ_{Yⱼ})`; the correction term
//! `Ψ̂*₂ⱼ = Σ_s h(s)·(dNⱼ(s) − Yⱼ(s)·dN(s)/Y(s))` runs over censoring
//! times, where `Nⱼ(t) = I(Ỹⱼ ≤ t, δⱼ = 0)`, `Yⱼ(t) = I(Ỹⱼ ≥ t)` and
//! `h(s) = [Σᵢ ωᵢv̂ᵢ 1{s<Ỹᵢ} ∫ₛ^{Ỹᵢ} dt/(1−Ĝ(t))]/Y(s)`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::CensoredSample;
use crate::error::{Error, Result};
use crate::estimator::ParameterVector;
use crate::km::{StepDistribution, SurvivalInverseIntegral};
use crate::synthetic::{SyntheticOutcome, WeightVector};

/// Per-subject estimating-function contributions at the fitted parameters.
#[derive(Debug, Clone)]
pub struct ScoreContribs {
    /// Rows `Ψ₁ⱼ`, shape n×(1+q+p).
    pub psi1: DMatrix<f64>,
    /// Rows `Ψ₂ⱼ`, shape n×(2+p).
    pub psi2: DMatrix<f64>,
    /// Rows `Ψ̂*₂ⱼ`, shape n×(2+p); identically zero without censoring.
    pub psi2_star: DMatrix<f64>,
}

/// Assembled sandwich pieces.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// `Â⁻¹B̂Â⁻ᵀ/n`, symmetrized.
    pub covariance: DMatrix<f64>,
    /// 2-norm condition estimate of `Â`.
    pub a_condition: f64,
}

/// Computes `Ψ₁ⱼ`, `Ψ₂ⱼ` and the martingale correction `Ψ̂*₂ⱼ`.
///
/// The correction's double sum is evaluated in O(n log n): the inner time
/// integral is a difference of a cumulative piecewise-linear table
/// `Q(u) = ∫ du/(1−Ĝ)`, and the numerator of `h(s)` is maintained as the
/// suffix sums `Σ_{Ỹᵢ>s} ωᵢv̂ᵢQ(Ỹᵢ)` and `Σ_{Ỹᵢ>s} ωᵢv̂ᵢ` while censoring
/// times are swept in decreasing order.
pub fn score_contributions(
    sample: &CensoredSample,
    theta: &ParameterVector,
    g: &StepDistribution,
    synthetic: &SyntheticOutcome,
    weights: &WeightVector,
) -> Result<ScoreContribs> {
    let n = sample.n();
    let (p, q) = (sample.p(), sample.q());
    let dim1 = 1 + q + p;
    let dim2 = 2 + p;
    let mu_x = theta.mu_x(sample);
    let mu_y = theta.mu_y(sample, &mu_x);
    let w = weights.as_slice();
    let ystar = synthetic.values();

    let mut psi1 = DMatrix::zeros(n, dim1);
    let mut psi2 = DMatrix::zeros(n, dim2);
    for (i, s) in sample.subjects().iter().enumerate() {
        let x_res = s.exposure - mu_x[i];
        psi1[(i, 0)] = x_res;
        for j in 0..q {
            psi1[(i, 1 + j)] = s.instruments[j] * x_res;
        }
        for j in 0..p {
            psi1[(i, 1 + q + j)] = s.confounders[j] * x_res;
        }
        let y_res = w[i] * (ystar[i] - mu_y[i]);
        psi2[(i, 0)] = y_res;
        psi2[(i, 1)] = mu_x[i] * y_res;
        for j in 0..p {
            psi2[(i, 2 + j)] = s.confounders[j] * y_res;
        }
    }

    let psi2_star = martingale_correction(sample, &mu_x, g, weights)?;
    Ok(ScoreContribs {
        psi1,
        psi2,
        psi2_star,
    })
}

fn v_hat(sample: &CensoredSample, mu_x: &[f64], i: usize) -> DVector<f64> {
    let p = sample.p();
    let mut v = DVector::zeros(2 + p);
    v[0] = 1.0;
    v[1] = mu_x[i];
    for j in 0..p {
        v[2 + j] = sample.subjects()[i].confounders[j];
    }
    v
}

fn martingale_correction(
    sample: &CensoredSample,
    mu_x: &[f64],
    g: &StepDistribution,
    weights: &WeightVector,
) -> Result<DMatrix<f64>> {
    let n = sample.n();
    let dim2 = 2 + sample.p();
    let mut star = DMatrix::zeros(n, dim2);
    let n_cens = sample.subjects().iter().filter(|s| !s.event).count();
    if n_cens == 0 {
        return Ok(star);
    }
    let w = weights.as_slice();
    let q_table = SurvivalInverseIntegral::new(g);

    // subjects sorted by observed time, descending for the suffix sweep
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sample.subjects()[b]
            .log_time
            .total_cmp(&sample.subjects()[a].log_time)
    });

    // distinct censoring times, descending, with multiplicity dN(s)
    let mut cens_times: Vec<f64> = sample
        .subjects()
        .iter()
        .filter(|s| !s.event)
        .map(|s| s.log_time)
        .collect();
    cens_times.sort_by(|a, b| b.total_cmp(a));
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for t in cens_times {
        match distinct.last_mut() {
            Some((s, c)) if *s == t => *c += 1,
            _ => distinct.push((t, 1)),
        }
    }

    // sweep: h(s) for each distinct censoring time, descending
    let mut suf_a = DVector::zeros(dim2); // Σ_{Ỹᵢ>s} ωᵢ v̂ᵢ Q(Ỹᵢ)
    let mut suf_b = DVector::zeros(dim2); // Σ_{Ỹᵢ>s} ωᵢ v̂ᵢ
    let mut cursor = 0usize; // next position in `order` not yet absorbed
    let mut h_at: Vec<DVector<f64>> = Vec::with_capacity(distinct.len());
    for &(s, _) in &distinct {
        while cursor < n {
            let i = order[cursor];
            let t_i = sample.subjects()[i].log_time;
            if t_i <= s {
                break;
            }
            let v = v_hat(sample, mu_x, i);
            suf_a += &v * (w[i] * q_table.eval(t_i));
            suf_b += &v * w[i];
            cursor += 1;
        }
        // at-risk count Y(s) = #{Ỹᵢ ≥ s}; `cursor` subjects are strictly
        // above s, ties at s found by scanning forward in sorted order
        let mut at_risk = cursor;
        let mut k = cursor;
        while k < n && sample.subjects()[order[k]].log_time == s {
            at_risk += 1;
            k += 1;
        }
        debug_assert!(at_risk > 0);
        let numer = &suf_a - &suf_b * q_table.eval(s);
        h_at.push(numer / at_risk as f64);
    }

    // compensator prefix: c(s) = Σ_{s' ≤ s} h(s')·dN(s')/Y(s'), built in
    // increasing time order
    let mut comp_prefix: Vec<DVector<f64>> = Vec::with_capacity(distinct.len());
    let mut acc = DVector::zeros(dim2);
    for k in (0..distinct.len()).rev() {
        let (s, d_n) = distinct[k];
        // recompute Y(s) for the compensator; same tie convention
        let at_risk = sample
            .subjects()
            .iter()
            .filter(|sub| sub.log_time >= s)
            .count();
        acc += &h_at[k] * (d_n as f64 / at_risk as f64);
        comp_prefix.push(acc.clone());
    }
    // comp_prefix[m] now corresponds to ascending distinct index m
    let asc_times: Vec<f64> = distinct.iter().rev().map(|&(s, _)| s).collect();

    for (j, subj) in sample.subjects().iter().enumerate() {
        let mut row = DVector::zeros(dim2);
        if !subj.event {
            // dNⱼ jumps exactly at the subject's own censoring time
            let k = distinct
                .iter()
                .position(|&(s, _)| s == subj.log_time)
                .expect("censoring time present");
            row += &h_at[k];
        }
        // compensator: −Σ_{s ≤ Ỹⱼ} h(s)·dN(s)/Y(s)
        let m = asc_times.partition_point(|&s| s <= subj.log_time);
        if m > 0 {
            row -= &comp_prefix[m - 1];
        }
        star.row_mut(j).copy_from(&row.transpose());
    }
    Ok(star)
}

/// `Â` assembled from the §-printed plug-in blocks:
/// `A₁₁ = avg uᵢuᵢᵀ`, `A₁₂ = 0`,
/// `A₂₁ = avg ωᵢ[β₁, β₁μ_{Xᵢ}+μ_{Yᵢ}−Y*ᵢ, β₁Dᵢ]ᵀuᵢᵀ`,
/// `A₂₂ = avg ωᵢvᵢvᵢᵀ`, with `uᵢ = [1,Zᵢ,Dᵢ]`, `vᵢ = [1,μ_{Xᵢ},Dᵢ]`.
pub fn assemble_a_hat(
    sample: &CensoredSample,
    theta: &ParameterVector,
    synthetic: &SyntheticOutcome,
    weights: &WeightVector,
) -> DMatrix<f64> {
    let n = sample.n();
    let (p, q) = (sample.p(), sample.q());
    let dim1 = 1 + q + p;
    let dim2 = 2 + p;
    let dim = dim1 + dim2;
    let mu_x = theta.mu_x(sample);
    let mu_y = theta.mu_y(sample, &mu_x);
    let w = weights.as_slice();
    let ystar = synthetic.values();

    let mut a = DMatrix::zeros(dim, dim);
    let mut u = DVector::zeros(dim1);
    for (i, s) in sample.subjects().iter().enumerate() {
        u[0] = 1.0;
        for j in 0..q {
            u[1 + j] = s.instruments[j];
        }
        for j in 0..p {
            u[1 + q + j] = s.confounders[j];
        }
        let v = v_hat(sample, &mu_x, i);

        let mut left = DVector::zeros(dim2);
        left[0] = theta.beta1;
        left[1] = theta.beta1 * mu_x[i] + mu_y[i] - ystar[i];
        for j in 0..p {
            left[2 + j] = theta.beta1 * s.confounders[j];
        }

        for r in 0..dim1 {
            for c in 0..dim1 {
                a[(r, c)] += u[r] * u[c];
            }
        }
        for r in 0..dim2 {
            for c in 0..dim1 {
                a[(dim1 + r, c)] += w[i] * left[r] * u[c];
            }
            for c in 0..dim2 {
                a[(dim1 + r, dim1 + c)] += w[i] * v[r] * v[c];
            }
        }
    }
    a / n as f64
}

/// `B̂`: average outer product of the stacked scores, with the martingale
/// correction added to the second block.
pub fn assemble_b_hat(contribs: &ScoreContribs) -> DMatrix<f64> {
    let n = contribs.psi1.nrows();
    let dim1 = contribs.psi1.ncols();
    let dim2 = contribs.psi2.ncols();
    let dim = dim1 + dim2;
    let mut b = DMatrix::zeros(dim, dim);
    let mut stacked = DVector::zeros(dim);
    for j in 0..n {
        for c in 0..dim1 {
            stacked[c] = contribs.psi1[(j, c)];
        }
        for c in 0..dim2 {
            stacked[dim1 + c] = contribs.psi2[(j, c)] + contribs.psi2_star[(j, c)];
        }
        for r in 0..dim {
            for c in 0..=r {
                b[(r, c)] += stacked[r] * stacked[c];
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            b[(c, r)] = b[(r, c)];
        }
    }
    b / n as f64
}

/// Inverts `Â`, forms `Â⁻¹B̂Â⁻ᵀ/n` and symmetrizes.
pub fn sandwich_parts(
    sample: &CensoredSample,
    theta: &ParameterVector,
    synthetic: &SyntheticOutcome,
    weights: &WeightVector,
    contribs: &ScoreContribs,
) -> Result<SandwichParts> {
    let a_hat = assemble_a_hat(sample, theta, synthetic, weights);
    let b_hat = assemble_b_hat(contribs);
    let svd = a_hat.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let a_condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let a_inv = a_hat
        .clone()
        .try_inverse()
        .ok_or(Error::SingularAHat(a_condition))?;
    let n = sample.n() as f64;
    let cov = (&a_inv * &b_hat * a_inv.transpose()) / n;
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(SandwichParts {
        a_hat,
        b_hat,
        covariance,
        a_condition,
    })
}

/// Standard errors, two-sided Wald intervals and normal p-values at the
/// given confidence level.
pub fn wald_inference(
    theta: &DVector<f64>,
    covariance: &DMatrix<f64>,
    level: f64,
) -> Result<(Vec<f64>, Vec<(f64, f64)>, Vec<f64>)> {
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let dim = theta.len();
    assert_eq!(covariance.nrows(), dim);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let mut std_errors = Vec::with_capacity(dim);
    let mut conf = Vec::with_capacity(dim);
    let mut pvals = Vec::with_capacity(dim);
    for i in 0..dim {
        let var = covariance[(i, i)];
        if var < 0.0 {
            return Err(Error::NegativeVariance {
                index: i,
                value: var,
            });
        }
        let se = var.sqrt();
        std_errors.push(se);
        conf.push((theta[i] - z * se, theta[i] + z * se));
        let p = if se == 0.0 {
            if theta[i] == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            2.0 * (1.0 - normal.cdf((theta[i] / se).abs()))
        };
        pvals.push(p);
    }
    Ok((std_errors, conf, pvals))
}
