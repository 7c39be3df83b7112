//! Acceptance suite: one test (and one printed pass/fail line) per
//! criterion. Criteria 4–7 share a single Monte Carlo grid run, computed
//! once on first use.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctsls::dataset::CensoredSample;
use ctsls::estimator::{fit_ctsls, fit_tsls_uncensored, FitOptions, ParameterVector};
use ctsls::km::{km_censoring, StepDistribution};
use ctsls::mc_harness::{run_grid, summarize, EstimatorKind, McReport};
use ctsls::simgen::{generate_replicate, ErrorScenario, SimConfig, TrueParams};
use ctsls::synthetic::{leurgans_transform, WeightVector};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:2} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn random_uncensored(seed: u64, n: usize) -> CensoredSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    let mut x = Vec::new();
    let mut d = Vec::new();
    let mut z = Vec::new();
    for _ in 0..n {
        let zi: f64 = rng.gen_range(-1.0..1.0);
        let di: f64 = rng.gen_range(-1.0..1.0);
        let xi = 0.8 * zi + 0.3 * di + rng.gen_range(-0.5..0.5);
        let yi = 1.2 * xi + 0.5 * di + rng.gen_range(-0.5..0.5);
        times.push(yi);
        x.push(xi);
        d.push(vec![di]);
        z.push(vec![zi]);
    }
    CensoredSample::from_parts(times, vec![true; n], x, d, z).unwrap()
}

#[test]
fn criterion_01_no_censoring_exact_reduction() {
    let start = Instant::now();
    let mut max_theta = 0.0f64;
    let mut max_cov = 0.0f64;
    for seed in 0..100 {
        let s = random_uncensored(1000 + seed, 200);
        let a = fit_ctsls(&s, &FitOptions::default()).unwrap();
        let b = fit_tsls_uncensored(&s).unwrap();
        max_theta = max_theta.max((a.theta.stacked() - b.theta.stacked()).amax());
        let rel = (&a.covariance - &b.covariance).amax() / b.covariance.amax();
        max_cov = max_cov.max(rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        1,
        "no-censoring exact reduction",
        max_theta < 1e-10 && max_cov < 1e-8 && elapsed < 5.0,
        &format!("max |Δθ| = {max_theta:.2e}, max rel cov gap = {max_cov:.2e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_02_synthetic_outcome_unbiasedness() {
    let start = Instant::now();
    // Known G: C discretized upward onto a fine grid, so the step CDF is
    // exactly the distribution of the discretized censoring variable.
    let grid: Vec<f64> = (0..=4000).map(|k| -4.5 + k as f64 * 10.0 / 4000.0 + 0.5).collect();
    let normal = statrs_cdf();
    let cdf: Vec<f64> = grid.iter().map(|&t| normal(t - 0.5)).collect();
    let g_known = StepDistribution::new(grid.clone(), cdf).unwrap();

    let m = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut times = Vec::with_capacity(m);
    let mut events = Vec::with_capacity(m);
    for _ in 0..m {
        let y: f64 = rng.sample(rand_distr::StandardNormal);
        let c_raw: f64 = 0.5 + rng.sample::<f64, _>(rand_distr::StandardNormal);
        let k = grid.partition_point(|&t| t < c_raw);
        let c = grid[k.min(grid.len() - 1)]; // smallest grid point ≥ c_raw
        if y <= c {
            times.push(y);
            events.push(true);
        } else {
            times.push(c);
            events.push(false);
        }
    }
    let sample = CensoredSample::from_parts_relaxed(
        times.clone(),
        events.clone(),
        vec![0.0; m],
        vec![Vec::new(); m],
        vec![vec![0.0]; m],
    )
    .unwrap();
    let ystar = leurgans_transform(&sample, &g_known).unwrap();
    let vals = ystar.values();
    let mean = vals.iter().sum::<f64>() / m as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let se = (var / m as f64).sqrt();
    let known_ok = mean.abs() < 3.0 * se;

    // Ĝ estimated from n = 10⁴ of the same draws
    let n = 10_000;
    let sub = CensoredSample::from_parts_relaxed(
        times[..n].to_vec(),
        events[..n].to_vec(),
        vec![0.0; n],
        vec![Vec::new(); n],
        vec![vec![0.0]; n],
    )
    .unwrap();
    let g_hat = km_censoring(&sub).unwrap();
    let ystar_hat = leurgans_transform(&sub, &g_hat).unwrap();
    let vals_hat = ystar_hat.values();
    let mean_hat = vals_hat.iter().sum::<f64>() / n as f64;
    let var_hat =
        vals_hat.iter().map(|v| (v - mean_hat).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let se_hat = (var_hat / n as f64).sqrt();
    let hat_ok = mean_hat.abs() < 4.0 * se_hat;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        2,
        "synthetic-outcome unbiasedness",
        known_ok && hat_ok && elapsed < 10.0,
        &format!(
            "known G: mean {mean:.4} (3·SE {:.4}); Ĝ: mean {mean_hat:.4} (4·SE {:.4}); {elapsed:.1}s",
            3.0 * se,
            4.0 * se_hat
        ),
    );
}

/// Standard normal CDF without pulling statrs into the oracle path.
fn statrs_cdf() -> impl Fn(f64) -> f64 {
    |t: f64| 0.5 * (1.0 + erf(t / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 rational approximation (|err| < 1.5e-7),
/// adequate for constructing the discretized censoring CDF.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

#[test]
fn criterion_03_hand_fixtures() {
    let s = CensoredSample::from_parts_relaxed(
        vec![1.0, 2.0, 3.0],
        vec![true, false, true],
        vec![0.0; 3],
        vec![Vec::new(); 3],
        vec![vec![0.1], vec![0.2], vec![0.3]],
    )
    .unwrap();
    let g = km_censoring(&s).unwrap();
    let g_ok = g.jump_times() == [2.0] && (g.cdf_values()[0] - 0.5).abs() < 1e-15;

    let ystar = leurgans_transform(&s, &g).unwrap();
    let y_ok = (ystar.values()[0] - 1.0).abs() < 1e-12
        && (ystar.values()[1] - 2.0).abs() < 1e-12
        && (ystar.values()[2] - 4.0).abs() < 1e-12;

    // Ψ̂*₂ⱼ from the production path versus an explicit quadruple loop
    let theta = ParameterVector {
        alpha0: 0.0,
        alpha1: vec![1.0],
        alpha2: vec![],
        beta0: 0.0,
        beta1: 1.0,
        beta2: vec![],
    };
    let w = WeightVector::unit(3);
    let contribs =
        ctsls::variance::score_contributions(&s, &theta, &g, &ystar, &w).unwrap();
    let brute = brute_force_psi2_star(&s, &theta, &g, &w);
    let star_gap = (contribs.psi2_star.clone() - brute).amax();

    report(
        3,
        "hand fixtures",
        g_ok && y_ok && star_gap < 1e-10,
        &format!(
            "Ĝ jumps {:?} values {:?}; Y* = {:?}; |Ψ* − brute| = {star_gap:.2e}",
            g.jump_times(),
            g.cdf_values(),
            ystar.values()
        ),
    );
}

/// Independent quadruple-loop evaluation of the correction term.
fn brute_force_psi2_star(
    sample: &CensoredSample,
    theta: &ParameterVector,
    g: &StepDistribution,
    weights: &WeightVector,
) -> DMatrix<f64> {
    let n = sample.n();
    let p = sample.p();
    let dim2 = 2 + p;
    let w = weights.as_slice();
    let mu_x = theta.mu_x(sample);
    let times: Vec<f64> = sample.subjects().iter().map(|s| s.log_time).collect();
    let integral_inv = |a: f64, b: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut pts = vec![a];
        for &t in g.jump_times() {
            if t > a && t < b {
                pts.push(t);
            }
        }
        pts.push(b);
        let mut acc = 0.0;
        for k in 0..pts.len() - 1 {
            acc += (pts[k + 1] - pts[k]) / (1.0 - g.value(pts[k])).max(1e-8);
        }
        acc
    };
    let mut cens: Vec<f64> = sample
        .subjects()
        .iter()
        .filter(|s| !s.event)
        .map(|s| s.log_time)
        .collect();
    cens.sort_by(f64::total_cmp);
    cens.dedup();
    let mut star = DMatrix::zeros(n, dim2);
    for &s in &cens {
        let at_risk = times.iter().filter(|&&t| t >= s).count() as f64;
        let d_n = sample
            .subjects()
            .iter()
            .filter(|sub| !sub.event && sub.log_time == s)
            .count() as f64;
        let mut h = DVector::zeros(dim2);
        for i in 0..n {
            if times[i] > s {
                let mut v = DVector::zeros(dim2);
                v[0] = 1.0;
                v[1] = mu_x[i];
                for j in 0..p {
                    v[2 + j] = sample.subjects()[i].confounders[j];
                }
                h += v * (w[i] * integral_inv(s, times[i]));
            }
        }
        h /= at_risk;
        for j in 0..n {
            let d_nj = if !sample.subjects()[j].event && times[j] == s {
                1.0
            } else {
                0.0
            };
            let y_j = if times[j] >= s { 1.0 } else { 0.0 };
            let incr = &h * (d_nj - y_j * d_n / at_risk);
            for c in 0..dim2 {
                star[(j, c)] += incr[c];
            }
        }
    }
    star
}

// ------------------------------------------------------------------
// Shared Monte Carlo grid for criteria 4–7
// ------------------------------------------------------------------

const GRID_R: usize = 500;
const GRID_SEED: u64 = 20_260_823;

struct GridResult {
    reports: Vec<McReport>,
    elapsed_s: f64,
}

fn cell(scenario: &ErrorScenario, n: usize, censor_rate: f64) -> SimConfig {
    SimConfig {
        n,
        censor_rate,
        scenario: scenario.clone(),
        true_params: TrueParams::default(),
        seed: GRID_SEED,
        calibration_pop: 100_000,
    }
}

fn shared_grid() -> &'static GridResult {
    static GRID: OnceLock<GridResult> = OnceLock::new();
    GRID.get_or_init(|| {
        let scenarios = [ErrorScenario::scenario_one(), ErrorScenario::scenario_two()];
        let mut grid = Vec::new();
        for scenario in &scenarios {
            for &n in &[500usize, 1000] {
                for &pc in &[0.0, 0.25, 0.5] {
                    grid.push(cell(scenario, n, pc));
                }
            }
        }
        let estimators = [
            EstimatorKind::CtslsWeighted,
            EstimatorKind::CtslsUnweighted,
            EstimatorKind::Cols,
        ];
        let start = Instant::now();
        let reports = run_grid(&grid, GRID_R, &estimators, &FitOptions::default()).unwrap();
        GridResult {
            reports,
            elapsed_s: start.elapsed().as_secs_f64(),
        }
    })
}

fn find_cell<'a>(reports: &'a [McReport], scenario: &str, n: usize, pc: f64) -> &'a McReport {
    reports
        .iter()
        .find(|r| r.scenario == scenario && r.n == n && r.censor_rate == pc)
        .expect("cell present")
}

#[test]
fn criterion_04_simulation_bias() {
    let grid = shared_grid();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut pass = true;
    for (scenario, tol) in [("scenario1", 0.03), ("scenario2", 0.05)] {
        let mut w = 0.0f64;
        for &pc in &[0.0, 0.25, 0.5] {
            let r = find_cell(&grid.reports, scenario, 1000, pc);
            let bias = r.estimators["ctsls_weighted"].mean_bias;
            w = w.max(bias.abs());
            pass &= bias.abs() <= tol;
        }
        worst.insert(scenario, w);
    }
    // the n=1000 bias cells are a subset of the shared grid; the grid as a
    // whole carries the runtime budget
    pass &= grid.elapsed_s < 600.0;
    report(
        4,
        "simulation bias",
        pass,
        &format!(
            "worst |bias|: scenario1 {:.4} (tol 0.03), scenario2 {:.4} (tol 0.05); grid {:.0}s",
            worst["scenario1"], worst["scenario2"], grid.elapsed_s
        ),
    );
}

#[test]
fn criterion_05_variance_consistency() {
    let grid = shared_grid();
    let mut pass = true;
    let mut detail = String::new();
    for scenario in ["scenario1", "scenario2"] {
        for &pc in &[0.0, 0.25, 0.5] {
            let r = find_cell(&grid.reports, scenario, 1000, pc);
            let m = &r.estimators["ctsls_weighted"];
            let rel = (m.mean_sandwich_var - m.empirical_var).abs() / m.empirical_var;
            pass &= rel <= 0.15;
            detail.push_str(&format!("{scenario}/π={pc}: {rel:.3}; "));
        }
    }
    // small-sample gap is reported, not asserted
    let small = run_grid(
        &[cell(&ErrorScenario::scenario_one(), 100, 0.25)],
        GRID_R,
        &[EstimatorKind::CtslsWeighted],
        &FitOptions::default(),
    )
    .unwrap();
    let m = &small[0].estimators["ctsls_weighted"];
    let small_rel = (m.mean_sandwich_var - m.empirical_var).abs() / m.empirical_var;
    report(
        5,
        "variance consistency",
        pass,
        &format!("n=1000 rel gaps: {detail}n=100 rel gap {small_rel:.3} (reported only)"),
    );
}

#[test]
fn criterion_06_coverage() {
    let grid = shared_grid();
    let mut pass = true;
    let mut worst_lo = 1.0f64;
    let mut worst_hi = 0.0f64;
    for scenario in ["scenario1", "scenario2"] {
        for &n in &[500usize, 1000] {
            for &pc in &[0.0, 0.25, 0.5] {
                let r = find_cell(&grid.reports, scenario, n, pc);
                let cov = r.estimators["ctsls_weighted"].coverage_95;
                worst_lo = worst_lo.min(cov);
                worst_hi = worst_hi.max(cov);
                pass &= (0.92..=0.98).contains(&cov);
            }
        }
    }
    report(
        6,
        "coverage",
        pass,
        &format!("coverage range over 12 cells: [{worst_lo:.3}, {worst_hi:.3}], band [0.92, 0.98]"),
    );
}

#[test]
fn criterion_07_comparator_separation() {
    let grid = shared_grid();
    let r = find_cell(&grid.reports, "scenario1", 1000, 0.25);
    let ctsls_bias = r.estimators["ctsls_weighted"].mean_bias.abs();
    let cols_bias = r.estimators["cols"].mean_bias.abs();
    let var_w = r.estimators["ctsls_weighted"].empirical_var;
    let var_u = r.estimators["ctsls_unweighted"].empirical_var;
    let pass = cols_bias >= ctsls_bias + 0.05 && var_w <= var_u;
    report(
        7,
        "comparator separation",
        pass,
        &format!(
            "|bias| cols {cols_bias:.4} vs ctsls {ctsls_bias:.4}; var weighted {var_w:.5} ≤ unweighted {var_u:.5}"
        ),
    );
}

#[test]
fn criterion_08_censoring_calibration() {
    let mut pass = true;
    let mut detail = String::new();
    for &target in &[0.25, 0.5, 0.75] {
        let config = cell(&ErrorScenario::scenario_one(), 100_000, target);
        let (sample, _) = generate_replicate(&config, 0).unwrap();
        let realized = sample.censoring_fraction();
        pass &= (realized - target).abs() <= 0.02;
        detail.push_str(&format!("π={target}: realized {realized:.4}; "));
    }
    report(8, "censoring calibration", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_09_determinism_across_thread_counts() {
    // wall-clock runtime rows are the one nondeterministic field; the
    // comparison filters them out of both report files
    let grid = vec![cell(&ErrorScenario::scenario_one(), 200, 0.25)];
    let estimators = [EstimatorKind::CtslsWeighted, EstimatorKind::Cols];
    let render = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let mut reports =
            pool.install(|| run_grid(&grid, 50, &estimators, &FitOptions::default()).unwrap());
        for r in &mut reports {
            for m in r.estimators.values_mut() {
                m.mean_runtime_s = 0.0;
            }
        }
        let mut csv_buf = Vec::new();
        let mut json_buf = Vec::new();
        summarize(&reports, &mut csv_buf, &mut json_buf).unwrap();
        let csv_text = String::from_utf8(csv_buf).unwrap();
        let filtered: String = csv_text
            .lines()
            .filter(|l| !l.contains(",mean_runtime_s,"))
            .collect::<Vec<_>>()
            .join("\n");
        (filtered, json_buf)
    };
    let (csv1, json1) = render(1);
    let (csv4, json4) = render(4);
    let pass = csv1 == csv4 && json1 == json4;
    report(
        9,
        "determinism across thread counts",
        pass,
        "report bytes identical for 1 vs 4 worker threads (runtime rows excluded)",
    );
}

#[test]
fn criterion_10_scale_check() {
    // n and covariate count matching the reference large-cohort fit
    let config = SimConfig {
        n: 18_761,
        censor_rate: 0.25,
        scenario: ErrorScenario::scenario_one(),
        true_params: TrueParams {
            alpha1: vec![0.5, 0.5],
            alpha2: vec![0.1; 12],
            beta1: 1.0,
            beta2: vec![0.1; 12],
        },
        seed: GRID_SEED,
        calibration_pop: 100_000,
    };
    let (sample, _) = generate_replicate(&config, 0).unwrap();
    let start = Instant::now();
    let fit = fit_ctsls(&sample, &FitOptions::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = elapsed < 60.0 && fit.beta1_variance() > 0.0;
    report(
        10,
        "scale check",
        pass,
        &format!(
            "n = {}, p = {}: fit incl. sandwich in {elapsed:.1}s (< 60s); β̂₁ = {:.3}",
            sample.n(),
            sample.p(),
            fit.beta1()
        ),
    );
}
