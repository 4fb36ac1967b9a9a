//! Empirical checks of the convergence theory: approximate-Hessian error,
//! eigenvalue bounds, subspace containment of random features, effective
//! dimension and local convergence ratios.
//!
//! Probabilistic statements are measured as frequencies over seeded trials
//! and reported with Wilson intervals. Every routine here materializes n × n
//! matrices and refuses `n` above [`DIAGNOSTIC_DENSE_CAP`].

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, streamed_feature_gram, GaussianKernel};
use crate::linalg::{deterministic_mode, outer_gram, symmetric_eigenvalues, Cholesky, DenseMatrix, Vector};
use crate::objective::Problem;
use crate::optimize::OptimizerTrace;
use crate::rng::{stream, Purpose};

/// Largest `n` for which diagnostics assemble dense matrices.
pub const DIAGNOSTIC_DENSE_CAP: usize = 1024;

/// Absolute slack on the smallest eigenvalue in the containment test.
pub const CONTAINMENT_SLACK: f64 = 1e-9;

/// Random pairs used for the Hessian-Lipschitz estimate.
pub const LIPSCHITZ_PAIRS: usize = 20;

/// Ratios stop once `‖w_{t−1} − w*‖` is at or below this.
pub const RATIO_FLOOR: f64 = 1e-14;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Measured and derived constants of the convergence analysis at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    /// `λ_min(H(w_ref))`.
    pub gamma_hat: f64,
    /// `λ_max(H(w_ref))`.
    pub l_hat: f64,
    pub kappa_hat: f64,
    /// Upper bound on the second derivative of the loss.
    pub lambda_1: f64,
    /// `Tr(K)·‖K‖·λ₁`, an upper bound on the unknown spectral constant.
    pub zeta_bar: f64,
    /// `4ζ̄/γ̂`.
    pub psi_bar: f64,
    /// Largest observed `‖H(w₁) − H(w₂)‖/‖w₁ − w₂‖` over random pairs. A
    /// lower bound on the Hessian-Lipschitz constant, never the constant.
    pub m_hat_lower: Option<f64>,
}

fn check_cap(n: usize) -> Result<()> {
    if n > DIAGNOSTIC_DENSE_CAP {
        return Err(Error::DenseCapExceeded {
            n,
            cap: DIAGNOSTIC_DENSE_CAP,
        });
    }
    Ok(())
}

/// `‖A‖₂` of a symmetric matrix from its full spectrum.
fn symmetric_norm(a: &DenseMatrix) -> f64 {
    let ev = symmetric_eigenvalues(a);
    ev.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// [`measure_constants_with`] using [`LIPSCHITZ_PAIRS`] pairs and seed 0.
pub fn measure_constants(problem: &Problem, w_ref: &Vector) -> Result<TheoryConstants> {
    measure_constants_with(problem, w_ref, LIPSCHITZ_PAIRS, 0)
}

/// Extremal eigenvalues of `H(w_ref)` come from a dense eigendecomposition.
/// With `pairs = 0` the Lipschitz estimate is skipped.
pub fn measure_constants_with(problem: &Problem, w_ref: &Vector, pairs: usize, seed: u64) -> Result<TheoryConstants> {
    check_cap(problem.n())?;
    let h = problem.hessian_dense(w_ref)?;
    let ev = symmetric_eigenvalues(&h);
    let n = ev.len();
    let (gamma_hat, l_hat) = (ev[0], ev[n - 1]);
    if !(gamma_hat > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "Hessian is not positive definite at the reference point (λ_min = {gamma_hat:e})"
        )));
    }
    let k = problem.gram();
    let k_norm = symmetric_norm(k);
    let lambda_1 = problem.loss().curvature_bound();
    let zeta_bar = k.trace() * k_norm * lambda_1;
    let m_hat_lower = if pairs == 0 {
        None
    } else {
        Some(lipschitz_lower_bound(problem, w_ref, pairs, seed)?)
    };
    Ok(TheoryConstants {
        gamma_hat,
        l_hat,
        kappa_hat: l_hat / gamma_hat,
        lambda_1,
        zeta_bar,
        psi_bar: 4.0 * zeta_bar / gamma_hat,
        m_hat_lower,
    })
}

/// Max of `‖H(w₁) − H(w₂)‖₂/‖w₁ − w₂‖` over pairs `w_ref + ξ/√n` with
/// standard-normal `ξ`, drawn from the probe stream.
pub fn lipschitz_lower_bound(problem: &Problem, w_ref: &Vector, pairs: usize, seed: u64) -> Result<f64> {
    check_cap(problem.n())?;
    let n = problem.n();
    let scale = 1.0 / (n as f64).sqrt();
    let mut best = 0.0f64;
    for pair in 0..pairs {
        let mut rng = stream(seed, Purpose::Probe, pair as u64);
        let mut draw = || {
            Vector::from_fn(n, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                w_ref[i] + scale * z
            })
        };
        let (w1, w2) = (draw(), draw());
        let step = (&w1 - &w2).norm();
        if step == 0.0 {
            continue;
        }
        let diff = problem.hessian_dense(&w1)? - problem.hessian_dense(&w2)?;
        best = best.max(symmetric_norm(&diff) / step);
    }
    Ok(best)
}

/// `c_loss·Ĝ D Ĝ + c_reg·Ĝ`: the Hessian with the gram matrix replaced by
/// `Ĝ`. With `Ĝ = ZZᵀ` this is the random-feature Hessian without the ridge.
pub fn hessian_with_gram(problem: &Problem, d: &Vector, g_hat: &DenseMatrix) -> Result<DenseMatrix> {
    let n = problem.n();
    if g_hat.shape() != (n, n) || d.len() != n {
        return Err(Error::DimensionMismatch {
            context: "approximate gram matrix",
            expected: n,
            found: g_hat.nrows(),
        });
    }
    let c_loss = problem.scaling().c_loss;
    let mut scaled = g_hat.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= (c_loss * d[j]).sqrt();
    }
    let mut h = outer_gram(&scaled);
    h.zip_apply(g_hat, |hij, gij| *hij += problem.scaling().c_reg * gij);
    Ok(h)
}

/// `‖Ĥ(w) − H(w)‖₂` and `‖Ĥ(w)‖₂` for the approximate gram matrix `g_hat`.
pub fn spectral_error_for_gram(problem: &Problem, w: &Vector, g_hat: &DenseMatrix) -> Result<(f64, f64)> {
    check_cap(problem.n())?;
    let d = problem.d_diagonal(w)?;
    let h = problem.hessian_from_d(&d)?;
    let h_hat = hessian_with_gram(problem, &d, g_hat)?;
    Ok((symmetric_norm(&(&h_hat - &h)), symmetric_norm(&h_hat)))
}

/// Spectral errors of the random-feature Hessian over independent trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTrialReport {
    pub m: usize,
    pub trials: usize,
    /// `‖Ĥ − H‖₂` per trial.
    pub errors: Vec<f64>,
    /// `errors / ‖H‖₂`.
    pub relative_errors: Vec<f64>,
    /// `‖Ĥ‖₂` per trial.
    pub approx_norms: Vec<f64>,
    /// `‖H‖₂`.
    pub exact_norm: f64,
}

impl SpectralTrialReport {
    /// Trials whose error is at most `threshold`.
    pub fn success_count(&self, threshold: f64) -> usize {
        self.errors.iter().filter(|&&e| e <= threshold).count()
    }

    pub fn median_error(&self) -> f64 {
        median(&self.errors)
    }

    pub fn median_relative_error(&self) -> f64 {
        median(&self.relative_errors)
    }

    /// Back-solved precision `error/(4ζ̄)` per trial.
    pub fn epsilon_hat(&self, zeta_bar: f64) -> Vec<f64> {
        self.errors.iter().map(|e| e / (4.0 * zeta_bar)).collect()
    }
}

/// Median of a non-empty slice; NaN for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn inputs_and_kernel(problem: &Problem) -> Result<(&DenseMatrix, &GaussianKernel)> {
    match (problem.inputs(), problem.kernel()) {
        (Some(x), Some(k)) => Ok((x, k)),
        _ => Err(Error::ArgumentOutOfRange(
            "random features need a problem built from inputs and a kernel".into(),
        )),
    }
}

/// For each trial, draws `m` fresh features from stream `(seed, Trial, t)`
/// and compares `Ĥ(w)` without the ridge against `H(w)`.
pub fn spectral_error_trials(
    problem: &Problem,
    w: &Vector,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<SpectralTrialReport> {
    check_cap(problem.n())?;
    let (x, kernel) = inputs_and_kernel(problem)?;
    let d = problem.d_diagonal(w)?;
    let h = problem.hessian_from_d(&d)?;
    let exact_norm = symmetric_norm(&h);
    let trial = |t: usize| -> Result<(f64, f64)> {
        let mut rng = stream(seed, Purpose::Trial, t as u64);
        let g_hat = streamed_feature_gram(x, kernel, m, &mut rng)?;
        let h_hat = hessian_with_gram(problem, &d, &g_hat)?;
        Ok((symmetric_norm(&(&h_hat - &h)), symmetric_norm(&h_hat)))
    };
    let results: Vec<(f64, f64)> = if deterministic_mode() {
        (0..trials).map(trial).collect::<Result<_>>()?
    } else {
        (0..trials).into_par_iter().map(trial).collect::<Result<_>>()?
    };
    let errors: Vec<f64> = results.iter().map(|r| r.0).collect();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteResult("spectral error"));
    }
    Ok(SpectralTrialReport {
        m,
        trials,
        relative_errors: errors.iter().map(|e| e / exact_norm).collect(),
        approx_norms: results.iter().map(|r| r.1).collect(),
        errors,
        exact_norm,
    })
}

/// Where `λ_max(Ĥ)` falls relative to `[(1−εΨ̄)γ̂, (1+εΨ̄)L̂]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichReport {
    pub passed: bool,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Checks `(1−εΨ̄)γ̂ ≤ ‖Ĥ‖₂ ≤ (1+εΨ̄)L̂` and reports the raw extremal
/// eigenvalues of `Ĥ` whatever the outcome.
pub fn eigenvalue_sandwich_check(h_hat: &DenseMatrix, constants: &TheoryConstants, epsilon: f64) -> SandwichReport {
    let ev = symmetric_eigenvalues(h_hat);
    let (lambda_min, lambda_max) = match ev.len() {
        0 => (0.0, 0.0),
        n => (ev[0], ev[n - 1]),
    };
    let slack = epsilon * constants.psi_bar;
    let lower = (1.0 - slack) * constants.gamma_hat;
    let upper = (1.0 + slack) * constants.l_hat;
    SandwichReport {
        passed: lower <= lambda_max && lambda_max <= upper,
        lambda_max,
        lambda_min,
        lower,
        upper,
    }
}

/// `tr(K (K + γI)⁻¹)` by a Cholesky solve against the columns of `K`.
pub fn effective_dimension(k: &DenseMatrix, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!("gamma = {gamma}")));
    }
    let n = k.nrows();
    let mut shifted = k.clone();
    for i in 0..n {
        shifted[(i, i)] += gamma;
    }
    let solved = Cholesky::new(&shifted)?.solve(k);
    Ok(solved.trace())
}

/// `Σᵢ λᵢ/(λᵢ + γ)` from the eigenvalues of `K`.
pub fn effective_dimension_from_eigenvalues(eigenvalues: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!("gamma = {gamma}")));
    }
    Ok(eigenvalues.iter().map(|&l| l / (l + gamma)).sum())
}

/// Feature count `⌈(8/3)·ε⁻²·(n/γ)·ln(16·S_γ/δ)⌉` sufficient for
/// ε-spectral containment with probability `1 − δ`. When `16·S_γ ≤ δ` the
/// formula is non-positive and one feature is returned.
pub fn rff_count_bound(n: usize, gamma: f64, epsilon: f64, delta: f64, s_gamma: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::ArgumentOutOfRange(format!(
            "epsilon = {epsilon} outside (0, 1/2]"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::ArgumentOutOfRange(format!("delta = {delta} outside (0, 1)")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!("gamma = {gamma}")));
    }
    if !(s_gamma > 0.0) || !s_gamma.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!("effective dimension = {s_gamma}")));
    }
    let raw = (8.0 / 3.0) / (epsilon * epsilon) * (n as f64 / gamma) * (16.0 * s_gamma / delta).ln();
    if !(raw < 9.007_199_254_740_992e15) {
        return Err(Error::ArgumentOutOfRange(format!(
            "feature bound {raw:e} is not representable"
        )));
    }
    Ok((raw.ceil() as usize).max(1))
}

/// Smallest eigenvalues of `(1+ε)(K+γI) − Ĝ − γI` and
/// `Ĝ + γI − (1−ε)(K+γI)`. Both non-negative means containment holds.
pub fn containment_margins(k: &DenseMatrix, g_hat: &DenseMatrix, gamma: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!("gamma = {gamma}")));
    }
    if k.shape() != g_hat.shape() || k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch {
            context: "containment matrices",
            expected: k.nrows(),
            found: g_hat.nrows(),
        });
    }
    check_cap(k.nrows())?;
    let n = k.nrows();
    let mut upper = k * (1.0 + epsilon) - g_hat;
    let mut lower = g_hat - k * (1.0 - epsilon);
    for i in 0..n {
        upper[(i, i)] += epsilon * gamma;
        lower[(i, i)] += epsilon * gamma;
    }
    let smallest = |a: &DenseMatrix| symmetric_eigenvalues(a).iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((smallest(&upper), smallest(&lower)))
}

/// `(1−ε)(K+γI) ⪯ ZZᵀ + γI ⪯ (1+ε)(K+γI)` up to [`CONTAINMENT_SLACK`].
pub fn epsilon_spectral_check(k: &DenseMatrix, z: &DenseMatrix, gamma: f64, epsilon: f64) -> Result<bool> {
    epsilon_spectral_check_gram(k, &outer_gram(z), gamma, epsilon)
}

/// [`epsilon_spectral_check`] given `Ĝ = ZZᵀ` directly.
pub fn epsilon_spectral_check_gram(k: &DenseMatrix, g_hat: &DenseMatrix, gamma: f64, epsilon: f64) -> Result<bool> {
    let (upper, lower) = containment_margins(k, g_hat, gamma, epsilon)?;
    Ok(upper >= -CONTAINMENT_SLACK && lower >= -CONTAINMENT_SLACK)
}

/// Outcome of repeated containment trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentReport {
    pub m: usize,
    pub trials: usize,
    pub passes: usize,
    /// 95% Wilson interval of the pass rate.
    pub wilson: (f64, f64),
    /// `(upper, lower)` margins per trial.
    pub margins: Vec<(f64, f64)>,
}

impl ContainmentReport {
    pub fn pass_rate(&self) -> f64 {
        self.passes as f64 / self.trials as f64
    }
}

/// Runs `trials` containment checks with `m` features each; trial `t` uses
/// stream `(seed, Trial, t)`. `Z` is never stored.
pub fn containment_trials(
    x: &DenseMatrix,
    kernel: &GaussianKernel,
    gamma: f64,
    epsilon: f64,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<ContainmentReport> {
    check_cap(x.nrows())?;
    let k = gram_matrix(x, kernel)?;
    let mut margins = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = stream(seed, Purpose::Trial, t as u64);
        let g_hat = streamed_feature_gram(x, kernel, m, &mut rng)?;
        margins.push(containment_margins(&k, &g_hat, gamma, epsilon)?);
    }
    let passes = margins
        .iter()
        .filter(|(u, l)| *u >= -CONTAINMENT_SLACK && *l >= -CONTAINMENT_SLACK)
        .count();
    Ok(ContainmentReport {
        m,
        trials,
        passes,
        wilson: wilson_interval(passes, trials, Z_95)?,
        margins,
    })
}

/// `‖w_t − w*‖/‖w_{t−1} − w*‖` for `t ≥ 1`, stopping before the first
/// denominator at or below [`RATIO_FLOOR`].
pub fn convergence_ratios(trace: &OptimizerTrace, w_star: &Vector) -> Result<Vec<f64>> {
    convergence_ratios_above(trace, w_star, RATIO_FLOOR)
}

/// [`convergence_ratios`] with a caller-chosen floor, for when `w*` itself is
/// only known to some accuracy.
pub fn convergence_ratios_above(trace: &OptimizerTrace, w_star: &Vector, floor: f64) -> Result<Vec<f64>> {
    let iterates = trace.iterates()?;
    let mut ratios = Vec::new();
    for pair in iterates.windows(2) {
        if pair[0].len() != w_star.len() {
            return Err(Error::DimensionMismatch {
                context: "reference solution",
                expected: pair[0].len(),
                found: w_star.len(),
            });
        }
        let denominator = (&pair[0] - w_star).norm();
        if denominator <= floor {
            break;
        }
        ratios.push((&pair[1] - w_star).norm() / denominator);
    }
    Ok(ratios)
}

/// Wilson score interval for `successes` out of `trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::ArgumentOutOfRange(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    if !(z > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!("quantile z = {z}")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denominator = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denominator;
    let half = z / denominator * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // The endpoints at p = 0 and p = 1 are exact; rounding would move them.
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    Ok((lo, hi))
}
