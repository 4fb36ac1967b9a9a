//! Newton-type optimizers over [`Problem`]: random-feature Newton, exact
//! Newton, sub-sampled Newton-CG and L-BFGS, all globalized by Armijo
//! backtracking.
//!
//! Every optimizer shares one driver loop. Record `t` of a trace describes the
//! iterate `w_t` (its loss and gradient norm) and the step taken from it; the
//! last record has no step.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{feature_matrix, nystrom_factors, sample_features_with};
use crate::linalg::{conjugate_gradient, Cholesky, DenseMatrix, Vector, DEFAULT_RANK_TOL};
use crate::objective::Problem;
use crate::rng::{stream, Purpose};

/// Ridge added to the exact Hessian when its Cholesky factorization fails.
pub const NEWTON_RIDGE: f64 = 1e-12;

/// L-BFGS skips a pair unless `sᵀy > LBFGS_CURVATURE_TOL · ‖s‖‖y‖`.
pub const LBFGS_CURVATURE_TOL: f64 = 1e-12;

const DECREMENT_STEP_MIN: f64 = 1e-8;
const DECREMENT_STEP_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Newton,
    Rfn,
    Ssncg,
    Lbfgs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Newton => "newton",
            Method::Rfn => "rfn",
            Method::Ssncg => "ssncg",
            Method::Lbfgs => "lbfgs",
        }
    }
}

/// How the first trial step of each line search is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepInit {
    #[default]
    Unit,
    /// Twice the previously accepted step; 1 on the first iteration.
    DoublePrevious,
    /// `1 / (−pᵀg)`, clamped to `[1e-8, 1e8]`.
    InverseNewtonDecrementSq,
}

/// Armijo backtracking: accept `α = α₀·shrinkᵏ` for the smallest `k` with
/// `F(w + αp) ≤ F(w) + α·sufficient_decrease·pᵀg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearchConfig {
    pub sufficient_decrease: f64,
    pub shrink: f64,
    pub init_policy: StepInit,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            sufficient_decrease: 0.3,
            shrink: 0.5,
            init_policy: StepInit::Unit,
            max_backtracks: 60,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.sufficient_decrease) || !open_unit(self.shrink) || self.max_backtracks == 0 {
            return Err(Error::ArgumentOutOfRange(format!("line search {self:?}")));
        }
        Ok(())
    }
}

pub fn initial_step(policy: StepInit, previous_alpha: Option<f64>, p: &Vector, g: &Vector) -> Result<f64> {
    match policy {
        StepInit::Unit => Ok(1.0),
        StepInit::DoublePrevious => Ok(previous_alpha.map_or(1.0, |a| 2.0 * a)),
        StepInit::InverseNewtonDecrementSq => {
            let slope = p.dot(g);
            if !(slope < 0.0) {
                return Err(Error::NotDescentDirection { slope });
            }
            Ok((1.0 / -slope).clamp(DECREMENT_STEP_MIN, DECREMENT_STEP_MAX))
        }
    }
}

/// Result of a successful line search. `point` is `w + alpha·p` exactly as
/// evaluated and `value` is `F(point)`.
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub backtracks: usize,
    pub point: Vector,
    pub value: f64,
}

/// Backtracks from `alpha_init` until the Armijo inequality holds with
/// `value < f_w`. The strict check only matters when `α·β·pᵀg` is below the
/// rounding unit of `f_w`, where the inequality alone would accept a step
/// that does not decrease `F`.
pub fn armijo_backtracking(
    mut f: impl FnMut(&Vector) -> Result<f64>,
    w: &Vector,
    f_w: f64,
    p: &Vector,
    g: &Vector,
    cfg: &LineSearchConfig,
    alpha_init: f64,
) -> Result<LineSearchOutcome> {
    let slope = p.dot(g);
    if !(slope < 0.0) {
        return Err(Error::NotDescentDirection { slope });
    }
    if !(alpha_init > 0.0) || !alpha_init.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!("initial step {alpha_init}")));
    }
    let mut alpha = alpha_init;
    for backtracks in 0..=cfg.max_backtracks {
        let point = w + p * alpha;
        // Non-finite trial values (overflow far along p) count as failures.
        let value = f(&point).unwrap_or(f64::INFINITY);
        if value <= f_w + alpha * cfg.sufficient_decrease * slope && value < f_w {
            return Ok(LineSearchOutcome {
                alpha,
                backtracks,
                point,
                value,
            });
        }
        alpha *= cfg.shrink;
    }
    Err(Error::MaxBacktracksExceeded {
        max: cfg.max_backtracks,
    })
}

/// A count given absolutely or as a fraction of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    Count(usize),
    Ratio(f64),
}

impl SampleSize {
    /// `Ratio(r)` resolves to `round(r·n)`, at least 1.
    pub fn resolve(self, n: usize) -> Result<usize> {
        let count = match self {
            SampleSize::Count(c) => c,
            SampleSize::Ratio(r) => {
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::ArgumentOutOfRange(format!("sample ratio {r}")));
                }
                ((r * n as f64).round() as usize).max(1)
            }
        };
        if count == 0 {
            return Err(Error::ArgumentOutOfRange("sample size must be positive".into()));
        }
        Ok(count)
    }
}

/// Geometric feature growth `m_t = ceil(m₀ · ρ^(−p·t))`, capped at `m_max`
/// (default `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchedule {
    pub rho: f64,
    #[serde(default = "default_exponent")]
    pub exponent: u32,
    #[serde(default)]
    pub m_max: Option<SampleSize>,
}

fn default_exponent() -> u32 {
    1
}

impl FeatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.exponent == 1 || self.exponent == 2) {
            return Err(Error::ArgumentOutOfRange(format!("feature schedule {self:?}")));
        }
        Ok(())
    }

    pub fn features_at(&self, m0: usize, t: usize, m_max: usize) -> usize {
        let growth = self.rho.powf(-(self.exponent as f64) * t as f64);
        let raw = m0 as f64 * growth;
        // Guard against `ceil` of values like 64.00000000000001.
        let m = (raw * (1.0 - 1e-12)).ceil();
        if m >= m_max as f64 {
            m_max
        } else {
            (m as usize).max(1)
        }
    }
}

/// Settings of one optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Label used in output files; defaults to the method name.
    pub label: Option<String>,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stop once `F(w_t) ≤ target_loss`.
    pub target_loss: Option<f64>,
    /// Random features `m` for RFN, subset size `|I|` for SSNCG.
    pub sample_size: SampleSize,
    pub mu: f64,
    pub lbfgs_memory: usize,
    pub cg_tolerance: f64,
    /// Defaults to `10·n`.
    pub cg_max_iter: Option<usize>,
    pub feature_schedule: Option<FeatureSchedule>,
    /// Multiply the SSN data term by `n/|I|`.
    pub ssn_rescale: bool,
    /// Force `α_t = 1` and skip the line search.
    pub unit_step: bool,
    pub record_iterates: bool,
    pub line_search: LineSearchConfig,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Rfn,
            label: None,
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            target_loss: None,
            sample_size: SampleSize::Ratio(0.1),
            mu: 1e-4,
            lbfgs_memory: 50,
            cg_tolerance: 1e-6,
            cg_max_iter: None,
            feature_schedule: None,
            ssn_rescale: true,
            unit_step: false,
            record_iterates: false,
            line_search: LineSearchConfig::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.line_search.validate()?;
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::ArgumentOutOfRange(format!(
                "gradient tolerance {}",
                self.gradient_tolerance
            )));
        }
        if matches!(self.method, Method::Rfn | Method::Ssncg) && !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::ArgumentOutOfRange(format!("mu = {}", self.mu)));
        }
        if self.method == Method::Lbfgs && self.lbfgs_memory == 0 {
            return Err(Error::ArgumentOutOfRange("lbfgs_memory must be positive".into()));
        }
        if !(self.cg_tolerance > 0.0) || self.cg_max_iter == Some(0) {
            return Err(Error::ArgumentOutOfRange(
                "cg tolerance and iteration cap must be positive".into(),
            ));
        }
        if let Some(schedule) = &self.feature_schedule {
            schedule.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GradientTolerance,
    TargetLoss,
    MaxIterations,
    /// The line search could not find a step that lowers `F` in floating
    /// point while `F(w + αp)` stayed within a few rounding units of `F(w)`.
    NumericalFloor,
}

/// One iterate and the step taken from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// 0 on the final record.
    pub step: f64,
    pub backtracks: usize,
    /// Features (RFN) or subset size (SSNCG); 0 otherwise.
    pub samples: usize,
    /// `p_tᵀ∇F(w_t)`; 0 on the final record.
    pub slope: f64,
    /// `F(w_t + α_t p_t)`, the loss of the next record.
    pub next_loss: Option<f64>,
    pub cg_iterations: Option<usize>,
    pub cg_residual: Option<f64>,
    pub ridge_retry: bool,
    pub direction_time_s: f64,
    pub linesearch_time_s: f64,
    pub cumulative_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerTrace {
    pub method: Method,
    pub records: Vec<IterationRecord>,
    pub final_w: Vector,
    pub termination: TerminationReason,
    /// `w_0, w_1, …` when requested in the config.
    pub iterates: Option<Vec<Vector>>,
    pub sufficient_decrease: f64,
    pub warnings: Vec<String>,
}

impl OptimizerTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.grad_norm)
    }

    /// Steps taken.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn iterates(&self) -> Result<&[Vector]> {
        self.iterates.as_deref().ok_or(Error::IteratesNotRecorded)
    }

    /// First record whose loss is at most `target`.
    pub fn first_reaching(&self, target: f64) -> Option<&IterationRecord> {
        self.records.iter().find(|r| r.loss <= target)
    }
}

/// A standard-normal start scaled by `scale`, from the initial-point stream.
pub fn random_start(n: usize, scale: f64, seed: u64) -> Vector {
    let mut rng = stream(seed, Purpose::InitialPoint, 0);
    Vector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// Per-iteration state handed to a direction rule.
struct Point<'a> {
    t: usize,
    w: &'a Vector,
    kw: &'a Vector,
    g: &'a Vector,
}

#[derive(Default)]
struct Direction {
    p: Vector,
    samples: usize,
    cg: Option<(usize, f64, bool)>,
    ridge_retry: bool,
}

fn run_with(
    problem: &Problem,
    w0: &Vector,
    cfg: &OptimizerConfig,
    mut direction: impl FnMut(&Point) -> Result<Direction>,
) -> Result<OptimizerTrace> {
    cfg.validate()?;
    if w0.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            context: "initial point",
            expected: problem.n(),
            found: w0.len(),
        });
    }
    let clock = Instant::now();
    let mut w = w0.clone();
    let mut kw = problem.margins(&w);
    let mut f = problem.objective_from_margins(&w, &kw);
    if !f.is_finite() {
        return Err(Error::NonFiniteResult("objective at the initial point"));
    }
    let mut g = problem.gradient_from_margins(&w, &kw)?;
    let mut pending_time = clock.elapsed().as_secs_f64();
    let mut records = Vec::new();
    let mut iterates = cfg.record_iterates.then(|| vec![w.clone()]);
    let mut warnings = Vec::new();
    let mut previous_alpha = None;
    let termination = loop {
        let t = records.len();
        let grad_norm = g.norm();
        let mut record = IterationRecord {
            iteration: t,
            loss: f,
            grad_norm,
            step: 0.0,
            backtracks: 0,
            samples: 0,
            slope: 0.0,
            next_loss: None,
            cg_iterations: None,
            cg_residual: None,
            ridge_retry: false,
            direction_time_s: pending_time,
            linesearch_time_s: 0.0,
            cumulative_time_s: 0.0,
        };
        let stop = if grad_norm <= cfg.gradient_tolerance {
            Some(TerminationReason::GradientTolerance)
        } else if cfg.target_loss.is_some_and(|target| f <= target) {
            Some(TerminationReason::TargetLoss)
        } else if t >= cfg.max_iterations {
            Some(TerminationReason::MaxIterations)
        } else {
            None
        };
        if let Some(reason) = stop {
            record.cumulative_time_s = clock.elapsed().as_secs_f64();
            records.push(record);
            break reason;
        }

        let started = Instant::now();
        let dir = direction(&Point {
            t,
            w: &w,
            kw: &kw,
            g: &g,
        })?;
        record.direction_time_s += started.elapsed().as_secs_f64();
        record.samples = dir.samples;
        record.ridge_retry = dir.ridge_retry;
        if let Some((iters, residual, converged)) = dir.cg {
            record.cg_iterations = Some(iters);
            record.cg_residual = Some(residual);
            if !converged {
                warnings.push(format!("iteration {t}: CG stopped at relative residual {residual:e}"));
            }
        }
        let slope = dir.p.dot(&g);
        record.slope = slope;
        if !(slope < 0.0) {
            return Err(Error::NotDescentDirection { slope });
        }

        let started = Instant::now();
        let step = if cfg.unit_step {
            let point = &w + &dir.p;
            let value = problem.objective_value(&point)?;
            Ok(LineSearchOutcome {
                alpha: 1.0,
                backtracks: 0,
                point,
                value,
            })
        } else {
            let alpha_init = initial_step(cfg.line_search.init_policy, previous_alpha, &dir.p, &g)?;
            armijo_backtracking(
                |v| problem.objective_value(v),
                &w,
                f,
                &dir.p,
                &g,
                &cfg.line_search,
                alpha_init,
            )
        };
        let step = match step {
            Ok(step) => step,
            Err(Error::MaxBacktracksExceeded { .. }) if at_rounding_floor(problem, &w, &dir.p, f)? => {
                record.linesearch_time_s = started.elapsed().as_secs_f64();
                record.slope = 0.0;
                record.cumulative_time_s = clock.elapsed().as_secs_f64();
                records.push(record);
                break TerminationReason::NumericalFloor;
            }
            Err(e) => return Err(e),
        };
        record.linesearch_time_s = started.elapsed().as_secs_f64();
        record.step = step.alpha;
        record.backtracks = step.backtracks;
        record.next_loss = Some(step.value);
        previous_alpha = Some(step.alpha);

        let started = Instant::now();
        w = step.point;
        f = step.value;
        kw = problem.margins(&w);
        g = problem.gradient_from_margins(&w, &kw)?;
        pending_time = started.elapsed().as_secs_f64();
        if let Some(list) = iterates.as_mut() {
            list.push(w.clone());
        }
        record.cumulative_time_s = clock.elapsed().as_secs_f64() - pending_time;
        records.push(record);
    };
    Ok(OptimizerTrace {
        method: cfg.method,
        records,
        final_w: w,
        termination,
        iterates,
        sufficient_decrease: cfg.line_search.sufficient_decrease,
        warnings,
    })
}

/// True when even tiny steps along `p` change `F` by no more than a few
/// rounding units, i.e. the line search failed for numerical reasons only.
fn at_rounding_floor(problem: &Problem, w: &Vector, p: &Vector, f: f64) -> Result<bool> {
    let floor = 16.0 * f64::EPSILON * f.abs().max(f64::MIN_POSITIVE);
    for alpha in [1.0, 1e-3, 1e-6] {
        let value = problem.objective_value(&(w + p * alpha)).unwrap_or(f64::INFINITY);
        if (value - f).abs() > floor {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `−H⁻¹g` for the exact Hessian at margins `kw`. Returns whether the ridge
/// retry was needed.
pub fn newton_direction(problem: &Problem, kw: &Vector, g: &Vector) -> Result<(Vector, bool)> {
    let d = problem.d_from_margins(kw)?;
    let h = problem.hessian_from_d(&d)?;
    match Cholesky::new_unchecked(h.clone()) {
        Ok(factor) => Ok((-factor.solve_vec(g), false)),
        Err(Error::NotPositiveDefinite { .. }) => {
            let mut ridged = h;
            for i in 0..ridged.nrows() {
                ridged[(i, i)] += NEWTON_RIDGE;
            }
            let factor = Cholesky::new_unchecked(ridged)?;
            log::warn!("exact Hessian not positive definite; retried with ridge {NEWTON_RIDGE:e}");
            Ok((-factor.solve_vec(g), true))
        }
        Err(e) => Err(e),
    }
}

/// `−Ĥ_μ⁻¹g` for the random-feature Hessian built from `z`.
pub fn rfn_direction(problem: &Problem, kw: &Vector, g: &Vector, z: &DenseMatrix, mu: f64) -> Result<Vector> {
    let d = problem.d_from_margins(kw)?;
    let h = problem.hessian_rfn_from_d(&d, z, mu)?;
    Ok(-h.solve(g))
}

pub fn newton_exact(problem: &Problem, w0: &Vector, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    problem.check_dense_cap()?;
    run_with(problem, w0, cfg, |pt| {
        let (p, ridge_retry) = newton_direction(problem, pt.kw, pt.g)?;
        Ok(Direction {
            p,
            ridge_retry,
            ..Direction::default()
        })
    })
}

/// Random-feature Newton: fresh features from stream `(seed, Features, t)`
/// at every iteration.
pub fn rfn(problem: &Problem, w0: &Vector, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    let (x, kernel) = match (problem.inputs(), problem.kernel()) {
        (Some(x), Some(k)) => (x, k),
        _ => return Err(Error::Config("random-feature Newton needs inputs and a kernel".into())),
    };
    let n = problem.n();
    let m0 = cfg.sample_size.resolve(n)?;
    let m_max = match cfg.feature_schedule.and_then(|s| s.m_max) {
        Some(size) => size.resolve(n)?,
        None => n,
    };
    run_with(problem, w0, cfg, |pt| {
        let m = match &cfg.feature_schedule {
            Some(schedule) => schedule.features_at(m0, pt.t, m_max),
            None => m0,
        };
        let mut rng = stream(cfg.seed, Purpose::Features, pt.t as u64);
        let bundle = sample_features_with(kernel, x.ncols(), m, &mut rng, cfg.seed)?;
        let z = feature_matrix(x, &bundle)?;
        let p = rfn_direction(problem, pt.kw, pt.g, &z, cfg.mu)?;
        Ok(Direction {
            p,
            samples: m,
            ..Direction::default()
        })
    })
}

/// Sub-sampled Newton with a Nyström regularizer, solved by CG. The subset
/// comes from stream `(seed, Subset, t)`.
pub fn ssncg(problem: &Problem, w0: &Vector, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    let n = problem.n();
    let size = cfg.sample_size.resolve(n)?;
    if size > n {
        return Err(Error::TooFewRows {
            requested: size,
            available: n,
        });
    }
    let cg_max_iter = cfg.cg_max_iter.unwrap_or(10 * n);
    run_with(problem, w0, cfg, |pt| {
        let mut rng = stream(cfg.seed, Purpose::Subset, pt.t as u64);
        let mut subset = index::sample(&mut rng, n, size).into_vec();
        subset.sort_unstable();
        let factors = nystrom_factors(problem.gram(), &subset, DEFAULT_RANK_TOL)?;
        let d = problem.d_from_margins(pt.kw)?;
        let h = problem.hessian_ssn_from_d(&d, &factors, cfg.mu, cfg.ssn_rescale)?;
        let report = conjugate_gradient(&h, &-pt.g, cfg.cg_tolerance, cg_max_iter)?;
        Ok(Direction {
            p: report.solution,
            samples: size,
            cg: Some((report.iterations, report.relative_residual, report.converged)),
            ridge_retry: false,
        })
    })
}

/// Limited-memory BFGS with the two-loop recursion.
pub fn lbfgs(problem: &Problem, w0: &Vector, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    let mut history: VecDeque<(Vector, Vector, f64)> = VecDeque::with_capacity(cfg.lbfgs_memory);
    let mut previous: Option<(Vector, Vector)> = None;
    run_with(problem, w0, cfg, |pt| {
        if let Some((w_prev, g_prev)) = previous.take() {
            let s = pt.w - w_prev;
            let y = pt.g - g_prev;
            let sy = s.dot(&y);
            if sy > LBFGS_CURVATURE_TOL * s.norm() * y.norm() {
                if history.len() == cfg.lbfgs_memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
        }
        previous = Some((pt.w.clone(), pt.g.clone()));
        Ok(Direction {
            p: -two_loop(&history, pt.g),
            ..Direction::default()
        })
    })
}

/// `H_k g` for the L-BFGS inverse-Hessian estimate held in `history`.
fn two_loop(history: &VecDeque<(Vector, Vector, f64)>, g: &Vector) -> Vector {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}

/// Dispatches on `cfg.method`.
pub fn run(problem: &Problem, w0: &Vector, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    match cfg.method {
        Method::Newton => newton_exact(problem, w0, cfg),
        Method::Rfn => rfn(problem, w0, cfg),
        Method::Ssncg => ssncg(problem, w0, cfg),
        Method::Lbfgs => lbfgs(problem, w0, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_two_gaussians;
    use crate::kernel::GaussianKernel;
    use crate::linalg::LinearOperator;
    use crate::objective::{Loss, ScalingPreset};

    fn logistic(n: usize, d: usize, seed: u64) -> Problem {
        let ds = synth_two_gaussians(n, d, 2.0, seed).unwrap();
        Problem::new(
            &ds,
            GaussianKernel::new(1.0).unwrap(),
            Loss::Logistic,
            1e-3,
            ScalingPreset::Experiment,
        )
        .unwrap()
    }

    fn assert_descent(trace: &OptimizerTrace) {
        for r in &trace.records[..trace.records.len() - 1] {
            let next = r.next_loss.unwrap();
            assert!(r.slope < 0.0);
            assert!(next <= r.loss + r.step * trace.sufficient_decrease * r.slope);
            assert!(next < r.loss, "iteration {}: {} -> {}", r.iteration, r.loss, next);
        }
        for pair in trace.records.windows(2) {
            assert_eq!(pair[0].next_loss, Some(pair[1].loss));
        }
    }

    #[test]
    fn initial_step_policies() {
        let g = Vector::from_vec(vec![2.0, 0.0]);
        let p = -&g;
        assert_eq!(initial_step(StepInit::Unit, Some(0.1), &p, &g).unwrap(), 1.0);
        assert_eq!(initial_step(StepInit::DoublePrevious, Some(0.25), &p, &g).unwrap(), 0.5);
        assert_eq!(initial_step(StepInit::DoublePrevious, None, &p, &g).unwrap(), 1.0);
        assert_eq!(
            initial_step(StepInit::InverseNewtonDecrementSq, None, &p, &g).unwrap(),
            0.25
        );
        assert!(matches!(
            initial_step(StepInit::InverseNewtonDecrementSq, None, &g, &g),
            Err(Error::NotDescentDirection { .. })
        ));
        let tiny = Vector::from_vec(vec![1e-6, 0.0]);
        assert_eq!(
            initial_step(StepInit::InverseNewtonDecrementSq, None, &-&tiny, &tiny).unwrap(),
            1e8
        );
    }

    fn half_square(v: &Vector) -> Result<f64> {
        Ok(0.5 * v.norm_squared())
    }

    #[test]
    fn armijo_on_quadratic() {
        let w = Vector::from_vec(vec![1.0, 0.0]);
        let g = w.clone();
        let p = -&w;
        let cfg = LineSearchConfig::default();
        let out = armijo_backtracking(half_square, &w, 0.5, &p, &g, &cfg, 1.0).unwrap();
        assert_eq!((out.alpha, out.backtracks), (1.0, 0));
        let strict = LineSearchConfig {
            sufficient_decrease: 0.6,
            ..cfg
        };
        let out = armijo_backtracking(half_square, &w, 0.5, &p, &g, &strict, 1.0).unwrap();
        assert_eq!((out.alpha, out.backtracks), (0.5, 1));
    }

    #[test]
    fn armijo_errors() {
        let w = Vector::from_vec(vec![1.0]);
        let cfg = LineSearchConfig {
            max_backtracks: 3,
            ..LineSearchConfig::default()
        };
        assert!(matches!(
            armijo_backtracking(half_square, &w, 0.5, &w, &w, &cfg, 1.0),
            Err(Error::NotDescentDirection { .. })
        ));
        // Claims a descent slope the objective does not honor.
        let lying = |_: &Vector| Ok(10.0);
        assert!(matches!(
            armijo_backtracking(lying, &w, 0.5, &-&w, &w, &cfg, 1.0),
            Err(Error::MaxBacktracksExceeded { max: 3 })
        ));
        assert!(LineSearchConfig { shrink: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn schedule_doubles() {
        let s = FeatureSchedule {
            rho: 0.5,
            exponent: 1,
            m_max: None,
        };
        let seq: Vec<usize> = (0..6).map(|t| s.features_at(32, t, 500)).collect();
        assert_eq!(seq, vec![32, 64, 128, 256, 500, 500]);
        let sq = FeatureSchedule { exponent: 2, ..s };
        assert_eq!(sq.features_at(10, 2, 10_000), 160);
        assert!(FeatureSchedule { rho: 1.0, ..s }.validate().is_err());
    }

    #[test]
    fn sample_size_resolution() {
        assert_eq!(SampleSize::Ratio(0.1).resolve(1000).unwrap(), 100);
        assert_eq!(SampleSize::Ratio(1e-6).resolve(10).unwrap(), 1);
        assert_eq!(SampleSize::Count(7).resolve(3).unwrap(), 7);
        assert!(SampleSize::Count(0).resolve(3).is_err());
        assert!(SampleSize::Ratio(-0.5).resolve(3).is_err());
    }

    #[test]
    fn newton_on_quadratic_takes_one_unit_step() {
        let ds = synth_two_gaussians(20, 3, 2.0, 1).unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.5).unwrap(),
            Loss::Quadratic,
            0.1,
            ScalingPreset::Theory,
        )
        .unwrap();
        let trace = newton_exact(
            &p,
            &Vector::from_element(20, 3.0),
            &OptimizerConfig::for_method(Method::Newton),
        )
        .unwrap();
        assert_eq!(trace.iterations(), 1);
        assert_eq!(trace.records[0].step, 1.0);
        assert_eq!(trace.termination, TerminationReason::GradientTolerance);
    }

    #[test]
    fn newton_converges_and_stops_at_optimum() {
        let p = logistic(200, 3, 2);
        let cfg = OptimizerConfig {
            gradient_tolerance: 1e-10,
            ..OptimizerConfig::for_method(Method::Newton)
        };
        let trace = newton_exact(&p, &Vector::zeros(200), &cfg).unwrap();
        assert_eq!(trace.termination, TerminationReason::GradientTolerance);
        assert!(trace.iterations() <= 25 && trace.final_grad_norm() <= 1e-10);
        assert_descent(&trace);
        let again = newton_exact(&p, &trace.final_w, &cfg).unwrap();
        assert_eq!(again.iterations(), 0);
        assert!(newton_exact(&p.clone().with_dense_cap(10), &Vector::zeros(200), &cfg).is_err());
    }

    #[test]
    fn rfn_with_exact_factor_matches_newton_direction() {
        let ds = synth_two_gaussians(40, 3, 2.0, 3).unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.5).unwrap(),
            Loss::Logistic,
            1e-2,
            ScalingPreset::Experiment,
        )
        .unwrap();
        let w = random_start(40, 0.5, 3);
        let kw = p.margins(&w);
        let g = p.gradient(&w).unwrap();
        let z = Cholesky::new(p.gram()).unwrap().l().clone();
        let approx = rfn_direction(&p, &kw, &g, &z, 1e-12).unwrap();
        let (exact, _) = newton_direction(&p, &kw, &g).unwrap();
        assert!((&approx - &exact).norm() / exact.norm() <= 1e-4);
    }

    #[test]
    fn rfn_descends_over_many_seeds() {
        let p = logistic(500, 3, 4);
        for seed in 0..40 {
            let cfg = OptimizerConfig {
                sample_size: SampleSize::Count(50),
                max_iterations: 15,
                line_search: LineSearchConfig {
                    init_policy: StepInit::DoublePrevious,
                    ..LineSearchConfig::default()
                },
                seed,
                ..OptimizerConfig::for_method(Method::Rfn)
            };
            let trace = rfn(&p, &random_start(500, 0.1, seed), &cfg).unwrap();
            assert!(trace.records.iter().all(|r| r.samples == 50 || r.next_loss.is_none()));
            assert_descent(&trace);
        }
    }

    #[test]
    fn rfn_schedule_and_determinism() {
        let p = logistic(100, 3, 5);
        let cfg = OptimizerConfig {
            sample_size: SampleSize::Count(10),
            feature_schedule: Some(FeatureSchedule {
                rho: 0.5,
                exponent: 1,
                m_max: None,
            }),
            max_iterations: 6,
            gradient_tolerance: 0.0,
            record_iterates: true,
            ..OptimizerConfig::for_method(Method::Rfn)
        };
        let a = rfn(&p, &Vector::zeros(100), &cfg).unwrap();
        let m: Vec<usize> = a.records.iter().take(5).map(|r| r.samples).collect();
        assert_eq!(m, vec![10, 20, 40, 80, 100]);
        let b = rfn(&p, &Vector::zeros(100), &cfg).unwrap();
        assert_eq!(a.iterates().unwrap(), b.iterates().unwrap());
        assert_eq!(a.iterates().unwrap().len(), a.records.len());
    }

    #[test]
    fn rfn_needs_inputs() {
        let p = logistic(10, 2, 6);
        let bare = Problem::from_gram(p.gram().clone(), p.labels().clone(), Loss::Logistic, 1e-3, p.scaling()).unwrap();
        assert!(matches!(
            rfn(&bare, &Vector::zeros(10), &OptimizerConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ssncg_full_subset_recovers_newton() {
        let ds = synth_two_gaussians(40, 3, 2.0, 7).unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.5).unwrap(),
            Loss::Logistic,
            1e-2,
            ScalingPreset::Experiment,
        )
        .unwrap();
        let cfg = OptimizerConfig {
            sample_size: SampleSize::Ratio(1.0),
            ssn_rescale: false,
            mu: 1e-12,
            cg_tolerance: 1e-12,
            max_iterations: 1,
            ..OptimizerConfig::for_method(Method::Ssncg)
        };
        let w = random_start(40, 0.5, 7);
        let trace = ssncg(&p, &w, &cfg).unwrap();
        let newton = newton_exact(
            &p,
            &w,
            &OptimizerConfig {
                max_iterations: 1,
                ..OptimizerConfig::for_method(Method::Newton)
            },
        )
        .unwrap();
        let step_ssn = &trace.final_w - &w;
        let step_newton = &newton.final_w - &w;
        assert!((&step_ssn - &step_newton).norm() / step_newton.norm() <= 1e-4);
    }

    #[test]
    fn ssncg_meets_cg_contract_and_descends() {
        let p = logistic(300, 3, 8);
        let cfg = OptimizerConfig {
            max_iterations: 20,
            ..OptimizerConfig::for_method(Method::Ssncg)
        };
        let trace = ssncg(&p, &random_start(300, 0.1, 8), &cfg).unwrap();
        for r in &trace.records[..trace.records.len() - 1] {
            assert!(r.cg_residual.unwrap() <= 1e-6);
            assert_eq!(r.samples, 30);
        }
        assert_descent(&trace);
    }

    #[test]
    fn lbfgs_first_direction_is_steepest_descent() {
        let p = logistic(50, 2, 9);
        let cfg = OptimizerConfig {
            max_iterations: 1,
            ..OptimizerConfig::for_method(Method::Lbfgs)
        };
        let trace = lbfgs(&p, &Vector::zeros(50), &cfg).unwrap();
        let g = p.gradient(&Vector::zeros(50)).unwrap();
        let r = &trace.records[0];
        assert!((r.slope + g.norm_squared()).abs() <= 1e-14 * g.norm_squared());
        let expected = -&g * r.step;
        assert!((&trace.final_w - expected).norm() <= 1e-15 * g.norm().max(1.0));
    }

    #[test]
    fn lbfgs_two_loop_with_exact_line_search_solves_quadratic() {
        let n = 5;
        let b = DenseMatrix::from_fn(n, n, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 4.0 } else { 0.0 }
        });
        let a = b.tr_mul(&b);
        let rhs = Vector::from_fn(n, |i, _| i as f64 + 1.0);
        let mut w = Vector::zeros(n);
        let mut history = VecDeque::new();
        let mut iterations = 0;
        let mut g = &a * &w - &rhs;
        while g.norm() > 1e-10 * rhs.norm() {
            let p = -two_loop(&history, &g);
            let alpha = -g.dot(&p) / p.dot(&(&a * &p));
            let s = &p * alpha;
            w += &s;
            let g_new = &a * &w - &rhs;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            history.push_back((s, y, 1.0 / sy));
            g = g_new;
            iterations += 1;
            assert!(iterations <= n + 1, "no convergence after {iterations} steps");
        }
    }

    #[test]
    fn lbfgs_agrees_with_newton() {
        let ds = synth_two_gaussians(200, 3, 2.0, 10).unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.5).unwrap(),
            Loss::Logistic,
            1e-2,
            ScalingPreset::Experiment,
        )
        .unwrap();
        let newton = newton_exact(
            &p,
            &Vector::zeros(200),
            &OptimizerConfig {
                gradient_tolerance: 1e-12,
                ..OptimizerConfig::for_method(Method::Newton)
            },
        )
        .unwrap();
        let cfg = OptimizerConfig {
            gradient_tolerance: 1e-6,
            max_iterations: 5000,
            ..OptimizerConfig::for_method(Method::Lbfgs)
        };
        let trace = lbfgs(&p, &Vector::zeros(200), &cfg).unwrap();
        assert_eq!(trace.termination, TerminationReason::GradientTolerance);
        let gap = (trace.final_loss() - newton.final_loss()).abs();
        assert!(gap <= 1e-8, "gap {gap:e} after {} iterations", trace.iterations());
        assert_descent(&trace);
    }

    #[test]
    fn unit_step_and_target_loss() {
        let p = logistic(60, 2, 11);
        let cfg = OptimizerConfig {
            unit_step: true,
            target_loss: Some(0.3),
            ..OptimizerConfig::for_method(Method::Newton)
        };
        let trace = newton_exact(&p, &Vector::zeros(60), &cfg).unwrap();
        assert!(trace.records.iter().all(|r| r.step == 1.0 || r.next_loss.is_none()));
        if trace.termination == TerminationReason::TargetLoss {
            assert!(trace.final_loss() <= 0.3);
        }
        let bad = OptimizerConfig {
            mu: 0.0,
            ..OptimizerConfig::for_method(Method::Rfn)
        };
        assert!(rfn(&p, &Vector::zeros(60), &bad).is_err());
    }

    #[test]
    fn dispatch_and_operator_dims() {
        let p = logistic(20, 2, 12);
        for method in [Method::Newton, Method::Rfn, Method::Ssncg, Method::Lbfgs] {
            let cfg = OptimizerConfig {
                max_iterations: 3,
                ..OptimizerConfig::for_method(method)
            };
            let trace = run(&p, &Vector::zeros(20), &cfg).unwrap();
            assert_eq!(trace.method, method);
            assert_eq!(cfg.label(), method.name());
        }
        assert_eq!(p.gram().dim(), 20);
    }
}
