//! The `train`, `bench` and `diag` commands.
//!
//! Every command computes all of its results before touching the output
//! directory, so a failing run leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{RunConfig, Sweep};
use super::table::{num, opt, Table};
use crate::diagnostics::{containment_trials, effective_dimension, rff_count_bound, spectral_error_trials};
use crate::error::{Error, Result};
use crate::linalg::deterministic_mode;
use crate::objective::Problem;
use crate::optimize::{random_start, run, OptimizerConfig, OptimizerTrace, SampleSize};

/// Columns of per-run trace files.
pub const TRACE_COLUMNS: [&str; 11] = [
    "iter",
    "loss",
    "grad_norm",
    "step",
    "backtracks",
    "m_or_samples",
    "direction_time_s",
    "linesearch_time_s",
    "cumulative_time_s",
    "cg_iterations",
    "cg_residual",
];

/// Columns of the bench aggregate file.
pub const AGGREGATE_COLUMNS: [&str; 7] = [
    "method",
    "iter",
    "loss_mean",
    "loss_se",
    "time_mean_s",
    "time_se_s",
    "repeats",
];

/// Threads for independent runs. Deterministic mode always uses one.
pub fn effective_jobs(requested: Option<usize>) -> usize {
    if deterministic_mode() {
        if requested.is_some_and(|j| j > 1) {
            log::info!("deterministic mode: ignoring --jobs and running sequentially");
        }
        1
    } else {
        requested.unwrap_or(1).max(1)
    }
}

/// Maps `f` over `items` on at most `jobs` threads, preserving order.
fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// One run of `method` from the Gaussian start of `seed`.
pub fn run_seeded(problem: &Problem, cfg: &RunConfig, method: &OptimizerConfig, seed: u64) -> Result<OptimizerTrace> {
    let w0 = random_start(problem.n(), cfg.init_scale, seed);
    let mut m = method.clone();
    m.seed = seed;
    m.record_iterates |= cfg.record_iterates;
    run(problem, &w0, &m).map_err(|e| Error::Config(format!("method {} with seed {seed} failed: {e}", m.label())))
}

pub fn trace_table(trace: &OptimizerTrace) -> Table {
    let mut t = Table::new("trace", &TRACE_COLUMNS);
    for r in &trace.records {
        t.push(vec![
            r.iteration.to_string(),
            num(r.loss),
            num(r.grad_norm),
            num(r.step),
            r.backtracks.to_string(),
            r.samples.to_string(),
            num(r.direction_time_s),
            num(r.linesearch_time_s),
            num(r.cumulative_time_s),
            opt(r.cg_iterations),
            r.cg_residual.map_or_else(String::new, num),
        ]);
    }
    t
}

fn iterates_table(trace: &OptimizerTrace) -> Result<Table> {
    let mut t = Table::new("iterates", &["iter", "index", "value"]);
    for (k, w) in trace.iterates()?.iter().enumerate() {
        for (i, v) in w.iter().enumerate() {
            t.push(vec![k.to_string(), i.to_string(), num(*v)]);
        }
    }
    Ok(t)
}

fn write_all(out: &Path, tables: &[(String, Table)]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(tables.len());
    for (name, table) in tables {
        let path = out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        table.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// One run per configured method with seed `seed_base`; writes
/// `train_<label>.csv` (and `iterates_<label>.csv` when iterates are recorded).
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let problem = cfg.problem()?;
    let mut tables = Vec::new();
    for method in &cfg.methods {
        let trace = run_seeded(&problem, cfg, method, cfg.seed_base)?;
        log::info!(
            "{}: {} iterations, final loss {:e}, {:?}",
            method.label(),
            trace.iterations(),
            trace.final_loss(),
            trace.termination
        );
        tables.push((format!("train_{}.csv", method.label()), trace_table(&trace)));
        if trace.iterates.is_some() {
            tables.push((format!("iterates_{}.csv", method.label()), iterates_table(&trace)?));
        }
    }
    write_all(out, &tables)
}

/// Mean and standard error of one (method, iteration) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchAggregate {
    pub method: String,
    pub iter: usize,
    pub loss_mean: f64,
    pub loss_se: f64,
    pub time_mean_s: f64,
    pub time_se_s: f64,
    pub repeats: usize,
}

/// Mean and `sd/√n` with the sample standard deviation. Values are shifted
/// by the first one before summing, so identical inputs give exactly zero.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let shift = values[0];
    let mean_shift = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    if n == 1 {
        return (shift + mean_shift, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - shift - mean_shift).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    (shift + mean_shift, sd / (n as f64).sqrt())
}

/// Aggregates runs of one method over the iterations every run reached.
pub fn aggregate(label: &str, traces: &[OptimizerTrace]) -> Vec<BenchAggregate> {
    let common = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    (0..common)
        .map(|it| {
            let losses: Vec<f64> = traces.iter().map(|t| t.records[it].loss).collect();
            let times: Vec<f64> = traces.iter().map(|t| t.records[it].cumulative_time_s).collect();
            let (loss_mean, loss_se) = mean_and_se(&losses);
            let (time_mean_s, time_se_s) = mean_and_se(&times);
            BenchAggregate {
                method: label.to_string(),
                iter: it,
                loss_mean,
                loss_se,
                time_mean_s,
                time_se_s,
                repeats: traces.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub aggregate: Vec<BenchAggregate>,
    pub aggregate_path: PathBuf,
    pub run_paths: Vec<PathBuf>,
}

/// `repeats` runs of every method with seeds `seed_base + i`. Writes
/// `runs/<label>_seed<seed>.csv` per run and `bench_aggregate.csv`.
pub fn cmd_bench(cfg: &RunConfig, out: &Path, jobs: Option<usize>) -> Result<BenchOutput> {
    if cfg.repeats < 2 {
        return Err(Error::Config("bench needs repeats ≥ 2 for standard errors".into()));
    }
    let problem = cfg.problem()?;
    let work: Vec<(usize, u64)> = (0..cfg.methods.len())
        .flat_map(|m| (0..cfg.repeats as u64).map(move |i| (m, cfg.seed_base + i)))
        .collect();
    let traces = par_map(effective_jobs(jobs), &work, |&(m, seed)| {
        run_seeded(&problem, cfg, &cfg.methods[m], seed)
    })?;

    let mut tables = Vec::new();
    let mut rows = Vec::new();
    for (m, method) in cfg.methods.iter().enumerate() {
        let label = method.label();
        let runs: Vec<OptimizerTrace> = work
            .iter()
            .zip(&traces)
            .filter(|((mi, _), _)| *mi == m)
            .map(|((_, seed), trace)| {
                tables.push((format!("runs/{label}_seed{seed}.csv"), trace_table(trace)));
                trace.clone()
            })
            .collect();
        rows.extend(aggregate(&label, &runs));
    }
    let mut agg = Table::new("bench-aggregate", &AGGREGATE_COLUMNS);
    for r in &rows {
        agg.push(vec![
            r.method.clone(),
            r.iter.to_string(),
            num(r.loss_mean),
            num(r.loss_se),
            num(r.time_mean_s),
            num(r.time_se_s),
            r.repeats.to_string(),
        ]);
    }
    let run_paths = write_all(out, &tables)?;
    let aggregate_path = write_all(out, &[("bench_aggregate.csv".to_string(), agg)])?.remove(0);
    Ok(BenchOutput {
        aggregate: rows,
        aggregate_path,
        run_paths,
    })
}

/// Mean loss per iteration over runs; a run that stopped early contributes
/// its final loss to later iterations.
pub fn mean_loss_curve(traces: &[OptimizerTrace], iterations: usize) -> Vec<f64> {
    (0..=iterations)
        .map(|it| {
            let sum: f64 = traces.iter().map(|t| t.records[it.min(t.records.len() - 1)].loss).sum();
            sum / traces.len() as f64
        })
        .collect()
}

/// RFN runs `0..runs` for one sweep setting.
fn rfn_runs(problem: &Problem, cfg: &RunConfig, method: &OptimizerConfig, jobs: usize) -> Result<Vec<OptimizerTrace>> {
    let seeds: Vec<u64> = (0..cfg.diag.runs as u64).map(|i| cfg.seed_base + i).collect();
    par_map(jobs, &seeds, |&seed| run_seeded(problem, cfg, method, seed))
}

fn curve_table(kind: &'static str, rows: &[(f64, Vec<f64>)]) -> Table {
    let mut t = Table::new(kind, &["sweep_value", "iter", "mean_loss"]);
    for (value, curve) in rows {
        for (it, loss) in curve.iter().enumerate() {
            t.push(vec![num(*value), it.to_string(), num(*loss)]);
        }
    }
    t
}

/// Runs the configured sweeps and writes one CSV per sweep:
/// `diag_mu.csv`, `diag_ratio.csv`, `diag_spectral.csv`, `diag_containment.csv`.
pub fn cmd_diag(cfg: &RunConfig, out: &Path, jobs: Option<usize>) -> Result<Vec<PathBuf>> {
    let jobs = effective_jobs(jobs);
    let problem = cfg.problem()?;
    let diag = &cfg.diag;
    if diag.runs == 0 {
        return Err(Error::Config("diag.runs must be positive".into()));
    }
    let base = cfg.rfn_method();
    let mut tables = Vec::new();
    for sweep in &diag.sweeps {
        match sweep {
            Sweep::Mu => {
                let mut rows = Vec::new();
                for &mu in &diag.mu_grid {
                    let method = OptimizerConfig {
                        mu,
                        max_iterations: diag.mu_iterations,
                        gradient_tolerance: 0.0,
                        ..base.clone()
                    };
                    let traces = rfn_runs(&problem, cfg, &method, jobs)?;
                    rows.push((mu, mean_loss_curve(&traces, diag.mu_iterations)));
                }
                tables.push(("diag_mu.csv".to_string(), curve_table("diag-mu", &rows)));
            }
            Sweep::Ratio => {
                let mut rows = Vec::new();
                for &ratio in &diag.ratio_grid {
                    let method = OptimizerConfig {
                        mu: diag.ratio_mu,
                        sample_size: SampleSize::Ratio(ratio),
                        max_iterations: diag.ratio_iterations,
                        ..base.clone()
                    };
                    let traces = rfn_runs(&problem, cfg, &method, jobs)?;
                    rows.push((ratio, mean_loss_curve(&traces, diag.ratio_iterations)));
                }
                tables.push(("diag_ratio.csv".to_string(), curve_table("diag-ratio", &rows)));
            }
            Sweep::Spectral => {
                let w = random_start(problem.n(), cfg.init_scale, cfg.seed_base);
                let mut t = Table::new("diag-spectral", &["m", "trial", "spectral_error", "relative_error"]);
                for &m in &diag.spectral_m_grid {
                    let report = spectral_error_trials(&problem, &w, m, diag.spectral_trials, cfg.seed_base)?;
                    log::info!(
                        "spectral sweep m = {m}: median relative error {:e}",
                        report.median_relative_error()
                    );
                    for (trial, (e, r)) in report.errors.iter().zip(&report.relative_errors).enumerate() {
                        t.push(vec![m.to_string(), trial.to_string(), num(*e), num(*r)]);
                    }
                }
                tables.push(("diag_spectral.csv".to_string(), t));
            }
            Sweep::Containment => {
                let c = &diag.containment;
                let (x, kernel) = match (problem.inputs(), problem.kernel()) {
                    (Some(x), Some(k)) => (x, k),
                    _ => return Err(Error::Config("containment sweep needs inputs and a kernel".into())),
                };
                let grid = match &c.m_grid {
                    Some(grid) => grid.clone(),
                    None => {
                        let s = effective_dimension(problem.gram(), c.gamma)?;
                        vec![rff_count_bound(problem.n(), c.gamma, c.epsilon, c.delta, s)?]
                    }
                };
                let mut t = Table::new("diag-containment", &["m", "pass_rate", "wilson_lo", "wilson_hi"]);
                for m in grid {
                    let r = containment_trials(x, kernel, c.gamma, c.epsilon, m, c.trials, cfg.seed_base)?;
                    t.push(vec![
                        m.to_string(),
                        num(r.pass_rate()),
                        num(r.wilson.0),
                        num(r.wilson.1),
                    ]);
                }
                tables.push(("diag_containment.csv".to_string(), t));
            }
        }
    }
    write_all(out, &tables)
}
