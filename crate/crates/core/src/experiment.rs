//! Ensemble execution, artifact emission, bound reports and mixing
//! diagnostics behind the command-line front end.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{validate_trace, BoundKind, BoundSpec, ValidationReport};
use crate::config::{Backend, Emit, RunConfig};
use crate::error::{Error, Result};
use crate::mixing::{
    contraction_lambda, enumerate_second_moment_async, enumerate_second_moment_pull,
    expected_second_moment_async, expected_second_moment_pull, max_abs_diff, symmetric_eigenvalues,
    LambdaVariant, ASYNC_ENUMERATION_MAX_P, PULL_ENUMERATION_MAX_P,
};
use crate::objectives::{GradientOracle, Objective};
use crate::protocols::ProtocolKind;
use crate::simulator::{self, SimRun, TraceRecord};
use crate::transport::run_transport;

/// Stable process exit contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    ValidationFailure,
    ConfigError,
    RuntimeError,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::ValidationFailure => 1,
            ExitStatus::ConfigError => 2,
            ExitStatus::RuntimeError => 3,
        }
    }
}

/// An error tagged with the exit status it maps to.
#[derive(Debug)]
pub struct ExperimentError {
    pub status: ExitStatus,
    pub source: Error,
}

impl std::fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.source)
    }
}

impl std::error::Error for ExperimentError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn config_failure(source: Error) -> ExperimentError {
    ExperimentError {
        status: ExitStatus::ConfigError,
        source,
    }
}

fn runtime_failure(source: Error) -> ExperimentError {
    ExperimentError {
        status: ExitStatus::RuntimeError,
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub run_id: String,
    pub steps_done: u64,
    pub sim_time: f64,
    pub final_sq_err_opt: f64,
    pub final_sq_err_consensus: f64,
    pub final_loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: ProtocolKind,
    pub backend: Backend,
    pub seed: u64,
    pub trials: usize,
    pub wall_time_s: f64,
    pub mean_final_sq_err_opt: f64,
    pub mean_final_sq_err_consensus: f64,
    pub mean_sim_time: f64,
    pub runs: Vec<TrialSummary>,
    /// Set when a bound report was produced.
    pub bound_pass: Option<bool>,
    /// Complete TOML echo of the configuration.
    pub config: String,
}

/// Every theorem check that applies to one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub protocol: ProtocolKind,
    pub m: f64,
    pub l: f64,
    pub sigma_sq: f64,
    pub alpha: f64,
    /// Variant whose consensus check decides `pass`.
    pub verdict_variant: LambdaVariant,
    pub checks: Vec<ValidationReport>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub traces: Vec<Vec<TraceRecord>>,
    pub bound_report: Option<BoundReport>,
    /// Files written, in creation order.
    pub written: Vec<PathBuf>,
    pub status: ExitStatus,
}

/// `run_id` of trial `k`.
pub fn trial_run_id(k: usize) -> String {
    format!("trial-{k:04}")
}

/// Checks the theorem preconditions a bound report relies on.
pub fn bound_preflight(cfg: &RunConfig, obj: &Objective) -> Result<()> {
    let h = &cfg.hyper;
    match cfg.run.protocol {
        ProtocolKind::PullGossip | ProtocolKind::AsyncPull => {}
        other => {
            return Err(Error::config(format!(
                "no closed-form bound covers {other}; bound reports need pull-gossip or async-pull"
            )))
        }
    }
    if h.mu != 0.0 || h.weight_decay != 0.0 {
        return Err(Error::config("bound reports need plain SGD: set mu = 0 and weight_decay = 0"));
    }
    if h.tau != 1 {
        return Err(Error::config("bound reports need tau = 1"));
    }
    if h.anneal_factor != 1.0 && h.anneal_at.iter().any(|&a| a <= cfg.run.steps) {
        return Err(Error::config("bound reports need a constant step size over the horizon"));
    }
    if cfg.run.protocol == ProtocolKind::AsyncPull && cfg.clock.rate != 1.0 {
        return Err(Error::config("the asynchronous bounds assume unit-rate node clocks"));
    }
    if cfg.run.max_sim_time.is_some() {
        return Err(Error::config("bound reports need a fixed horizon; unset max_sim_time"));
    }
    let (m, l) = obj.convexity_params();
    BoundSpec::new(BoundKind::SyncOptimality, m, l, cfg.noise.variance, h.alpha0, h.p, 0.0)?;
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Validates an ensemble against the bounds for its protocol.
///
/// The initial errors are the ensemble means at `t = 0`; the consensus
/// bound's C is `c_factor` times the largest gradient norm any trial saw.
pub fn bound_report(cfg: &RunConfig, obj: &Objective, traces: &[Vec<TraceRecord>]) -> Result<BoundReport> {
    bound_preflight(cfg, obj)?;
    if traces.iter().any(|t| t.first().map(|r| r.t) != Some(0)) {
        return Err(Error::Validation("every trace must log t = 0".into()));
    }
    let h = &cfg.hyper;
    let (m, l) = obj.convexity_params();
    let sigma_sq = cfg.noise.variance;
    let init_opt = mean(traces.iter().map(|t| t[0].sq_err_opt));
    let verdict_variant = cfg.bounds.lambda_variant;
    let mut checks = Vec::new();
    let pass;
    if cfg.run.protocol == ProtocolKind::PullGossip {
        let bs = BoundSpec::new(BoundKind::SyncOptimality, m, l, sigma_sq, h.alpha0, h.p, init_opt)?;
        let r = validate_trace(traces, &bs)?;
        pass = r.pass;
        checks.push(r);
    } else {
        let bs = BoundSpec::new(BoundKind::AsyncOptimality, m, l, sigma_sq, h.alpha0, h.p, init_opt)?;
        let opt = validate_trace(traces, &bs)?;
        let init_cons = mean(traces.iter().map(|t| t[0].sq_err_consensus));
        let g_max = traces
            .iter()
            .filter_map(|t| t.last())
            .map(|r| r.max_grad_norm)
            .fold(0.0, f64::max);
        let c = cfg.bounds.c_factor * g_max;
        let mut verdict = opt.pass;
        checks.push(opt);
        for variant in LambdaVariant::BOTH {
            let bs = BoundSpec::new(BoundKind::AsyncConsensus, m, l, sigma_sq, h.alpha0, h.p, init_cons)?
                .with_consensus(h.beta_gossip, c, variant)?;
            let r = validate_trace(traces, &bs)?;
            if variant == verdict_variant {
                verdict &= r.pass;
            }
            checks.push(r);
        }
        pass = verdict;
    }
    Ok(BoundReport {
        protocol: cfg.run.protocol,
        m,
        l,
        sigma_sq,
        alpha: h.alpha0,
        verdict_variant,
        checks,
        pass,
    })
}

fn run_trial(cfg: &RunConfig, obj: &Arc<Objective>, k: usize) -> Result<SimRun> {
    let sim = cfg.sim_config_with(Arc::clone(obj), &trial_run_id(k))?;
    match cfg.run.backend {
        Backend::Sim => simulator::run(&sim),
        Backend::Transport => run_transport(&sim, &cfg.transport_config()),
    }
}

fn write_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Runs every trial and writes the requested artifacts under
/// `run.output_dir`:
///
/// - `trials/trial-NNNN.jsonl`, one per trial, and `trace.jsonl`, their
///   concatenation in trial order;
/// - `summary.json`;
/// - `bound_report.json`.
///
/// Trial `k` uses `run_id = trial-NNNN` with the configured seed, so
/// trials are independent and rerunning a config reproduces every trace
/// file byte for byte. Simulated trials run in parallel; transport trials
/// run one at a time since each already owns a thread per node.
pub fn run_experiment(cfg: &RunConfig) -> std::result::Result<ExperimentOutcome, ExperimentError> {
    cfg.validate().map_err(config_failure)?;
    let obj = cfg.build_objective().map_err(config_failure)?;
    let want_bounds = cfg.run.emit.contains(&Emit::BoundReport);
    if want_bounds {
        bound_preflight(cfg, &obj).map_err(config_failure)?;
    }
    let started = Instant::now();
    let out = &cfg.run.output_dir;
    let emit_traces = cfg.run.emit.contains(&Emit::TraceJsonl);
    let trial_dir = out.join("trials");
    let io = |e: std::io::Error| runtime_failure(Error::Io(e));
    if !cfg.run.emit.is_empty() {
        fs::create_dir_all(out).map_err(io)?;
    }
    if emit_traces {
        fs::create_dir_all(&trial_dir).map_err(io)?;
    }

    let one = |k: usize| -> Result<SimRun> {
        let run = run_trial(cfg, &obj, k)?;
        if emit_traces {
            write_jsonl(&trial_dir.join(format!("{}.jsonl", trial_run_id(k))), &run.trace)?;
        }
        Ok(run)
    };
    let runs: Vec<SimRun> = match cfg.run.backend {
        Backend::Sim => (0..cfg.run.trials).into_par_iter().map(one).collect::<Result<_>>(),
        Backend::Transport => (0..cfg.run.trials).map(one).collect::<Result<_>>(),
    }
    .map_err(runtime_failure)?;

    let mut written = Vec::new();
    if emit_traces {
        let merged = out.join("trace.jsonl");
        let mut w = BufWriter::new(File::create(&merged).map_err(io)?);
        for k in 0..cfg.run.trials {
            let path = trial_dir.join(format!("{}.jsonl", trial_run_id(k)));
            w.write_all(&fs::read(&path).map_err(io)?).map_err(io)?;
            written.push(path);
        }
        w.flush().map_err(io)?;
        written.push(merged);
    }

    let traces: Vec<Vec<TraceRecord>> = runs.iter().map(|r| r.trace.clone()).collect();
    let report = if want_bounds {
        Some(bound_report(cfg, &obj, &traces).map_err(runtime_failure)?)
    } else {
        None
    };

    let trial_summaries: Vec<TrialSummary> = runs
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let last = r.trace.last();
            TrialSummary {
                run_id: trial_run_id(k),
                steps_done: r.steps_done,
                sim_time: r.sim_time,
                final_sq_err_opt: last.map_or(f64::NAN, |x| x.sq_err_opt),
                final_sq_err_consensus: last.map_or(f64::NAN, |x| x.sq_err_consensus),
                final_loss_mean: last.map_or(f64::NAN, |x| x.loss_mean),
            }
        })
        .collect();
    let summary = Summary {
        protocol: cfg.run.protocol,
        backend: cfg.run.backend,
        seed: cfg.run.seed,
        trials: cfg.run.trials,
        wall_time_s: started.elapsed().as_secs_f64(),
        mean_final_sq_err_opt: mean(trial_summaries.iter().map(|s| s.final_sq_err_opt)),
        mean_final_sq_err_consensus: mean(trial_summaries.iter().map(|s| s.final_sq_err_consensus)),
        mean_sim_time: mean(trial_summaries.iter().map(|s| s.sim_time)),
        runs: trial_summaries,
        bound_pass: report.as_ref().map(|r| r.pass),
        config: cfg.to_toml().map_err(runtime_failure)?,
    };
    if cfg.run.emit.contains(&Emit::SummaryJson) {
        let path = out.join("summary.json");
        write_json(&path, &summary).map_err(runtime_failure)?;
        written.push(path);
    }
    if let Some(r) = &report {
        let path = out.join("bound_report.json");
        write_json(&path, r).map_err(runtime_failure)?;
        written.push(path);
    }
    let status = match &report {
        Some(r) if !r.pass => ExitStatus::ValidationFailure,
        _ => ExitStatus::Success,
    };
    Ok(ExperimentOutcome {
        summary,
        traces,
        bound_report: report,
        written,
        status,
    })
}

fn push_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name}:");
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:>10.6}", m[(r, c)])).collect();
        let _ = writeln!(out, "  [{}]", row.join(" "));
    }
}

fn push_eigs(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let eigs: Vec<String> = symmetric_eigenvalues(m).iter().map(|e| format!("{e:.6}")).collect();
    let _ = writeln!(out, "{name} eigenvalues: [{}]", eigs.join(", "));
}

/// Closed-form versus enumerated second moments, their eigenvalues, and
/// both contraction factors, as plain text.
///
/// The pull moment is enumerated only up to `p = 5` and reported as skipped
/// beyond that; `p > 8` is an error.
pub fn emit_matrix_diagnostics(p: usize, beta: f64) -> Result<String> {
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    if p > ASYNC_ENUMERATION_MAX_P {
        return Err(Error::Unsupported(format!(
            "enumeration is limited to p <= {ASYNC_ENUMERATION_MAX_P}, got {p}"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    let mut out = String::new();
    let _ = writeln!(out, "p = {p}, beta = {beta}");
    let _ = writeln!(out);

    let pull = expected_second_moment_pull(p);
    push_matrix(&mut out, "E[M^T M] closed form", &pull);
    if p <= PULL_ENUMERATION_MAX_P {
        let e = enumerate_second_moment_pull(p)?;
        push_matrix(&mut out, "E[M^T M] enumerated", &e);
        let _ = writeln!(out, "E[M^T M] max abs diff = {:e}", max_abs_diff(&pull, &e));
    } else {
        let _ = writeln!(out, "E[M^T M] enumeration skipped (p > {PULL_ENUMERATION_MAX_P})");
    }
    push_eigs(&mut out, "E[M^T M]", &pull);
    let _ = writeln!(out);

    let closed = expected_second_moment_async(p, beta)?;
    let e = enumerate_second_moment_async(p, beta)?;
    push_matrix(&mut out, "E[D^T D] closed form", &closed.dtd);
    push_matrix(&mut out, "E[D^T D] enumerated", &e.dtd);
    let _ = writeln!(out, "E[D^T D] max abs diff = {:e}", max_abs_diff(&closed.dtd, &e.dtd));
    push_matrix(&mut out, "E[D^T 11^T D] closed form", &closed.dt11td);
    push_matrix(&mut out, "E[D^T 11^T D] enumerated", &e.dt11td);
    let _ = writeln!(
        out,
        "E[D^T 11^T D] max abs diff = {:e}",
        max_abs_diff(&closed.dt11td, &e.dt11td)
    );
    push_eigs(&mut out, "E[D^T D]", &closed.dtd);
    push_eigs(&mut out, "consensus operator", &closed.consensus_op);
    let _ = writeln!(out);
    let _ = writeln!(out, "lambda_theorem = {}", contraction_lambda(p, beta, LambdaVariant::Theorem));
    let _ = writeln!(
        out,
        "lambda_diag = {}",
        contraction_lambda(p, beta, LambdaVariant::Diagonalization)
    );
    Ok(out)
}
