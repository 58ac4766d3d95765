//! Closed-form convergence bounds and Monte-Carlo validation against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{contraction_lambda, LambdaVariant};
use crate::simulator::TraceRecord;

/// Fewest trials [`validate_trace`] accepts.
pub const MIN_TRIALS: usize = 30;
/// Standard errors of slack granted to the ensemble mean.
pub const SE_SLACK: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    SyncOptimality,
    AsyncOptimality,
    AsyncConsensus,
}

impl BoundKind {
    /// Consensus bounds deviation from the mean; the others from the optimum.
    pub fn quantity(self, r: &TraceRecord) -> f64 {
        match self {
            BoundKind::AsyncConsensus => r.sq_err_consensus,
            _ => r.sq_err_opt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSpec {
    pub kind: BoundKind,
    pub m: f64,
    pub l: f64,
    /// Total gradient-noise variance `E|xi|^2`.
    pub sigma_sq: f64,
    pub alpha: f64,
    /// Gossip mixing weight; only the consensus bound reads it.
    pub beta: f64,
    pub p: usize,
    /// `|theta_0 - theta* 1|^2`, or `|theta_0 - mean 1|^2` for consensus.
    pub initial_sq_err: f64,
    /// Uniform gradient-norm bound; required for consensus.
    pub c: Option<f64>,
    pub lambda_variant: LambdaVariant,
}

impl BoundSpec {
    pub fn new(kind: BoundKind, m: f64, l: f64, sigma_sq: f64, alpha: f64, p: usize, initial_sq_err: f64) -> Result<Self> {
        let bs = BoundSpec {
            kind,
            m,
            l,
            sigma_sq,
            alpha,
            beta: 0.5,
            p,
            initial_sq_err,
            c: None,
            lambda_variant: LambdaVariant::Theorem,
        };
        bs.validate_common()?;
        Ok(bs)
    }

    pub fn with_consensus(mut self, beta: f64, c: f64, variant: LambdaVariant) -> Result<Self> {
        self.beta = beta;
        self.c = Some(c);
        self.lambda_variant = variant;
        self.validate()?;
        Ok(self)
    }

    /// Largest admissible constant step, `2 / (m + L)`.
    pub fn max_alpha(&self) -> f64 {
        2.0 / (self.m + self.l)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if self.kind == BoundKind::AsyncConsensus {
            match self.c {
                Some(c) if c.is_finite() && c >= 0.0 => {}
                Some(c) => {
                    return Err(Error::InvalidParameter(format!(
                        "gradient bound C must be >= 0, got {c}"
                    )))
                }
                None => {
                    return Err(Error::InvalidParameter(
                        "the consensus bound needs a gradient bound C".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Everything but the consensus-only gradient bound.
    fn validate_common(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.m.is_finite() && self.m > 0.0) {
            return bad(format!("m must be positive, got {}", self.m));
        }
        if !(self.l.is_finite() && self.l >= self.m) {
            return bad(format!("need m <= L, got m={} L={}", self.m, self.l));
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq >= 0.0) {
            return bad(format!("sigma^2 must be >= 0, got {}", self.sigma_sq));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.max_alpha()) {
            return bad(format!(
                "step size must lie in (0, 2/(m+L)] = (0, {}], got {}",
                self.max_alpha(),
                self.alpha
            ));
        }
        if self.p == 0 {
            return bad("p must be >= 1".into());
        }
        if !(self.initial_sq_err.is_finite() && self.initial_sq_err >= 0.0) {
            return bad(format!("initial error must be >= 0, got {}", self.initial_sq_err));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        Ok(())
    }

    fn kappa(&self) -> f64 {
        self.m * self.l / (self.m + self.l)
    }

    /// `p alpha sigma^2 (m + L) / (2 m L)`, shared by both optimality bounds.
    fn noise_floor(&self) -> f64 {
        self.p as f64 * self.alpha * self.sigma_sq / (2.0 * self.kappa())
    }

    pub fn lambda(&self) -> f64 {
        contraction_lambda(self.p, self.beta, self.lambda_variant)
    }
}

fn geometric(base: f64, t: u64) -> f64 {
    base.powf(t as f64)
}

/// `(1 - 2 alpha mL/(m+L))^t init + p alpha sigma^2 (m+L)/(2mL)`.
pub fn sync_optimality_bound(bs: &BoundSpec, t: u64) -> Result<f64> {
    bs.validate()?;
    let base = 1.0 - 2.0 * bs.alpha * bs.kappa();
    Ok(geometric(base, t) * bs.initial_sq_err + bs.noise_floor())
}

/// As [`sync_optimality_bound`] with the contraction slowed by `1/p`.
pub fn async_optimality_bound(bs: &BoundSpec, t: u64) -> Result<f64> {
    bs.validate()?;
    let base = 1.0 - 2.0 * bs.alpha / bs.p as f64 * bs.kappa();
    Ok(geometric(base, t) * bs.initial_sq_err + bs.noise_floor())
}

/// `(lambda (1 - alpha m/p))^t init + lambda alpha^2 (C^2 + sigma^2) / (1 - lambda (1 - alpha m/p))`.
pub fn async_consensus_bound(bs: &BoundSpec, t: u64) -> Result<f64> {
    bs.validate()?;
    let c = bs.c.ok_or_else(|| Error::InvalidParameter("missing gradient bound C".into()))?;
    let lambda = bs.lambda();
    let rate = lambda * (1.0 - bs.alpha * bs.m / bs.p as f64);
    if rate >= 1.0 {
        return Err(Error::DegenerateBound(format!(
            "contraction lambda (1 - alpha m / p) = {rate} is not below 1"
        )));
    }
    let residual = lambda * bs.alpha * bs.alpha * (c * c + bs.sigma_sq) / (1.0 - rate);
    Ok(geometric(rate, t) * bs.initial_sq_err + residual)
}

pub fn bound_at(bs: &BoundSpec, t: u64) -> Result<f64> {
    match bs.kind {
        BoundKind::SyncOptimality => sync_optimality_bound(bs, t),
        BoundKind::AsyncOptimality => async_optimality_bound(bs, t),
        BoundKind::AsyncConsensus => async_consensus_bound(bs, t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: u64,
    pub mean: f64,
    pub std_err: f64,
    pub bound: f64,
    /// `mean - (bound + 3 std_err)`; positive for every violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub bound_kind: BoundKind,
    /// Only meaningful for the consensus bound.
    pub lambda_variant: Option<LambdaVariant>,
    pub lambda: Option<f64>,
    pub c: Option<f64>,
    pub trials: usize,
    pub points_checked: usize,
    /// Largest `mean / (bound + 3 std_err)` over the grid.
    pub worst_ratio: f64,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

/// Checks `mean <= bound(t) + 3 SE` at every logged `t` of an ensemble.
///
/// Every trace must log the same `t` grid.
pub fn validate_trace(ensemble: &[Vec<TraceRecord>], bs: &BoundSpec) -> Result<ValidationReport> {
    bs.validate()?;
    let n = ensemble.len();
    if n < MIN_TRIALS {
        return Err(Error::Validation(format!(
            "need at least {MIN_TRIALS} trials, got {n}"
        )));
    }
    let grid: Vec<u64> = ensemble[0].iter().map(|r| r.t).collect();
    if grid.is_empty() {
        return Err(Error::Validation("empty trace".into()));
    }
    for (k, trace) in ensemble.iter().enumerate() {
        if trace.len() != grid.len() || trace.iter().zip(&grid).any(|(r, &t)| r.t != t) {
            return Err(Error::Validation(format!(
                "trial {k} logs a different t grid than trial 0"
            )));
        }
    }
    let mut violations = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for (idx, &t) in grid.iter().enumerate() {
        let xs: Vec<f64> = ensemble.iter().map(|tr| bs.kind.quantity(&tr[idx])).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_err = (var / n as f64).sqrt();
        let bound = bound_at(bs, t)?;
        let allowed = bound + SE_SLACK * std_err;
        if allowed > 0.0 {
            worst_ratio = worst_ratio.max(mean / allowed);
        } else if mean > 0.0 {
            worst_ratio = f64::INFINITY;
        }
        if mean > allowed {
            violations.push(Violation {
                t,
                mean,
                std_err,
                bound,
                margin: mean - allowed,
            });
        }
    }
    let consensus = bs.kind == BoundKind::AsyncConsensus;
    Ok(ValidationReport {
        bound_kind: bs.kind,
        lambda_variant: consensus.then_some(bs.lambda_variant),
        lambda: consensus.then(|| bs.lambda()),
        c: bs.c.filter(|_| consensus),
        trials: n,
        points_checked: grid.len(),
        worst_ratio,
        pass: violations.is_empty(),
        violations,
    })
}
