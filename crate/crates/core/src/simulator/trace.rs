use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objectives::GradientOracle;
use crate::params::{spatial_mean, sum_sq_dist, ParamVec};
use crate::protocols::ProtocolKind;

/// One logged observation of the whole system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub protocol: ProtocolKind,
    /// Round index (synchronous) or master-clock event index (asynchronous).
    pub t: u64,
    pub sim_time: f64,
    /// `sum_i |theta_i - theta*|^2`
    pub sq_err_opt: f64,
    /// `sum_i |theta_i - mean(theta)|^2`
    pub sq_err_consensus: f64,
    /// Mean of `f(theta_i)` over nodes.
    pub loss_mean: f64,
    pub alpha: f64,
    /// Running maximum of the exact `|grad f(theta_i)|` over logged states.
    pub max_grad_norm: f64,
}

/// The per-state quantities of a [`TraceRecord`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub sq_err_opt: f64,
    pub sq_err_consensus: f64,
    pub loss_mean: f64,
    pub max_grad_norm: f64,
}

pub fn observe(obj: &dyn GradientOracle, thetas: &[ParamVec]) -> Result<Snapshot> {
    for t in thetas {
        t.ensure_finite()?;
    }
    let mean = spatial_mean(thetas)?;
    let mut loss = 0.0;
    let mut grad_norm: f64 = 0.0;
    for t in thetas {
        loss += obj.value(t)?;
        grad_norm = grad_norm.max(obj.gradient(t)?.norm_sq().sqrt());
    }
    Ok(Snapshot {
        sq_err_opt: sum_sq_dist(thetas, obj.optimum())?,
        sq_err_consensus: sum_sq_dist(thetas, &mean)?,
        loss_mean: loss / thetas.len() as f64,
        max_grad_norm: grad_norm,
    })
}

/// Accumulates records on a fixed logging stride.
#[derive(Debug)]
pub(crate) struct TraceLog {
    run_id: String,
    protocol: ProtocolKind,
    every: u64,
    max_grad_norm: f64,
    pub(crate) records: Vec<TraceRecord>,
}

impl TraceLog {
    pub(crate) fn new(run_id: &str, protocol: ProtocolKind, every: u64) -> Self {
        TraceLog {
            run_id: run_id.to_string(),
            protocol,
            every: every.max(1),
            max_grad_norm: 0.0,
            records: Vec::new(),
        }
    }

    pub(crate) fn due(&self, t: u64, last: bool) -> bool {
        last || t % self.every == 0
    }

    pub(crate) fn record(
        &mut self,
        obj: &dyn GradientOracle,
        thetas: &[ParamVec],
        t: u64,
        sim_time: f64,
        alpha: f64,
    ) -> Result<()> {
        if self.records.last().is_some_and(|r| r.t == t) {
            return Ok(());
        }
        let s = observe(obj, thetas)?;
        self.max_grad_norm = self.max_grad_norm.max(s.max_grad_norm);
        self.records.push(TraceRecord {
            run_id: self.run_id.clone(),
            protocol: self.protocol,
            t,
            sim_time,
            sq_err_opt: s.sq_err_opt,
            sq_err_consensus: s.sq_err_consensus,
            loss_mean: s.loss_mean,
            alpha,
            max_grad_norm: self.max_grad_norm,
        });
        Ok(())
    }
}
