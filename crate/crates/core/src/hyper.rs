//! Hyperparameters, the annealed step-size schedule and the momentum recursion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVec;

/// Training hyperparameters shared by every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Initial step size.
    pub alpha0: f64,
    /// Multiplier applied at each annealing point.
    pub anneal_factor: f64,
    /// Iteration indices at which the step size is annealed, ascending.
    pub anneal_at: Vec<u64>,
    /// Momentum coefficient.
    pub mu: f64,
    /// L2 weight decay, added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
    /// Gossip moving rate.
    pub beta_gossip: f64,
    /// Elastic-averaging moving rate.
    pub beta_ea: f64,
    /// Communication interval in iterations.
    pub tau: u64,
    /// Number of nodes.
    pub p: usize,
    /// Per-node minibatch size.
    pub b: usize,
}

impl Hyperparams {
    /// The large-scale training regime: step 0.1 annealed twice by 0.1 at
    /// 150k and 300k iterations, momentum 0.9, weight decay 1e-4, elastic
    /// moving rate 0.8/p, communication every iteration and an aggregate
    /// minibatch of 256.
    pub fn reference(p: usize) -> Self {
        let p = p.max(1);
        Hyperparams {
            alpha0: 0.1,
            anneal_factor: 0.1,
            anneal_at: vec![150_000, 300_000],
            mu: 0.9,
            weight_decay: 1e-4,
            beta_gossip: 0.5,
            beta_ea: 0.8 / p as f64,
            tau: 1,
            p,
            b: (256 / p).max(1),
        }
    }

    /// Plain constant-step SGD without momentum, decay or annealing.
    pub fn plain(p: usize, alpha: f64) -> Self {
        Hyperparams {
            alpha0: alpha,
            anneal_factor: 1.0,
            anneal_at: Vec::new(),
            mu: 0.0,
            weight_decay: 0.0,
            beta_gossip: 0.5,
            beta_ea: 0.8 / p.max(1) as f64,
            tau: 1,
            p,
            b: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(Error::invalid(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "anneal_factor must lie in (0, 1], got {}",
                self.anneal_factor
            )));
        }
        if self.anneal_at.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("anneal_at must be sorted ascending"));
        }
        if !(self.mu >= 0.0 && self.mu < 1.0) {
            return Err(Error::invalid(format!("mu must lie in [0, 1), got {}", self.mu)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        if !(self.beta_gossip > 0.0 && self.beta_gossip < 1.0) {
            return Err(Error::invalid(format!(
                "beta_gossip must lie in (0, 1), got {}",
                self.beta_gossip
            )));
        }
        if !(self.beta_ea >= 0.0 && self.beta_ea <= 1.0) {
            return Err(Error::invalid(format!(
                "beta_ea must lie in [0, 1], got {}",
                self.beta_ea
            )));
        }
        if self.tau < 1 {
            return Err(Error::invalid("tau must be >= 1"));
        }
        if self.p < 1 {
            return Err(Error::invalid("p must be >= 1"));
        }
        if self.b < 1 {
            return Err(Error::invalid("b must be >= 1"));
        }
        Ok(())
    }

    /// Aggregate minibatch size `p * b`.
    pub fn aggregate_batch(&self) -> usize {
        self.p * self.b
    }

    /// Piecewise-constant annealed step size: `alpha0 * anneal_factor^k`
    /// where `k` counts the annealing points `<= t`.
    pub fn step_size_at(&self, t: u64) -> f64 {
        let k = self.anneal_at.partition_point(|&a| a <= t);
        self.alpha0 * self.anneal_factor.powi(k as i32)
    }

    /// Whether iteration `t` is a communication round (`t > 0`, `t % tau == 0`).
    pub fn is_comm_round(&self, t: u64) -> bool {
        t > 0 && t % self.tau == 0
    }
}

/// Where the momentum memory lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumScope {
    /// Each node keeps its own previous delta.
    PerNode,
    /// Every node keeps the all-reduced previous delta.
    Aggregate,
}

/// `-alpha * grad + mu * delta_prev`
pub fn momentum_delta(
    grad: &ParamVec,
    delta_prev: &ParamVec,
    alpha: f64,
    mu: f64,
) -> Result<ParamVec> {
    grad.check_dim(delta_prev)?;
    let values = grad
        .as_slice()
        .iter()
        .zip(delta_prev.as_slice())
        .map(|(g, d)| -alpha * g + mu * d)
        .collect();
    Ok(ParamVec::from_raw(values))
}
