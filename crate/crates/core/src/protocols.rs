//! Node-level update rules of every protocol, as pure state transitions.
//!
//! Backends (the simulator and the message-passing runtime) own ordering and
//! mutation; the functions here take states by value and return the next
//! states.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{momentum_delta, Hyperparams, MomentumScope};
use crate::node::NodeState;
use crate::objectives::{GradientOracle, NoiseModel};
use crate::params::ParamVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Synchronous all-reduce SGD.
    AllReduce,
    /// Elastic averaging SGD against a center parameter.
    ElasticAvg,
    /// Synchronous pull-gossiping SGD (mix, then gradient step).
    PullGossip,
    /// Synchronous push-gossiping SGD.
    PushGossip,
    /// Gossip and gradient step from the same stale iterate.
    GossipStale,
    /// Gradient step first, then gossip with the partner's fresh iterate.
    GossipFresh,
    /// Poisson-clock asynchronous pull gossip.
    AsyncPull,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 7] = [
        ProtocolKind::AllReduce,
        ProtocolKind::ElasticAvg,
        ProtocolKind::PullGossip,
        ProtocolKind::PushGossip,
        ProtocolKind::GossipStale,
        ProtocolKind::GossipFresh,
        ProtocolKind::AsyncPull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::AllReduce => "all-reduce",
            ProtocolKind::ElasticAvg => "elastic-avg",
            ProtocolKind::PullGossip => "pull-gossip",
            ProtocolKind::PushGossip => "push-gossip",
            ProtocolKind::GossipStale => "gossip-stale",
            ProtocolKind::GossipFresh => "gossip-fresh",
            ProtocolKind::AsyncPull => "async-pull",
        }
    }

    /// All-reduce follows its own box and shares momentum; everything else
    /// keeps momentum per node.
    pub fn default_momentum_scope(self) -> MomentumScope {
        match self {
            ProtocolKind::AllReduce => MomentumScope::Aggregate,
            _ => MomentumScope::PerNode,
        }
    }

    pub fn supports_transport(self) -> bool {
        matches!(
            self,
            ProtocolKind::AllReduce
                | ProtocolKind::ElasticAvg
                | ProtocolKind::PullGossip
                | ProtocolKind::PushGossip
        )
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown protocol `{s}`")))
    }
}

/// The elastic-averaging center parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_center: ParamVec,
    pub updates_applied: u64,
}

impl ServerState {
    pub fn new(theta_center: ParamVec) -> Self {
        ServerState {
            theta_center,
            updates_applied: 0,
        }
    }
}

/// Minibatch gradient plus noise plus weight decay, at `node.theta`.
fn sampled_gradient(
    node: &mut NodeState,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<ParamVec> {
    let mut g = obj.minibatch_gradient(&node.theta, h.b, &mut node.rng.sample)?;
    noise.perturb(&mut g, &mut node.rng.noise)?;
    if h.weight_decay != 0.0 {
        g.axpy(h.weight_decay, &node.theta)?;
    }
    Ok(g)
}

/// The momentum delta a node would take from its current state, consuming
/// its sample and noise streams.
pub fn step_delta(
    node: &mut NodeState,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<ParamVec> {
    let alpha = h.step_size_at(node.t);
    let g = sampled_gradient(node, obj, noise, h)?;
    momentum_delta(&g, &node.delta_prev, alpha, h.mu)
}

/// One momentum SGD step on a single node.
pub fn local_sgd_step(
    mut node: NodeState,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<NodeState> {
    let delta = step_delta(&mut node, obj, noise, h)?;
    node.theta.add_assign(&delta)?;
    node.delta_prev = delta;
    node.t += 1;
    Ok(node)
}

fn check_lockstep(nodes: &[NodeState]) -> Result<u64> {
    let t = nodes.first().ok_or(Error::Empty("no nodes"))?.t;
    if let Some(n) = nodes.iter().find(|n| n.t != t) {
        return Err(Error::ProtocolViolation(format!(
            "node {} is at iteration {} while node {} is at {t}",
            n.id, n.t, nodes[0].id
        )));
    }
    Ok(t)
}

/// `[lo, hi)` of chunk `k` when `dim` coordinates are split into `p`
/// contiguous chunks. Chunks may be empty when `dim < p`.
pub fn chunk_bounds(dim: usize, p: usize, k: usize) -> (usize, usize) {
    (k * dim / p, (k + 1) * dim / p)
}

/// The exact mean in ring order: chunk `c` is summed as
/// `((x_c + x_{c+1}) + ...) + x_{c-1}` (indices mod `p`), then divided by
/// `p`. A ring all-reduce over the same chunks reproduces it bit for bit.
pub fn ring_order_mean(vectors: &[ParamVec]) -> Result<ParamVec> {
    let first = vectors.first().ok_or(Error::Empty("mean of no vectors"))?;
    for v in vectors {
        first.check_dim(v)?;
    }
    let p = vectors.len();
    let dim = first.dim();
    let pf = p as f64;
    let mut out = vec![0.0; dim];
    for c in 0..p {
        let (lo, hi) = chunk_bounds(dim, p, c);
        for (idx, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let mut s = vectors[c].as_slice()[idx];
            for step in 1..p {
                s += vectors[(c + step) % p].as_slice()[idx];
            }
            *slot = s / pf;
        }
    }
    Ok(ParamVec::from_raw(out))
}

/// Applies the all-reduced delta to a node after its own delta was computed.
pub fn allreduce_commit(
    node: &mut NodeState,
    mean_delta: &ParamVec,
    own_delta: ParamVec,
    scope: MomentumScope,
) -> Result<()> {
    node.theta.add_assign(mean_delta)?;
    node.delta_prev = match scope {
        MomentumScope::Aggregate => mean_delta.clone(),
        MomentumScope::PerNode => own_delta,
    };
    node.t += 1;
    Ok(())
}

/// One synchronous all-reduce SGD round: every node computes its delta, the
/// ring-order mean is applied identically everywhere.
pub fn allreduce_round(
    mut nodes: Vec<NodeState>,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
    scope: MomentumScope,
) -> Result<Vec<NodeState>> {
    check_lockstep(&nodes)?;
    let deltas = nodes
        .iter_mut()
        .map(|n| step_delta(n, obj, noise, h))
        .collect::<Result<Vec<_>>>()?;
    let mean = ring_order_mean(&deltas)?;
    for (node, own) in nodes.iter_mut().zip(deltas) {
        allreduce_commit(node, &mean, own, scope)?;
    }
    Ok(nodes)
}

/// Elastic-averaging client exchange followed by its gradient step.
///
/// Only valid on communication iterations; returns the update to send to
/// the server, `+beta_ea * (theta - center)`.
pub fn ea_client_step(
    mut node: NodeState,
    server_view: &ParamVec,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<(NodeState, ParamVec)> {
    if !h.is_comm_round(node.t) {
        return Err(Error::ProtocolViolation(format!(
            "elastic exchange at non-communication iteration {}",
            node.t
        )));
    }
    let update = node.theta.sub(server_view)?.scale(h.beta_ea);
    node.theta = node.theta.sub(&update)?;
    let node = local_sgd_step(node, obj, noise, h)?;
    Ok((node, update))
}

pub fn ea_server_apply(mut server: ServerState, update: &ParamVec) -> Result<ServerState> {
    server.theta_center.add_assign(update)?;
    server.updates_applied += 1;
    Ok(server)
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    Ok(())
}

/// Pull mixing: `theta_i <- (x_i + x_{partner_of[i]}) / 2` from a snapshot.
pub fn pull_mix(snapshot: &[ParamVec], partner_of: &[usize]) -> Result<Vec<ParamVec>> {
    if partner_of.len() != snapshot.len() {
        return Err(Error::DimensionMismatch {
            expected: snapshot.len(),
            found: partner_of.len(),
        });
    }
    snapshot
        .iter()
        .zip(partner_of)
        .map(|(x, &j)| {
            check_index(j, snapshot.len())?;
            pull_pair(x, &snapshot[j])
        })
        .collect()
}

/// `(x + y) / 2`, the pull average of one node.
pub fn pull_pair(x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    x.check_dim(y)?;
    Ok(ParamVec::from_raw(
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    ))
}

/// Push mixing: every node averages its own value with all values pushed to
/// it. `target_of[k] = None` means node `k` pushes nowhere.
///
/// Summation order is fixed: own value first, then senders by ascending id.
pub fn push_mix(snapshot: &[ParamVec], target_of: &[Option<usize>]) -> Result<Vec<ParamVec>> {
    let p = snapshot.len();
    if target_of.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: target_of.len(),
        });
    }
    let mut inbound: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (k, target) in target_of.iter().enumerate() {
        if let Some(j) = *target {
            check_index(j, p)?;
            if j == k {
                return Err(Error::ProtocolViolation(format!(
                    "node {k} pushes to itself"
                )));
            }
            inbound[j].push(k);
        }
    }
    snapshot
        .iter()
        .zip(&inbound)
        .map(|(own, senders)| {
            let received: Vec<&ParamVec> = senders.iter().map(|&k| &snapshot[k]).collect();
            push_average(own, &received)
        })
        .collect()
}

/// Own value plus everything received, summed in the given order and
/// divided by the count.
pub fn push_average(own: &ParamVec, received: &[&ParamVec]) -> Result<ParamVec> {
    let mut acc = own.clone();
    for x in received {
        acc.add_assign(x)?;
    }
    let count = (received.len() + 1) as f64;
    for x in acc.as_mut_slice() {
        *x /= count;
    }
    Ok(acc)
}

/// Pull-gossip round: on communication iterations mix with the drawn
/// partners, then every node takes its gradient step at the mixed point.
pub fn pull_gossip_round(
    mut nodes: Vec<NodeState>,
    partner_of: &[usize],
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<Vec<NodeState>> {
    let t = check_lockstep(&nodes)?;
    if h.is_comm_round(t) {
        let snapshot: Vec<ParamVec> = nodes.iter().map(|n| n.theta.clone()).collect();
        let mixed = pull_mix(&snapshot, partner_of)?;
        for (node, theta) in nodes.iter_mut().zip(mixed) {
            node.theta = theta;
        }
    }
    nodes
        .into_iter()
        .map(|n| local_sgd_step(n, obj, noise, h))
        .collect()
}

/// Push-gossip round, gated like [`pull_gossip_round`].
pub fn push_gossip_round(
    mut nodes: Vec<NodeState>,
    target_of: &[Option<usize>],
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<Vec<NodeState>> {
    let t = check_lockstep(&nodes)?;
    if h.is_comm_round(t) {
        let snapshot: Vec<ParamVec> = nodes.iter().map(|n| n.theta.clone()).collect();
        let mixed = push_mix(&snapshot, target_of)?;
        for (node, theta) in nodes.iter_mut().zip(mixed) {
            node.theta = theta;
        }
    }
    nodes
        .into_iter()
        .map(|n| local_sgd_step(n, obj, noise, h))
        .collect()
}

/// `theta <- (1 - beta) theta_i + beta theta_j + delta`, with the gradient
/// inside `delta` evaluated at the stale `theta_i`.
pub fn gossip_stale_step(
    mut node: NodeState,
    partner_theta: &ParamVec,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<NodeState> {
    node.theta.check_dim(partner_theta)?;
    let delta = step_delta(&mut node, obj, noise, h)?;
    let mut theta = node.theta.move_toward(partner_theta, h.beta_gossip)?;
    theta.add_assign(&delta)?;
    node.theta = theta;
    node.delta_prev = delta;
    node.t += 1;
    Ok(node)
}

/// Gradient step first, then `theta <- (1 - beta) theta'_i + beta theta'_j`
/// where `partner_theta_fresh` is the partner's post-step iterate.
pub fn gossip_fresh_step(
    node: NodeState,
    partner_theta_fresh: &ParamVec,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<NodeState> {
    node.theta.check_dim(partner_theta_fresh)?;
    let node = local_sgd_step(node, obj, noise, h)?;
    gossip_fresh_mix(node, partner_theta_fresh, h)
}

/// The mixing half of [`gossip_fresh_step`], for backends that step every
/// node before any node mixes.
pub fn gossip_fresh_mix(
    mut node: NodeState,
    partner_theta_fresh: &ParamVec,
    h: &Hyperparams,
) -> Result<NodeState> {
    node.theta = node.theta.move_toward(partner_theta_fresh, h.beta_gossip)?;
    Ok(node)
}

/// One master-clock event of asynchronous pull gossip: node `i` ticked and
/// pulls from node `j`.
///
/// `theta_i <- (1 - beta)(theta_i + delta) + beta theta_j`, evaluated as
/// `theta_i + beta (theta_j - theta_i) + (1 - beta) delta`; no other node
/// changes. The step size uses node `i`'s local iteration count.
pub fn async_pull_event(
    mut nodes: Vec<NodeState>,
    i: usize,
    j: usize,
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    h: &Hyperparams,
) -> Result<Vec<NodeState>> {
    check_index(i, nodes.len())?;
    check_index(j, nodes.len())?;
    let partner = nodes[j].theta.clone();
    let beta = h.beta_gossip;
    let node = &mut nodes[i];
    let delta = step_delta(node, obj, noise, h)?;
    let mut theta = node.theta.move_toward(&partner, beta)?;
    theta.axpy(1.0 - beta, &delta)?;
    node.theta = theta;
    node.delta_prev = delta;
    node.t += 1;
    Ok(nodes)
}

/// Uniform pull partners (self allowed), one draw per node from its own
/// partner stream.
pub fn draw_pull_partners(nodes: &mut [NodeState]) -> Vec<usize> {
    let p = nodes.len();
    nodes
        .iter_mut()
        .map(|n| n.rng.partner.random_range(0..p))
        .collect()
}

/// Uniform push targets excluding self; `None` when there is nobody else.
pub fn draw_push_targets(nodes: &mut [NodeState]) -> Vec<Option<usize>> {
    let p = nodes.len();
    nodes
        .iter_mut()
        .enumerate()
        .map(|(i, n)| draw_push_target(&mut n.rng.partner, i, p))
        .collect()
}

pub fn draw_push_target<R: Rng>(rng: &mut R, me: usize, p: usize) -> Option<usize> {
    if p < 2 {
        return None;
    }
    let r = rng.random_range(0..p - 1);
    Some(if r >= me { r + 1 } else { r })
}
