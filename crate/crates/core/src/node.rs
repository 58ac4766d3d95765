//! Per-node training state.

use crate::params::ParamVec;
use crate::rng::NodeRng;

/// One worker's parameters, momentum memory, iteration count and streams.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub theta: ParamVec,
    /// Momentum memory: the previous step's delta.
    pub delta_prev: ParamVec,
    /// Local iteration counter.
    pub t: u64,
    pub rng: NodeRng,
}

impl NodeState {
    pub fn new(id: usize, theta: ParamVec, rng: NodeRng) -> Self {
        let delta_prev = ParamVec::zeros(theta.dim());
        NodeState {
            id,
            theta,
            delta_prev,
            t: 0,
            rng,
        }
    }

    /// `p` nodes starting from the same point with streams keyed on
    /// `(seed, run_id, node)`.
    pub fn replicas(p: usize, theta0: &ParamVec, seed: u64, run_id: &str) -> Vec<NodeState> {
        (0..p)
            .map(|i| NodeState::new(i, theta0.clone(), NodeRng::new(seed, run_id, i)))
            .collect()
    }
}
