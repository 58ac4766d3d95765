//! Deterministic single-threaded execution: lock-step rounds, and the
//! Poisson master-clock event model.

mod clock;
mod trace;

pub use clock::{apply_straggler, sample_next_event, ClockKind, ClockModel, StragglerModel};
pub use trace::{observe, Snapshot, TraceRecord};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hyper::{Hyperparams, MomentumScope};
use crate::node::NodeState;
use crate::objectives::{GradientOracle, NoiseModel, Objective};
use crate::params::ParamVec;
use crate::protocols::{self, ProtocolKind, ServerState};
use crate::rng::{derive_stream, StreamPurpose, GLOBAL_STREAM};
pub(crate) use trace::TraceLog;

/// Starting point of every node: `theta* + c 1` plus optional per-node
/// Gaussian jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// When set, `c` is chosen so that `sum_i |theta_i - theta*|^2` equals
    /// this before jitter; otherwise `c = offset`.
    pub sq_err: Option<f64>,
    pub offset: f64,
    /// Per-coordinate standard deviation of the per-node jitter.
    pub jitter: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            sq_err: None,
            offset: 1.0,
            jitter: 0.0,
        }
    }
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.sq_err {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::invalid(format!("init sq_err must be >= 0, got {e}")));
            }
        }
        if !self.offset.is_finite() {
            return Err(Error::invalid("init offset must be finite"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::invalid(format!("init jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Initial parameters for `p` nodes. Jitter draws come from each node's
/// init stream.
pub fn initial_thetas(
    obj: &dyn GradientOracle,
    p: usize,
    init: &InitSpec,
    seed: u64,
    run_id: &str,
) -> Result<Vec<ParamVec>> {
    init.validate()?;
    let opt = obj.optimum();
    let dim = opt.dim();
    let c = match init.sq_err {
        Some(e) => (e / (p * dim) as f64).sqrt(),
        None => init.offset,
    };
    (0..p)
        .map(|i| {
            let mut theta = opt.add(&ParamVec::from_elem(dim, c))?;
            if init.jitter > 0.0 {
                let mut rng = derive_stream(seed, run_id, i as u64, StreamPurpose::Init);
                for x in theta.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += init.jitter * z;
                }
            }
            Ok(theta)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub protocol: ProtocolKind,
    pub hyper: Hyperparams,
    pub objective: Arc<Objective>,
    pub noise: NoiseModel,
    pub clock: ClockModel,
    pub straggler: StragglerModel,
    /// Added to a node's round time whenever it communicates.
    pub latency: f64,
    /// Rounds (synchronous) or master events (asynchronous).
    pub steps: u64,
    /// Optional early stop once simulated time reaches this.
    pub max_sim_time: Option<f64>,
    pub seed: u64,
    pub run_id: String,
    pub trace_every: u64,
    pub init: InitSpec,
    /// `None` picks the protocol's default.
    pub momentum_scope: Option<MomentumScope>,
}

impl SimConfig {
    /// Lock-step defaults: unit compute time, no latency, log every step.
    pub fn new(
        protocol: ProtocolKind,
        hyper: Hyperparams,
        objective: Arc<Objective>,
        noise: NoiseModel,
        steps: u64,
    ) -> Self {
        let clock = if protocol == ProtocolKind::AsyncPull {
            ClockModel::poisson(1.0)
        } else {
            ClockModel::lockstep()
        };
        SimConfig {
            protocol,
            hyper,
            objective,
            noise,
            clock,
            straggler: StragglerModel::default(),
            latency: 0.0,
            steps,
            max_sim_time: None,
            seed: 0,
            run_id: "run".into(),
            trace_every: 1,
            init: InitSpec::default(),
            momentum_scope: None,
        }
    }

    pub fn p(&self) -> usize {
        self.hyper.p
    }

    pub fn scope(&self) -> MomentumScope {
        self.momentum_scope
            .unwrap_or_else(|| self.protocol.default_momentum_scope())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let p = self.p();
        if self.steps == 0 {
            return Err(Error::invalid("horizon must be at least one step"));
        }
        if self.trace_every == 0 {
            return Err(Error::invalid("trace_every must be >= 1"));
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(Error::invalid(format!("latency must be >= 0, got {}", self.latency)));
        }
        if let Some(t) = self.max_sim_time {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("max_sim_time must be positive, got {t}")));
            }
        }
        if self.noise.dim() != self.objective.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.objective.dim(),
                found: self.noise.dim(),
            });
        }
        self.clock.validate()?;
        self.straggler.validate(p)?;
        self.init.validate()?;
        if self.protocol == ProtocolKind::AllReduce && self.init.jitter != 0.0 {
            return Err(Error::config(
                "all-reduce keeps replicas identical; init jitter must be 0",
            ));
        }
        Ok(())
    }
}

/// Outcome of one simulated run.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub trace: Vec<TraceRecord>,
    pub thetas: Vec<ParamVec>,
    pub node_clocks: Vec<f64>,
    pub sim_time: f64,
    /// Elastic-averaging center, when one exists.
    pub center: Option<ParamVec>,
    pub steps_done: u64,
}

/// Runs `cfg` on the backend its protocol and clock call for.
pub fn run(cfg: &SimConfig) -> Result<SimRun> {
    match (cfg.protocol, cfg.clock.kind) {
        (ProtocolKind::AsyncPull, _) | (ProtocolKind::ElasticAvg, ClockKind::Poisson) => run_async(cfg),
        _ => run_sync(cfg),
    }
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn thetas_of(nodes: &[NodeState]) -> Vec<ParamVec> {
    nodes.iter().map(|n| n.theta.clone()).collect()
}

/// Lock-step rounds of all-reduce, the gossip variants, or elastic averaging
/// with every client exchanging on the same rounds.
///
/// All-reduce rounds end at a barrier (`max_i` compute plus latency); every
/// other protocol advances each node's own clock and reports the median.
pub fn run_sync(cfg: &SimConfig) -> Result<SimRun> {
    cfg.validate()?;
    if cfg.protocol == ProtocolKind::AsyncPull {
        return Err(Error::Unsupported("async-pull needs the event backend".into()));
    }
    if cfg.clock.kind != ClockKind::Lockstep {
        return Err(Error::Unsupported(format!(
            "{} under a poisson clock is not a lock-step run",
            cfg.protocol
        )));
    }
    let obj: &Objective = &cfg.objective;
    let h = &cfg.hyper;
    let p = cfg.p();
    let scope = cfg.scope();
    let theta0 = initial_thetas(obj, p, &cfg.init, cfg.seed, &cfg.run_id)?;
    let mut nodes: Vec<NodeState> = theta0
        .into_iter()
        .enumerate()
        .map(|(i, t)| NodeState::new(i, t, crate::rng::NodeRng::new(cfg.seed, &cfg.run_id, i)))
        .collect();
    let mut server = (cfg.protocol == ProtocolKind::ElasticAvg)
        .then(|| crate::params::spatial_mean(&thetas_of(&nodes)).map(ServerState::new))
        .transpose()?;
    let mut clocks = vec![0.0; p];
    let mut sim_time = 0.0;
    let mut log = TraceLog::new(&cfg.run_id, cfg.protocol, cfg.trace_every);
    log.record(obj, &thetas_of(&nodes), 0, 0.0, h.step_size_at(0))?;

    let mut done = 0;
    for round in 0..cfg.steps {
        let comm = h.is_comm_round(round);
        let durations: Vec<f64> = nodes
            .iter_mut()
            .map(|n| apply_straggler(&cfg.straggler, n.id, &mut n.rng.straggler))
            .collect();
        nodes = match cfg.protocol {
            ProtocolKind::AllReduce => protocols::allreduce_round(nodes, obj, &cfg.noise, h, scope)?,
            ProtocolKind::PullGossip => {
                let partners = if comm { protocols::draw_pull_partners(&mut nodes) } else { Vec::new() };
                protocols::pull_gossip_round(nodes, &partners, obj, &cfg.noise, h)?
            }
            ProtocolKind::PushGossip => {
                let targets = if comm { protocols::draw_push_targets(&mut nodes) } else { Vec::new() };
                protocols::push_gossip_round(nodes, &targets, obj, &cfg.noise, h)?
            }
            ProtocolKind::GossipStale => {
                let snapshot = thetas_of(&nodes);
                let partners = if comm {
                    protocols::draw_pull_partners(&mut nodes)
                } else {
                    (0..p).collect()
                };
                nodes
                    .into_iter()
                    .zip(partners)
                    .map(|(n, j)| protocols::gossip_stale_step(n, &snapshot[j], obj, &cfg.noise, h))
                    .collect::<Result<_>>()?
            }
            ProtocolKind::GossipFresh => {
                let partners = comm.then(|| protocols::draw_pull_partners(&mut nodes));
                let stepped = nodes
                    .into_iter()
                    .map(|n| protocols::local_sgd_step(n, obj, &cfg.noise, h))
                    .collect::<Result<Vec<_>>>()?;
                match partners {
                    None => stepped,
                    Some(partners) => {
                        let fresh = thetas_of(&stepped);
                        stepped
                            .into_iter()
                            .zip(partners)
                            .map(|(n, j)| protocols::gossip_fresh_mix(n, &fresh[j], h))
                            .collect::<Result<_>>()?
                    }
                }
            }
            ProtocolKind::ElasticAvg => {
                let srv = server.take().expect("elastic run has a server");
                let view = srv.theta_center.clone();
                let mut srv = srv;
                let mut next = Vec::with_capacity(p);
                for n in nodes {
                    if comm {
                        let (n, update) = protocols::ea_client_step(n, &view, obj, &cfg.noise, h)?;
                        srv = protocols::ea_server_apply(srv, &update)?;
                        next.push(n);
                    } else {
                        next.push(protocols::local_sgd_step(n, obj, &cfg.noise, h)?);
                    }
                }
                server = Some(srv);
                next
            }
            ProtocolKind::AsyncPull => unreachable!("rejected above"),
        };

        if cfg.protocol == ProtocolKind::AllReduce {
            let barrier = clocks
                .iter()
                .zip(&durations)
                .map(|(c, d)| c + d)
                .fold(f64::NEG_INFINITY, f64::max)
                + cfg.latency;
            clocks.iter_mut().for_each(|c| *c = barrier);
            sim_time = barrier;
        } else {
            let exchanges = match cfg.protocol {
                ProtocolKind::ElasticAvg => 2.0,
                _ => 1.0,
            };
            for (c, d) in clocks.iter_mut().zip(&durations) {
                *c += d + if comm { exchanges * cfg.latency } else { 0.0 };
            }
            sim_time = median(&clocks);
        }

        done = round + 1;
        let stop = cfg.max_sim_time.is_some_and(|m| sim_time >= m);
        let last = stop || done == cfg.steps;
        if log.due(done, last) {
            log.record(obj, &thetas_of(&nodes), done, sim_time, h.step_size_at(done))?;
        }
        if stop {
            break;
        }
    }
    Ok(SimRun {
        trace: log.records,
        thetas: thetas_of(&nodes),
        node_clocks: clocks,
        sim_time,
        center: server.map(|s| s.theta_center),
        steps_done: done,
    })
}

/// Master-clock events of asynchronous pull gossip or elastic averaging.
///
/// Each event ticks one uniformly chosen node after an exponential gap.
/// Pull partners are uniform over all nodes (self included), drawn from the
/// ticking node's partner stream. Elastic-averaging server updates land
/// instantly.
pub fn run_async(cfg: &SimConfig) -> Result<SimRun> {
    cfg.validate()?;
    if !matches!(cfg.protocol, ProtocolKind::AsyncPull | ProtocolKind::ElasticAvg) {
        return Err(Error::Unsupported(format!(
            "{} has no asynchronous event model",
            cfg.protocol
        )));
    }
    if cfg.clock.kind != ClockKind::Poisson {
        return Err(Error::Unsupported("the event backend needs a poisson clock".into()));
    }
    let obj: &Objective = &cfg.objective;
    let h = &cfg.hyper;
    let p = cfg.p();
    let theta0 = initial_thetas(obj, p, &cfg.init, cfg.seed, &cfg.run_id)?;
    let mut nodes: Vec<NodeState> = theta0
        .into_iter()
        .enumerate()
        .map(|(i, t)| NodeState::new(i, t, crate::rng::NodeRng::new(cfg.seed, &cfg.run_id, i)))
        .collect();
    let mut server = (cfg.protocol == ProtocolKind::ElasticAvg)
        .then(|| crate::params::spatial_mean(&thetas_of(&nodes)).map(ServerState::new))
        .transpose()?;
    let mut master = derive_stream(cfg.seed, &cfg.run_id, GLOBAL_STREAM, StreamPurpose::Clock);
    let mut clocks = vec![0.0; p];
    let mut sim_time = 0.0;
    let min_alpha = |nodes: &[NodeState]| h.step_size_at(nodes.iter().map(|n| n.t).min().unwrap_or(0));
    let mut log = TraceLog::new(&cfg.run_id, cfg.protocol, cfg.trace_every);
    log.record(obj, &thetas_of(&nodes), 0, 0.0, min_alpha(&nodes))?;

    let mut done = 0;
    for event in 0..cfg.steps {
        let (gap, i) = sample_next_event(&cfg.clock, p, &mut master)?;
        sim_time += gap;
        clocks[i] = sim_time;
        match cfg.protocol {
            ProtocolKind::AsyncPull => {
                let j = nodes[i].rng.partner.random_range(0..p);
                nodes = protocols::async_pull_event(nodes, i, j, obj, &cfg.noise, h)?;
            }
            ProtocolKind::ElasticAvg => {
                let node = nodes.remove(i);
                let node = if h.is_comm_round(node.t) {
                    let srv = server.take().expect("elastic run has a server");
                    let (node, update) =
                        protocols::ea_client_step(node, &srv.theta_center, obj, &cfg.noise, h)?;
                    server = Some(protocols::ea_server_apply(srv, &update)?);
                    node
                } else {
                    protocols::local_sgd_step(node, obj, &cfg.noise, h)?
                };
                nodes.insert(i, node);
            }
            _ => unreachable!("rejected above"),
        }
        done = event + 1;
        let stop = cfg.max_sim_time.is_some_and(|m| sim_time >= m);
        let last = stop || done == cfg.steps;
        if log.due(done, last) {
            log.record(obj, &thetas_of(&nodes), done, sim_time, min_alpha(&nodes))?;
        }
        if stop {
            break;
        }
    }
    Ok(SimRun {
        trace: log.records,
        thetas: thetas_of(&nodes),
        node_clocks: clocks,
        sim_time,
        center: server.map(|s| s.theta_center),
        steps_done: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticObjective;

    fn quad() -> Arc<Objective> {
        Arc::new(QuadraticObjective::new(vec![1.0, 2.0, 5.0, 10.0]).unwrap().into())
    }

    fn cfg(protocol: ProtocolKind, p: usize, steps: u64) -> SimConfig {
        let mut h = Hyperparams::plain(p, 0.05);
        h.beta_gossip = 0.5;
        h.beta_ea = 0.8 / p as f64;
        let noise = NoiseModel::with_total_variance(0.01, 4).unwrap();
        let mut c = SimConfig::new(protocol, h, quad(), noise, steps);
        c.seed = 3;
        c
    }

    #[test]
    fn init_hits_requested_error() {
        let obj = quad();
        let init = InitSpec {
            sq_err: Some(8.0),
            ..InitSpec::default()
        };
        let t = initial_thetas(obj.as_ref(), 8, &init, 0, "x").unwrap();
        let err = crate::params::sum_sq_dist(&t, obj.optimum()).unwrap();
        assert!((err - 8.0).abs() < 1e-12);
    }

    #[test]
    fn allreduce_barrier_time_is_slowest_node() {
        let mut c = cfg(ProtocolKind::AllReduce, 4, 5);
        c.straggler = StragglerModel::ConstantWithOutlier {
            c: 1.0,
            slow_factor: 10.0,
            slow_node: 2,
        };
        let r = run_sync(&c).unwrap();
        assert_eq!(r.sim_time, 50.0);
        assert!(r.trace.iter().all(|t| t.sq_err_consensus == 0.0));

        let mut g = c.clone();
        g.protocol = ProtocolKind::PullGossip;
        let rg = run_sync(&g).unwrap();
        assert!(r.sim_time > rg.sim_time);
        assert_eq!(rg.sim_time, 5.0);
    }

    #[test]
    fn every_sync_protocol_runs_deterministically() {
        for k in [
            ProtocolKind::AllReduce,
            ProtocolKind::PullGossip,
            ProtocolKind::PushGossip,
            ProtocolKind::GossipStale,
            ProtocolKind::GossipFresh,
            ProtocolKind::ElasticAvg,
        ] {
            let c = cfg(k, 4, 50);
            let a = run_sync(&c).unwrap();
            let b = run_sync(&c).unwrap();
            assert_eq!(a.trace, b.trace, "{k}");
            assert_eq!(a.trace.len(), 51);
            let first = a.trace.first().unwrap().sq_err_opt;
            let last = a.trace.last().unwrap().sq_err_opt;
            assert!(last < first, "{k}: {first} -> {last}");
        }
    }

    #[test]
    fn async_backends_run() {
        for k in [ProtocolKind::AsyncPull, ProtocolKind::ElasticAvg] {
            let mut c = cfg(k, 4, 400);
            c.clock = ClockModel::poisson(1.0);
            c.trace_every = 100;
            let r = run(&c).unwrap();
            assert_eq!(r.trace.iter().map(|t| t.t).collect::<Vec<_>>(), vec![0, 100, 200, 300, 400]);
            assert!(r.trace.windows(2).all(|w| w[0].sim_time <= w[1].sim_time));
            assert!(r.trace.last().unwrap().sq_err_opt < r.trace[0].sq_err_opt);
        }
    }

    #[test]
    fn backend_mismatches_are_rejected() {
        let c = cfg(ProtocolKind::AsyncPull, 4, 10);
        assert!(matches!(run_sync(&c), Err(Error::Unsupported(_))));
        let c = cfg(ProtocolKind::PullGossip, 4, 10);
        assert!(matches!(run_async(&c), Err(Error::Unsupported(_))));
        let mut c = cfg(ProtocolKind::AllReduce, 4, 10);
        c.init.jitter = 0.1;
        assert!(run_sync(&c).is_err());
    }

    #[test]
    fn max_sim_time_stops_early() {
        let mut c = cfg(ProtocolKind::PullGossip, 4, 1000);
        c.max_sim_time = Some(10.0);
        let r = run_sync(&c).unwrap();
        assert_eq!(r.steps_done, 10);
        assert_eq!(r.trace.last().unwrap().t, 10);
    }
}
