use std::collections::BTreeMap;
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};
use rand::Rng;

use super::collectives::{
    collect_pushes, ea_fetch_center, ea_server_loop, push_param, request_pull, ring_allreduce, serve_pull_book,
    SnapshotBook,
};
use super::endpoint::{mesh, Endpoint};
use super::frame::{Message, MessageKind};
use crate::error::{Error, Result};
use crate::node::NodeState;
use crate::objectives::Objective;
use crate::params::{spatial_mean, ParamVec};
use crate::protocols::{self, draw_push_target, ProtocolKind, ServerState};
use crate::rng::{derive_stream, NodeRng, StreamPurpose, StreamRng};
use crate::simulator::{apply_straggler, initial_thetas, median, ClockKind, SimConfig, SimRun, TraceLog};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    /// Longest any worker waits for a message before failing the run.
    pub timeout: Duration,
    /// Random pre-send sleep bound in microseconds; zero disables it.
    pub jitter_us: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            timeout: Duration::from_secs(10),
            jitter_us: 0,
        }
    }
}

/// A worker's state at a logged step.
struct Report {
    node: usize,
    t: u64,
    theta: ParamVec,
    clock: f64,
    /// Compute draws of the rounds since the previous report.
    durations: Vec<f64>,
}

struct WorkerOutcome {
    theta: ParamVec,
    clock: f64,
}

/// Runs `cfg` with one thread per node exchanging encoded frames.
///
/// Every node replays all nodes' partner streams, so it knows who will pull
/// from or push to it in each round. Pull replies carry the replier's
/// round-boundary snapshot. With those two rules all-reduce, pull and push
/// gossip reproduce the simulator's trace exactly; elastic averaging is
/// genuinely asynchronous here.
pub fn run_transport(cfg: &SimConfig, tcfg: &TransportConfig) -> Result<SimRun> {
    cfg.validate()?;
    if !cfg.protocol.supports_transport() {
        return Err(Error::Unsupported(format!(
            "{} has no message-passing backend",
            cfg.protocol
        )));
    }
    if cfg.clock.kind != ClockKind::Lockstep {
        return Err(Error::Unsupported("the message-passing backend runs lock-step rounds".into()));
    }
    if cfg.max_sim_time.is_some() {
        return Err(Error::Unsupported(
            "max_sim_time is a simulator-only horizon".into(),
        ));
    }
    if cfg.steps > u64::from(u32::MAX) {
        return Err(Error::invalid("round tags are 32-bit; too many steps"));
    }
    let p = cfg.p();
    let obj: &Objective = &cfg.objective;
    let theta0 = initial_thetas(obj, p, &cfg.init, cfg.seed, &cfg.run_id)?;
    let with_server = cfg.protocol == ProtocolKind::ElasticAvg;
    let mut endpoints = mesh(p + usize::from(with_server), tcfg.timeout);
    for ep in &mut endpoints {
        ep.set_jitter(tcfg.jitter_us);
    }
    let server_ep = with_server.then(|| endpoints.pop().expect("server endpoint"));
    let server0 = with_server.then(|| spatial_mean(&theta0)).transpose()?.map(ServerState::new);

    let (tx, rx) = unbounded::<Report>();
    let mut log = TraceLog::new(&cfg.run_id, cfg.protocol, cfg.trace_every);
    let mut collect_err: Option<Error> = None;
    let mut sim_time = 0.0;

    let (outcomes, server) = std::thread::scope(|s| {
        let server_handle = server_ep.zip(server0).map(|(mut ep, srv)| s.spawn(move || ea_server_loop(&mut ep, srv, p)));
        let workers: Vec<_> = endpoints
            .into_iter()
            .zip(theta0)
            .map(|(ep, theta)| {
                let tx = tx.clone();
                s.spawn(move || worker(cfg, ep, theta, tx))
            })
            .collect();
        drop(tx);

        let mut waiting: BTreeMap<u64, Vec<Option<Report>>> = BTreeMap::new();
        let mut barrier = 0.0;
        for report in rx.iter() {
            let t = report.t;
            let node = report.node;
            waiting.entry(t).or_insert_with(|| (0..p).map(|_| None).collect())[node] = Some(report);
            while let Some(entry) = waiting.first_entry() {
                if entry.get().iter().any(Option::is_none) {
                    break;
                }
                let (t, reports) = entry.remove_entry();
                let reports: Vec<Report> = reports.into_iter().map(|r| r.expect("complete")).collect();
                sim_time = if cfg.protocol == ProtocolKind::AllReduce {
                    let rounds = reports[0].durations.len();
                    for k in 0..rounds {
                        let clocks = vec![barrier; p];
                        barrier = clocks
                            .iter()
                            .zip(reports.iter().map(|r| r.durations[k]))
                            .map(|(c, d)| c + d)
                            .fold(f64::NEG_INFINITY, f64::max)
                            + cfg.latency;
                    }
                    barrier
                } else {
                    median(&reports.iter().map(|r| r.clock).collect::<Vec<_>>())
                };
                let thetas: Vec<ParamVec> = reports.into_iter().map(|r| r.theta).collect();
                if collect_err.is_none() {
                    if let Err(e) = log.record(obj, &thetas, t, sim_time, cfg.hyper.step_size_at(t)) {
                        collect_err = Some(e);
                    }
                }
            }
        }
        let outcomes: Vec<Result<WorkerOutcome>> = workers
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::ProtocolViolation("worker panicked".into()))))
            .collect();
        let server = server_handle.map(|h| {
            h.join()
                .unwrap_or_else(|_| Err(Error::ProtocolViolation("server panicked".into())))
        });
        (outcomes, server)
    });

    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let center = server.transpose()?.map(|s| s.theta_center);
    if let Some(e) = collect_err {
        return Err(e);
    }
    Ok(SimRun {
        trace: log.records,
        thetas: outcomes.iter().map(|o| o.theta.clone()).collect(),
        node_clocks: outcomes.iter().map(|o| o.clock).collect(),
        sim_time,
        center,
        steps_done: cfg.steps,
    })
}

fn worker(cfg: &SimConfig, mut ep: Endpoint, theta0: ParamVec, tx: Sender<Report>) -> Result<WorkerOutcome> {
    let i = ep.id();
    let p = cfg.p();
    let h = &cfg.hyper;
    let obj: &Objective = &cfg.objective;
    let noise = &cfg.noise;
    let scope = cfg.scope();
    let every = cfg.trace_every.max(1);
    let mut node = NodeState::new(i, theta0, NodeRng::new(cfg.seed, &cfg.run_id, i));
    let mut partner_streams: Vec<StreamRng> = (0..p)
        .map(|k| derive_stream(cfg.seed, &cfg.run_id, k as u64, StreamPurpose::PartnerChoice))
        .collect();
    let mut book = SnapshotBook::default();
    let mut clock = 0.0;
    let mut durations = Vec::new();
    let exchanges = if cfg.protocol == ProtocolKind::ElasticAvg { 2.0 } else { 1.0 };

    let send_report = |t: u64, node: &NodeState, clock: f64, durations: &mut Vec<f64>| {
        // a closed collector means the run is already failing elsewhere
        let _ = tx.send(Report {
            node: i,
            t,
            theta: node.theta.clone(),
            clock,
            durations: std::mem::take(durations),
        });
    };
    send_report(0, &node, clock, &mut durations);

    for round in 0..cfg.steps {
        let tag = round as u32;
        let comm = h.is_comm_round(round);
        let d = apply_straggler(&cfg.straggler, i, &mut node.rng.straggler);
        node = match cfg.protocol {
            ProtocolKind::AllReduce => {
                let delta = protocols::step_delta(&mut node, obj, noise, h)?;
                let mean = ring_allreduce(&mut ep, p, &delta, tag)?;
                protocols::allreduce_commit(&mut node, &mean, delta, scope)?;
                node
            }
            ProtocolKind::PullGossip => {
                if comm {
                    let partners: Vec<usize> = partner_streams.iter_mut().map(|s| s.random_range(0..p)).collect();
                    let owed = partners.iter().enumerate().filter(|&(k, &j)| j == i && k != i).count();
                    book.insert(tag, node.theta.clone(), owed);
                    let j = partners[i];
                    let other = if j == i {
                        node.theta.clone()
                    } else {
                        request_pull(&mut ep, j, tag, &mut book)?
                    };
                    node.theta = protocols::pull_pair(&node.theta, &other)?;
                }
                serve_pull_book(&mut ep, &mut book)?;
                protocols::local_sgd_step(node, obj, noise, h)?
            }
            ProtocolKind::PushGossip => {
                if comm {
                    let targets: Vec<Option<usize>> = partner_streams
                        .iter_mut()
                        .enumerate()
                        .map(|(k, s)| draw_push_target(s, k, p))
                        .collect();
                    let expected = targets.iter().filter(|t| **t == Some(i)).count();
                    if let Some(j) = targets[i] {
                        push_param(&ep, j, &node.theta, tag)?;
                    }
                    let got = collect_pushes(&mut ep, tag, expected)?;
                    let received: Vec<&ParamVec> = got.iter().map(|(_, x)| x).collect();
                    node.theta = protocols::push_average(&node.theta, &received)?;
                }
                protocols::local_sgd_step(node, obj, noise, h)?
            }
            ProtocolKind::ElasticAvg => {
                if comm {
                    let center = ea_fetch_center(&mut ep, p, tag)?;
                    let (node, update) = protocols::ea_client_step(node, &center, obj, noise, h)?;
                    ep.send(p, &Message::new(MessageKind::EaUpdate, i, tag, update.into_inner()))?;
                    node
                } else {
                    protocols::local_sgd_step(node, obj, noise, h)?
                }
            }
            other => unreachable!("{other} rejected before spawning"),
        };
        durations.push(d);
        clock += d + if comm { exchanges * cfg.latency } else { 0.0 };
        let done = round + 1;
        if done % every == 0 || done == cfg.steps {
            send_report(done, &node, clock, &mut durations);
        }
    }

    while !book.is_empty() {
        serve_pull_book(&mut ep, &mut book)?;
        if !book.is_empty() {
            ep.wait()?;
        }
    }
    if cfg.protocol == ProtocolKind::ElasticAvg {
        ep.send(p, &Message::new(MessageKind::Barrier, i, cfg.steps as u32, Vec::new()))?;
    }
    Ok(WorkerOutcome {
        theta: node.theta,
        clock,
    })
}
