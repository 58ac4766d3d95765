//! Acceptance suite: one PASS/FAIL line per criterion, each with a pinned
//! tolerance and a wall-clock limit. Runs without the libtest harness so the
//! lines always reach stdout; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use gossip_sgd::config::parse_config;
use gossip_sgd::experiment::{run_experiment, BoundReport, ExitStatus};
use gossip_sgd::mixing::{
    contraction_lambda, diffusion_potential, enumerate_second_moment_async, enumerate_second_moment_pull,
    evolve_weights, expected_second_moment_async, expected_second_moment_pull, pull_matrix,
    symmetric_eigenvalues, LambdaVariant, WeightState,
};
use gossip_sgd::objectives::{GradientOracle, LogisticObjective, NoiseModel, Objective, QuadraticObjective};
use gossip_sgd::protocols::{
    async_pull_event, gossip_fresh_step, gossip_stale_step, local_sgd_step, pull_mix, step_delta, ProtocolKind,
};
use gossip_sgd::rng::{derive_stream, NodeRng, StreamPurpose};
use gossip_sgd::simulator::{self, initial_thetas, sample_next_event, ClockModel, InitSpec, SimConfig, StragglerModel, TraceRecord};
use gossip_sgd::transport::{mesh, ring_allreduce, run_transport, TransportConfig};
use gossip_sgd::{Hyperparams, NodeState, ParamVec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Max entry error of enumerated versus closed-form moments.
const MOMENT_TOL: f64 = 1e-12;
/// Slack on eigenvalue interval endpoints.
const EIG_TOL: f64 = 1e-10;
/// Standard errors of slack on Monte-Carlo bound checks.
const SE_SLACK: f64 = 3.0;
/// Per-round contraction ceiling `(1 - 2 alpha mL/(m+L)) + 0.01` at alpha 0.1, m = L = 1.
const RATE_CEILING: f64 = 0.91;
/// Ring all-reduce error allowance per node.
const RING_TOL_PER_NODE: f64 = 1e-12;
/// Poisson gap-mean acceptance in standard errors.
const GAP_SIGMAS: f64 = 4.0;
/// Chi-square significance level for ticking-node uniformity.
const CHI_SQ_LEVEL: f64 = 0.001;
/// Consensus reduction required of gossip-only rounds.
const DIFFUSION_FACTOR: f64 = 1e-6;
/// Allowed increase of the ensemble-mean diffusion potential, relative to its start.
const PHI_TOL: f64 = 1e-12;
/// Relative finite-difference error ceiling.
const FD_TOL: f64 = 1e-5;
/// Slack on the strong-convexity inequality.
const CONVEXITY_SLACK: f64 = 1e-9;
/// Required all-reduce to gossip sim-time ratio under one 10x straggler.
const STRAGGLER_RATIO: f64 = 5.0;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ones(p: usize) -> DMatrix<f64> {
    DMatrix::from_element(p, p, 1.0)
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn c1_moment_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in 2..=5usize {
        let pf = p as f64;
        let oracle = (DMatrix::identity(p, p) + ones(p) / pf) * 0.5;
        let e = enumerate_second_moment_pull(p).map_err(|e| e.to_string())?;
        let closed = expected_second_moment_pull(p);
        let err = max_diff(&e, &oracle).max(max_diff(&closed, &oracle));
        worst = worst.max(err);
        ensure(err <= MOMENT_TOL, || format!("pull p={p}: error {err:e}"))?;
    }
    for p in 2..=8usize {
        let pf = p as f64;
        for beta in [0.1, 0.5, 0.9] {
            let c = 2.0 * beta * (1.0 - beta);
            let dtd = DMatrix::identity(p, p) * (1.0 - c / pf) + ones(p) * (c / (pf * pf));
            // 1^T D = 1^T + beta (e_j - e_i)^T, and E[(e_j - e_i)(e_j - e_i)^T] = (2/p)(I - 11^T/p).
            let dt11td = ones(p) + (DMatrix::identity(p, p) - ones(p) / pf) * (2.0 * beta * beta / pf);
            let e = enumerate_second_moment_async(p, beta).map_err(|e| e.to_string())?;
            let closed = expected_second_moment_async(p, beta).map_err(|e| e.to_string())?;
            for (name, got) in [
                ("DtD enumerated", &e.dtd),
                ("DtD closed", &closed.dtd),
                ("Dt11tD enumerated", &e.dt11td),
                ("Dt11tD closed", &closed.dt11td),
            ] {
                let want = if name.starts_with("DtD") { &dtd } else { &dt11td };
                let err = max_diff(got, want);
                worst = worst.max(err);
                ensure(err <= MOMENT_TOL, || format!("{name} p={p} beta={beta}: error {err:e}"))?;
            }
        }
    }
    Ok(format!("max entry error {worst:.2e}"))
}

fn c2_eigenstructure() -> Outcome {
    for p in 2..=8usize {
        let pf = p as f64;
        let eig = symmetric_eigenvalues(&expected_second_moment_pull(p));
        ensure(eig.iter().all(|&l| (0.5 - EIG_TOL..=1.0 + EIG_TOL).contains(&l)), || {
            format!("pull p={p}: eigenvalues {eig:?} leave [1/2, 1]")
        })?;
        for beta in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let m = expected_second_moment_async(p, beta).map_err(|e| e.to_string())?;
            let lo = 1.0 - 2.0 * beta * (1.0 - beta) / pf;
            let eig = symmetric_eigenvalues(&m.dtd);
            ensure(eig.iter().all(|&l| (lo - EIG_TOL..=1.0 + EIG_TOL).contains(&l)), || {
                format!("DtD p={p} beta={beta}: eigenvalues {eig:?} leave [{lo}, 1]")
            })?;
            let cons = symmetric_eigenvalues(&m.consensus_op);
            let min_abs = cons.iter().map(|l| l.abs()).fold(f64::INFINITY, f64::min);
            ensure(min_abs <= EIG_TOL, || format!("consensus op p={p} beta={beta}: no zero eigenvalue in {cons:?}"))?;
            let image = &m.consensus_op * DVector::from_element(p, 1.0);
            ensure(image.amax() <= EIG_TOL, || {
                format!("consensus op p={p} beta={beta}: ones vector maps to {image:?}")
            })?;
        }
    }
    Ok("p in 2..=8, five beta values".into())
}

struct EnsembleCheck {
    points: usize,
    worst_ratio: f64,
}

/// Independent check of `mean <= bound(t) + 3 SE` on every logged `t`.
fn check_ensemble(
    traces: &[Vec<TraceRecord>],
    quantity: fn(&TraceRecord) -> f64,
    bound: impl Fn(u64) -> f64,
) -> Result<EnsembleCheck, String> {
    let n = traces.len() as f64;
    let mut worst: f64 = 0.0;
    for idx in 0..traces[0].len() {
        let t = traces[0][idx].t;
        let xs: Vec<f64> = traces.iter().map(|tr| quantity(&tr[idx])).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let limit = bound(t) + SE_SLACK * sd / n.sqrt();
        worst = worst.max(mean / limit);
        ensure(mean <= limit, || {
            format!("t={t}: mean {mean:.6e} exceeds bound {:.6e} + 3 SE = {limit:.6e}", bound(t))
        })?;
    }
    Ok(EnsembleCheck {
        points: traces[0].len(),
        worst_ratio: worst,
    })
}

fn reference_run(protocol: &str, steps: u64, trace_every: u64) -> Result<(Vec<Vec<TraceRecord>>, BoundReport), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = format!(
        "[run]\nprotocol = \"{protocol}\"\nsteps = {steps}\nseed = 2016\ntrials = 200\ntrace_every = {trace_every}\n\
         output_dir = {:?}\nemit = [\"bound_report\"]\n\
         [hyper]\np = 8\nalpha0 = 0.05\nmu = 0.0\nweight_decay = 0.0\nbeta_gossip = 0.5\n\
         [objective]\nkind = \"quadratic\"\nspectrum = [1.0, 2.0, 5.0, 10.0]\n\
         [noise]\nvariance = 0.01\n[init]\nsq_err = 8.0\n",
        dir.path().to_str().unwrap()
    );
    let cfg = parse_config(&text).map_err(|e| e.to_string())?;
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let report = out.bound_report.ok_or("no bound report")?;
    Ok((out.traces, report))
}

const KAPPA: f64 = 10.0 / 11.0;
const ALPHA: f64 = 0.05;
const SIGMA_SQ: f64 = 0.01;
const P: f64 = 8.0;

fn c3_sync_theorem() -> Outcome {
    let (traces, report) = reference_run("pull-gossip", 2000, 1)?;
    let init = 8.0;
    ensure((traces[0][0].sq_err_opt - init).abs() < 1e-12, || format!("initial error {}", traces[0][0].sq_err_opt))?;
    let floor = P * ALPHA * SIGMA_SQ / (2.0 * KAPPA);
    let check = check_ensemble(&traces, |r| r.sq_err_opt, |t| (1.0 - 2.0 * ALPHA * KAPPA).powf(t as f64) * init + floor)?;
    ensure(report.pass, || format!("library report disagrees: {report:?}"))?;
    Ok(format!("{} points, worst mean/(bound+3SE) {:.4}", check.points, check.worst_ratio))
}

fn c4_async_theorem() -> Outcome {
    let (traces, report) = reference_run("async-pull", 20_000, 100)?;
    let init = 8.0;
    let floor = P * ALPHA * SIGMA_SQ / (2.0 * KAPPA);
    let lambda_theorem = 1.0 - 2.0 * 0.5 * 0.5 / P - 2.0 * 0.25 / P;
    let lambda_diag = 1.0 - 2.0 * 0.5 * 0.5 / P - 2.0 * 0.25 / (P * P);
    ensure(contraction_lambda(8, 0.5, LambdaVariant::Theorem) == lambda_theorem, || "lambda_theorem formula".into())?;
    let g_max = traces.iter().map(|t| t.last().unwrap().max_grad_norm).fold(0.0, f64::max);
    let c = 1.1 * g_max;
    let consensus = |lambda: f64| {
        let rate = lambda * (1.0 - ALPHA * 1.0 / P);
        let init_cons = traces.iter().map(|t| t[0].sq_err_consensus).sum::<f64>() / traces.len() as f64;
        move |t: u64| rate.powf(t as f64) * init_cons + lambda * ALPHA * ALPHA * (c * c + SIGMA_SQ) / (1.0 - rate)
    };
    let diag = check_ensemble(&traces, |r| r.sq_err_consensus, consensus(lambda_diag));
    let diag_note = match &diag {
        Ok(c) => format!("lambda_diag consensus pass (worst {:.4})", c.worst_ratio),
        Err(e) => format!("lambda_diag consensus fail ({e})"),
    };
    let lib_diag = report.checks.iter().find(|c| c.lambda_variant == Some(LambdaVariant::Diagonalization));
    ensure(lib_diag.is_some_and(|c| c.pass == diag.is_ok()), || "report lacks a matching lambda_diag result".into())?;

    let cons = check_ensemble(&traces, |r| r.sq_err_consensus, consensus(lambda_theorem))
        .map_err(|e| format!("consensus (lambda_theorem): {e}; {diag_note}"))?;
    let opt = check_ensemble(
        &traces,
        |r| r.sq_err_opt,
        |t| (1.0 - 2.0 * ALPHA / P * KAPPA).powf(t as f64) * init + floor,
    )
    .map_err(|e| format!("optimality: {e}; consensus (lambda_theorem) pass, worst {:.4}; {diag_note}", cons.worst_ratio))?;
    ensure(report.pass, || format!("library report disagrees: {report:?}"))?;
    Ok(format!(
        "optimality worst {:.4}, consensus worst {:.4} over {} points; {diag_note}",
        opt.worst_ratio, cons.worst_ratio, opt.points
    ))
}

fn c5_noiseless_rate() -> Outcome {
    let obj: Arc<Objective> = Arc::new(QuadraticObjective::new(vec![1.0]).map_err(|e| e.to_string())?.into());
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut cfg = SimConfig::new(ProtocolKind::PullGossip, Hyperparams::plain(8, 0.1), obj.clone(), NoiseModel::zero(1), 200);
        cfg.seed = seed;
        cfg.init = InitSpec {
            sq_err: None,
            offset: 1.0,
            jitter: 1.0,
        };
        let run = simulator::run(&cfg).map_err(|e| e.to_string())?;
        let e10 = run.trace[10].sq_err_opt;
        let e200 = run.trace[200].sq_err_opt;
        let rate = (e200 / e10).powf(1.0 / 190.0);
        worst = worst.max(rate);
        ensure(rate <= RATE_CEILING, || format!("seed {seed}: mean contraction {rate:.6}"))?;
    }
    Ok(format!("worst geometric-mean contraction {worst:.6} (ceiling {RATE_CEILING})"))
}

fn c6_degeneration() -> Outcome {
    let obj: Arc<Objective> = Arc::new(
        QuadraticObjective::with_optimum(vec![1.0, 3.0, 7.0], ParamVec::new(vec![0.5, -1.0, 2.0]).unwrap())
            .map_err(|e| e.to_string())?
            .into(),
    );
    let noise = NoiseModel::with_total_variance(0.3, 3).map_err(|e| e.to_string())?;
    let mut h = Hyperparams::plain(1, 0.05);
    h.mu = 0.9;
    h.weight_decay = 1e-3;
    h.anneal_at = vec![30];
    h.anneal_factor = 0.5;
    let steps = 60u64;
    let seed = 77;
    let run_id = "degenerate";
    let init = InitSpec::default();
    let sgd = |scale: f64| -> Result<Vec<ParamVec>, String> {
        let theta = initial_thetas(obj.as_ref(), 1, &init, seed, run_id).map_err(|e| e.to_string())?.remove(0);
        let mut node = NodeState::new(0, theta, NodeRng::new(seed, run_id, 0));
        let mut path = vec![node.theta.clone()];
        for _ in 0..steps {
            if scale == 1.0 {
                node = local_sgd_step(node, obj.as_ref(), &noise, &h).map_err(|e| e.to_string())?;
            } else {
                let d = step_delta(&mut node, obj.as_ref(), &noise, &h).map_err(|e| e.to_string())?;
                node.theta.axpy(scale, &d).map_err(|e| e.to_string())?;
                node.delta_prev = d;
                node.t += 1;
            }
            path.push(node.theta.clone());
        }
        Ok(path)
    };
    let plain = sgd(1.0)?;
    let scaled = sgd(1.0 - h.beta_gossip)?;
    let oracle_err = |path: &[ParamVec]| -> Vec<u64> {
        path.iter().map(|t| t.dist_sq(obj.optimum()).unwrap().to_bits()).collect()
    };
    let protocols = [
        ProtocolKind::AllReduce,
        ProtocolKind::PullGossip,
        ProtocolKind::PushGossip,
        ProtocolKind::GossipStale,
        ProtocolKind::GossipFresh,
        ProtocolKind::AsyncPull,
    ];
    for protocol in protocols {
        let mut cfg = SimConfig::new(protocol, h.clone(), obj.clone(), noise.clone(), steps);
        cfg.seed = seed;
        cfg.run_id = run_id.into();
        let run = simulator::run(&cfg).map_err(|e| e.to_string())?;
        let want = if protocol == ProtocolKind::AsyncPull { &scaled } else { &plain };
        ensure(run.thetas[0] == *want.last().unwrap(), || {
            format!("{protocol}: final {:?} != sequential {:?}", run.thetas[0], want.last().unwrap())
        })?;
        let got: Vec<u64> = run.trace.iter().map(|r| r.sq_err_opt.to_bits()).collect();
        ensure(got == oracle_err(want), || format!("{protocol}: trace differs from sequential SGD"))?;
    }

    // beta = 0: each gossip step is a plain step, whatever the partner holds.
    let mut h0 = h.clone();
    h0.beta_gossip = 0.0;
    let partner = ParamVec::new(vec![9.0, -9.0, 4.0]).unwrap();
    let fresh_node = |i: usize| NodeState::new(i, ParamVec::new(vec![1.0, 2.0, 3.0]).unwrap(), NodeRng::new(5, "beta0", i as u64 as usize));
    for k in 0..10 {
        let reference = local_sgd_step(fresh_node(k), obj.as_ref(), &noise, &h0).map_err(|e| e.to_string())?;
        let stale = gossip_stale_step(fresh_node(k), &partner, obj.as_ref(), &noise, &h0).map_err(|e| e.to_string())?;
        let fresh = gossip_fresh_step(fresh_node(k), &partner, obj.as_ref(), &noise, &h0).map_err(|e| e.to_string())?;
        let nodes = vec![fresh_node(k), NodeState::new(99, partner.clone(), NodeRng::new(5, "beta0", 99))];
        let asy = async_pull_event(nodes, 0, 1, obj.as_ref(), &noise, &h0).map_err(|e| e.to_string())?;
        for (name, got) in [("stale", &stale.theta), ("fresh", &fresh.theta), ("async", &asy[0].theta)] {
            ensure(*got == reference.theta, || format!("beta=0 {name} step differs: {got:?} vs {:?}", reference.theta))?;
        }
    }
    Ok("six protocols at p=1 and three beta=0 steps bit-identical".into())
}

fn c7_allreduce_exactness() -> Outcome {
    let p = 8;
    let dim = 4096;
    let mut worst: f64 = 0.0;
    for run in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let locals: Vec<ParamVec> = (0..p)
            .map(|_| ParamVec::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap())
            .collect();
        let direct: Vec<f64> = (0..dim).map(|k| locals.iter().map(|v| v.as_slice()[k]).sum::<f64>() / p as f64).collect();
        let endpoints = mesh(p, Duration::from_secs(10));
        let results: Vec<ParamVec> = thread::scope(|s| {
            let handles: Vec<_> = endpoints
                .into_iter()
                .zip(&locals)
                .map(|(mut ep, local)| {
                    ep.set_jitter(1 + run % 25);
                    s.spawn(move || ring_allreduce(&mut ep, p, local, run as u32).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in &results[1..] {
            ensure(r.as_slice().iter().zip(results[0].as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("run {run}: nodes disagree")
            })?;
        }
        let err = results[0].as_slice().iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err <= RING_TOL_PER_NODE * p as f64, || format!("run {run}: error {err:e}"))?;
    }

    let obj: Arc<Objective> = Arc::new(QuadraticObjective::new(vec![1.0, 2.0, 5.0, 10.0]).unwrap().into());
    let mut cfg = SimConfig::new(ProtocolKind::AllReduce, Hyperparams::reference(8), obj, NoiseModel::with_total_variance(0.1, 4).unwrap(), 100);
    cfg.hyper.alpha0 = 0.05;
    let tcfg = TransportConfig {
        jitter_us: 10,
        ..TransportConfig::default()
    };
    for (name, trace) in [
        ("transport", run_transport(&cfg, &tcfg).map_err(|e| e.to_string())?.trace),
        ("simulator", simulator::run(&cfg).map_err(|e| e.to_string())?.trace),
    ] {
        ensure(trace.len() == 101 && trace.iter().all(|r| r.sq_err_consensus == 0.0), || {
            format!("{name}: nonzero consensus error in an all-reduce trace")
        })?;
    }
    Ok(format!("50 jittered runs, max error vs direct mean {worst:.2e}"))
}

fn c8_poisson_fidelity() -> Outcome {
    let p = 8usize;
    let n = 100_000usize;
    let clock = ClockModel::poisson(1.0);
    let mut rng = derive_stream(8, "poisson", u64::MAX, StreamPurpose::Clock);
    let mut sum = 0.0;
    let mut counts = vec![0u64; p];
    for _ in 0..n {
        let (gap, node) = sample_next_event(&clock, p, &mut rng).map_err(|e| e.to_string())?;
        sum += gap;
        counts[node] += 1;
    }
    let mean = sum / n as f64;
    let expect = 1.0 / p as f64;
    let allowed = GAP_SIGMAS * expect / (n as f64).sqrt();
    ensure((mean - expect).abs() <= allowed, || format!("mean gap {mean} vs {expect} +- {allowed}"))?;
    let e = n as f64 / p as f64;
    let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p_value = 1.0 - ChiSquared::new((p - 1) as f64).unwrap().cdf(chi);
    ensure(p_value > CHI_SQ_LEVEL, || format!("chi-square {chi:.3}, p-value {p_value:.2e}"))?;
    Ok(format!("mean gap {mean:.6} (target {expect}), chi-square {chi:.3}, p-value {p_value:.3}"))
}

fn c9_diffusion() -> Outcome {
    let p = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta0: Vec<ParamVec> = (0..p)
        .map(|_| ParamVec::new((0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap())
        .collect();
    let consensus = |t: &[ParamVec]| -> f64 {
        let mean = gossip_sgd::spatial_mean(t).unwrap();
        t.iter().map(|x| x.dist_sq(&mean).unwrap()).sum()
    };
    let mut slowest = 0;
    for trial in 0..20 {
        let initial = consensus(&theta0);
        let mut thetas = theta0.clone();
        let mut reached = None;
        for round in 1..=200 {
            let partners: Vec<usize> = (0..p).map(|_| rng.random_range(0..p)).collect();
            thetas = pull_mix(&thetas, &partners).map_err(|e| e.to_string())?;
            if consensus(&thetas) < DIFFUSION_FACTOR * initial {
                reached = Some(round);
                break;
            }
        }
        let round = reached.ok_or_else(|| format!("trial {trial}: consensus error above 1e-6 of initial after 200 rounds"))?;
        slowest = slowest.max(round);
    }

    // Rows mix independently, so E[phi'] given v is the average over the p cyclic
    // partner shifts: each shift pairs every row i with every k exactly once overall.
    let expected_next = |ws: &WeightState| -> Result<f64, String> {
        let mut acc = 0.0;
        for s in 0..p {
            let shift: Vec<usize> = (0..p).map(|i| (i + s) % p).collect();
            let next = evolve_weights(ws, &pull_matrix(&shift, p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            acc += diffusion_potential(&next, &theta0).map_err(|e| e.to_string())?;
        }
        Ok(acc / p as f64)
    };
    let trials = 1000;
    let rounds = 30;
    let mut phi_sum = vec![0.0; rounds + 1];
    let mut cond_sum = vec![0.0; rounds];
    let mut worst_step = f64::NEG_INFINITY;
    for _ in 0..trials {
        let mut ws = WeightState::identity(p);
        let mut phi = diffusion_potential(&ws, &theta0).map_err(|e| e.to_string())?;
        phi_sum[0] += phi;
        for r in 0..rounds {
            let cond = expected_next(&ws)?;
            worst_step = worst_step.max(cond - phi);
            ensure(cond <= phi + PHI_TOL * phi_sum[0].max(phi), || {
                format!("round {r}: expected next potential {cond} exceeds current {phi}")
            })?;
            cond_sum[r] += cond;
            let partners: Vec<usize> = (0..p).map(|_| rng.random_range(0..p)).collect();
            ws = evolve_weights(&ws, &pull_matrix(&partners, p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            phi = diffusion_potential(&ws, &theta0).map_err(|e| e.to_string())?;
            phi_sum[r + 1] += phi;
        }
    }
    let phi: Vec<f64> = phi_sum.iter().map(|s| s / trials as f64).collect();
    let cond: Vec<f64> = cond_sum.iter().map(|s| s / trials as f64).collect();
    for r in 0..rounds {
        ensure(cond[r] <= phi[r] + PHI_TOL * phi[0], || {
            format!("ensemble-mean potential rises at round {r}: {} -> {}", phi[r], cond[r])
        })?;
    }
    // Sampled means carry O(distance) noise against an O(distance^2) decrement, so
    // late rounds may tick up; reported, not asserted.
    let sampled_rises = (0..rounds).filter(|&r| phi[r + 1] > phi[r]).count();
    Ok(format!(
        "consensus below 1e-6 within {slowest} rounds; mean potential {:.4} -> {:.4} over {rounds} rounds, \
         largest conditional step {worst_step:.2e}, sampled-mean rises {sampled_rises}/{rounds}",
        phi[0], phi[rounds]
    ))
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ParamVec {
    ParamVec::new((0..dim).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect()).unwrap()
}

fn c10_gradient_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let quad: Objective = QuadraticObjective::with_optimum(vec![1.0, 2.0, 5.0, 10.0], random_vec(&mut rng, 4, 1.0))
        .unwrap()
        .into();
    let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let labels: Vec<u8> = (0..60).map(|_| rng.random_range(0..2u8)).collect();
    let logistic: Objective = LogisticObjective::new(rows, labels, 0.05).unwrap().into();
    let mut worst_fd: f64 = 0.0;
    let mut worst_gap = f64::INFINITY;
    for (name, obj) in [("quadratic", &quad), ("logistic", &logistic)] {
        let dim = obj.dim();
        for _ in 0..100 {
            let x = random_vec(&mut rng, dim, 2.0);
            let g = obj.gradient(&x).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..dim)
                .map(|k| {
                    let mut up = x.as_slice().to_vec();
                    let mut dn = x.as_slice().to_vec();
                    up[k] += h;
                    dn[k] -= h;
                    let fu = obj.value(&ParamVec::new(up).unwrap()).unwrap();
                    let fdn = obj.value(&ParamVec::new(dn).unwrap()).unwrap();
                    (fu - fdn) / (2.0 * h)
                })
                .collect();
            let diff = fd.iter().zip(g.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rel = diff / g.norm_sq().sqrt().max(1.0);
            worst_fd = worst_fd.max(rel);
            ensure(rel < FD_TOL, || format!("{name}: finite-difference relative error {rel:e}"))?;
        }
        let (m, l) = obj.convexity_params();
        for _ in 0..100 {
            let x = random_vec(&mut rng, dim, 2.0);
            let y = random_vec(&mut rng, dim, 2.0);
            let gx = obj.gradient(&x).unwrap();
            let gy = obj.gradient(&y).unwrap();
            let dg = gx.sub(&gy).unwrap();
            let dx = x.sub(&y).unwrap();
            let lhs = dg.dot(&dx).unwrap();
            let rhs = m * l / (m + l) * dx.norm_sq() + dg.norm_sq() / (m + l);
            worst_gap = worst_gap.min(lhs - rhs);
            ensure(lhs >= rhs - CONVEXITY_SLACK, || format!("{name}: {lhs} < {rhs}"))?;
        }
    }
    Ok(format!("worst FD error {worst_fd:.2e}, smallest convexity margin {worst_gap:.2e}"))
}

fn c11_straggler() -> Outcome {
    let obj: Arc<Objective> = Arc::new(QuadraticObjective::new(vec![1.0, 2.0, 5.0, 10.0]).unwrap().into());
    let straggler = StragglerModel::ConstantWithOutlier {
        c: 1.0,
        slow_factor: 10.0,
        slow_node: 3,
    };
    let rounds = 200;
    let time = |protocol| -> Result<f64, String> {
        let mut cfg = SimConfig::new(protocol, Hyperparams::plain(8, 0.05), obj.clone(), NoiseModel::with_total_variance(0.01, 4).unwrap(), rounds);
        cfg.straggler = straggler;
        cfg.latency = 0.05;
        let run = simulator::run(&cfg).map_err(|e| e.to_string())?;
        ensure(run.steps_done == rounds, || format!("{protocol}: only {} rounds", run.steps_done))?;
        Ok(run.sim_time)
    };
    let barrier = time(ProtocolKind::AllReduce)?;
    let gossip = time(ProtocolKind::PullGossip)?;
    let ratio = barrier / gossip;
    ensure(ratio >= STRAGGLER_RATIO, || format!("all-reduce {barrier} vs gossip median {gossip}: ratio {ratio:.3}"))?;
    Ok(format!("all-reduce {barrier:.1} vs gossip median {gossip:.1}: ratio {ratio:.2}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("mixing-moment identities", c1_moment_identities, Duration::from_secs(5)),
        ("eigenstructure", c2_eigenstructure, Duration::from_secs(1)),
        ("sync theorem validation", c3_sync_theorem, Duration::from_secs(120)),
        ("async theorem validation", c4_async_theorem, Duration::from_secs(180)),
        ("noiseless linear rate", c5_noiseless_rate, Duration::from_secs(10)),
        ("degeneration equivalences", c6_degeneration, Duration::from_secs(5)),
        ("all-reduce exactness", c7_allreduce_exactness, Duration::from_secs(30)),
        ("poisson model fidelity", c8_poisson_fidelity, Duration::from_secs(10)),
        ("diffusion decay", c9_diffusion, Duration::from_secs(10)),
        ("gradient oracles", c10_gradient_oracles, Duration::from_secs(5)),
        ("straggler effect", c11_straggler, Duration::from_secs(30)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f, limit)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *limit => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:.0?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("acceptance {id:>2} PASS [{name}] {elapsed:.2?}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id:>2} FAIL [{name}] {elapsed:.2?}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    let _ = ExitStatus::Success;
}
