//! Experiment configuration: a TOML document with flat sections.
//!
//! ```toml
//! [run]
//! protocol = "pull-gossip"     # required
//! backend = "sim"              # sim | transport
//! steps = 1000                 # rounds, or master-clock events for async runs
//! seed = 0
//! trials = 1
//! trace_every = 1
//! output_dir = "out"
//! emit = ["trace_jsonl", "summary_json"]   # also: bound_report
//! latency = 0.0
//! # max_sim_time = 50.0
//! # momentum_scope = "per-node"            # or "aggregate"
//!
//! [hyper]
//! p = 8                        # required
//! alpha0 = 0.1                 # required
//! # anneal_factor, anneal_at, mu, weight_decay, beta_gossip, beta_ea, tau, b
//!
//! [objective]
//! kind = "quadratic"           # or "logistic" with path, header, l2
//! spectrum = [1.0, 2.0, 5.0, 10.0]
//!
//! [noise]
//! variance = 0.0               # total E|xi|^2
//!
//! [init]                       # sq_err, offset, jitter
//! [clock]                      # kind = "lockstep" | "poisson", rate
//! [straggler]                  # kind = "constant" | "log-normal" | "constant-with-outlier"
//! [bounds]                     # c_factor, lambda_variant
//! [transport]                  # timeout_ms, jitter_us
//! ```
//!
//! Unknown keys anywhere are errors. Omitted hyperparameters take the
//! large-scale training defaults of [`Hyperparams::reference`]; the clock
//! defaults to Poisson for `async-pull` and lock-step otherwise.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{Hyperparams, MomentumScope};
use crate::mixing::LambdaVariant;
use crate::objectives::{load_csv_dataset, GradientOracle, NoiseModel, Objective, QuadraticObjective};
use crate::params::ParamVec;
use crate::protocols::ProtocolKind;
use crate::simulator::{ClockModel, InitSpec, SimConfig, StragglerModel};
use crate::transport::TransportConfig;

/// Environment variable that overrides `run.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GOSSIP_SGD_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Sim,
    Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    TraceJsonl,
    SummaryJson,
    BoundReport,
}

fn de_protocol<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ProtocolKind, D::Error> {
    let name = String::deserialize(d)?;
    name.parse().map_err(|e: Error| serde::de::Error::custom(e))
}

fn default_backend() -> Backend {
    Backend::Sim
}
fn default_steps() -> u64 {
    1000
}
fn default_one_u64() -> u64 {
    1
}
fn default_one_usize() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_emit() -> BTreeSet<Emit> {
    [Emit::TraceJsonl, Emit::SummaryJson].into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(deserialize_with = "de_protocol")]
    pub protocol: ProtocolKind,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one_usize")]
    pub trials: usize,
    #[serde(default = "default_one_u64")]
    pub trace_every: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_emit")]
    pub emit: BTreeSet<Emit>,
    #[serde(default)]
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sim_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_scope: Option<MomentumScope>,
}

/// `[hyper]` as written; `None` falls back to the reference value for `p`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    p: usize,
    alpha0: f64,
    anneal_factor: Option<f64>,
    anneal_at: Option<Vec<u64>>,
    mu: Option<f64>,
    weight_decay: Option<f64>,
    beta_gossip: Option<f64>,
    beta_ea: Option<f64>,
    tau: Option<u64>,
    b: Option<usize>,
}

impl RawHyper {
    fn resolve(self) -> Hyperparams {
        let r = Hyperparams::reference(self.p);
        Hyperparams {
            alpha0: self.alpha0,
            anneal_factor: self.anneal_factor.unwrap_or(r.anneal_factor),
            anneal_at: self.anneal_at.unwrap_or(r.anneal_at),
            mu: self.mu.unwrap_or(r.mu),
            weight_decay: self.weight_decay.unwrap_or(r.weight_decay),
            beta_gossip: self.beta_gossip.unwrap_or(r.beta_gossip),
            beta_ea: self.beta_ea.unwrap_or(r.beta_ea),
            tau: self.tau.unwrap_or(r.tau),
            p: self.p,
            b: self.b.unwrap_or(r.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic {
        spectrum: Vec<f64>,
        /// Defaults to the origin.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        optimum: Option<Vec<f64>>,
    },
    /// `label,f1,...,fd` rows; a relative path resolves against the
    /// working directory.
    Logistic {
        path: PathBuf,
        #[serde(default)]
        header: bool,
        #[serde(default = "default_l2")]
        l2: f64,
    },
}

fn default_l2() -> f64 {
    1e-3
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Quadratic {
            spectrum: vec![1.0, 2.0, 5.0, 10.0],
            optimum: None,
        }
    }
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Objective> {
        match self {
            ObjectiveSpec::Quadratic { spectrum, optimum } => {
                let q = match optimum {
                    Some(o) => QuadraticObjective::with_optimum(spectrum.clone(), ParamVec::new(o.clone())?)?,
                    None => QuadraticObjective::new(spectrum.clone())?,
                };
                Ok(q.into())
            }
            ObjectiveSpec::Logistic { path, header, l2 } => {
                Ok(load_csv_dataset(path, *header, *l2)?.into())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Total gradient-noise variance `E|xi|^2`; zero disables noise.
    #[serde(default)]
    pub variance: f64,
}

fn default_offset() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sq_err: Option<f64>,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            sq_err: None,
            offset: 1.0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockName {
    Lockstep,
    Poisson,
}

fn default_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSection {
    pub kind: ClockName,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClock {
    kind: Option<ClockName>,
    rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StragglerSpec {
    Constant { c: f64 },
    LogNormal { mu: f64, sigma: f64 },
    ConstantWithOutlier { c: f64, slow_factor: f64, slow_node: usize },
}

impl Default for StragglerSpec {
    fn default() -> Self {
        StragglerSpec::Constant { c: 1.0 }
    }
}

impl From<StragglerSpec> for StragglerModel {
    fn from(s: StragglerSpec) -> Self {
        match s {
            StragglerSpec::Constant { c } => StragglerModel::Constant { c },
            StragglerSpec::LogNormal { mu, sigma } => StragglerModel::LogNormal { mu, sigma },
            StragglerSpec::ConstantWithOutlier {
                c,
                slow_factor,
                slow_node,
            } => StragglerModel::ConstantWithOutlier {
                c,
                slow_factor,
                slow_node,
            },
        }
    }
}

fn default_c_factor() -> f64 {
    1.1
}
fn default_variant() -> LambdaVariant {
    LambdaVariant::Theorem
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    /// The consensus bound's C is this times the largest gradient norm seen.
    #[serde(default = "default_c_factor")]
    pub c_factor: f64,
    /// Variant whose consensus result decides the verdict; both are reported.
    #[serde(default = "default_variant")]
    pub lambda_variant: LambdaVariant,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            c_factor: default_c_factor(),
            lambda_variant: default_variant(),
        }
    }
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub jitter_us: u64,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            timeout_ms: default_timeout_ms(),
            jitter_us: 0,
        }
    }
}

/// A validated experiment. Every default is filled in, so [`RunConfig::to_toml`]
/// writes a complete document that parses back to an equal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub hyper: Hyperparams,
    pub objective: ObjectiveSpec,
    pub noise: NoiseSection,
    pub init: InitSection,
    pub clock: ClockSection,
    pub straggler: StragglerSpec,
    pub bounds: BoundsSection,
    pub transport: TransportSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run: RunSection,
    hyper: RawHyper,
    #[serde(default)]
    objective: ObjectiveSpec,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    init: InitSection,
    #[serde(default)]
    clock: RawClock,
    #[serde(default)]
    straggler: StragglerSpec,
    #[serde(default)]
    bounds: BoundsSection,
    #[serde(default)]
    transport: TransportSection,
}

/// Parses and validates a TOML experiment description.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    let default_clock = if raw.run.protocol == ProtocolKind::AsyncPull {
        ClockName::Poisson
    } else {
        ClockName::Lockstep
    };
    let cfg = RunConfig {
        hyper: raw.hyper.resolve(),
        objective: raw.objective,
        noise: raw.noise,
        init: raw.init,
        clock: ClockSection {
            kind: raw.clock.kind.unwrap_or(default_clock),
            rate: raw.clock.rate.unwrap_or(1.0),
        },
        straggler: raw.straggler,
        bounds: raw.bounds,
        transport: raw.transport,
        run: raw.run,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Complete TOML echo; `parse_config(&cfg.to_toml()?) == cfg`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks everything that does not need the objective's data.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::config(other.to_string()),
        };
        let run = &self.run;
        if run.trials < 1 {
            return Err(Error::config("trials must be >= 1"));
        }
        // toml integers are signed 64-bit.
        if run.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed must be <= {}", i64::MAX)));
        }
        if run.emit.contains(&Emit::BoundReport) && run.trials < crate::bounds::MIN_TRIALS {
            return Err(Error::config(format!(
                "bound_report needs at least {} trials, got {}",
                crate::bounds::MIN_TRIALS,
                run.trials
            )));
        }
        if run.backend == Backend::Transport {
            if !run.protocol.supports_transport() {
                return Err(Error::config(format!(
                    "the transport backend does not run {}",
                    run.protocol
                )));
            }
            if self.clock.kind != ClockName::Lockstep {
                return Err(Error::config("the transport backend needs a lockstep clock"));
            }
            if run.max_sim_time.is_some() {
                return Err(Error::config("the transport backend does not support max_sim_time"));
            }
            if self.transport.timeout_ms == 0 {
                return Err(Error::config("transport timeout_ms must be >= 1"));
            }
        }
        if run.protocol == ProtocolKind::AsyncPull && self.clock.kind != ClockName::Poisson {
            return Err(Error::config("async-pull needs a poisson clock"));
        }
        if !(self.bounds.c_factor.is_finite() && self.bounds.c_factor >= 1.0) {
            return Err(Error::config(format!(
                "bounds c_factor must be >= 1, got {}",
                self.bounds.c_factor
            )));
        }
        if let ObjectiveSpec::Quadratic { spectrum, optimum } = &self.objective {
            let q = match optimum {
                Some(o) => QuadraticObjective::with_optimum(spectrum.clone(), ParamVec::new(o.clone()).map_err(cfg_err)?),
                None => QuadraticObjective::new(spectrum.clone()),
            }
            .map_err(cfg_err)?;
            self.sim_config_with(Arc::new(q.into()), "validate")
                .and_then(|c| c.validate())
                .map_err(cfg_err)?;
        } else {
            self.hyper.validate().map_err(cfg_err)?;
        }
        Ok(())
    }

    /// Builds the objective, loading datasets from disk.
    pub fn build_objective(&self) -> Result<Arc<Objective>> {
        Ok(Arc::new(self.objective.build()?))
    }

    /// The simulator configuration of one trial.
    pub fn sim_config_with(&self, objective: Arc<Objective>, run_id: &str) -> Result<SimConfig> {
        let dim = objective.dim();
        let noise = if self.noise.variance == 0.0 {
            NoiseModel::zero(dim)
        } else {
            NoiseModel::with_total_variance(self.noise.variance, dim)?
        };
        let mut sim = SimConfig::new(self.run.protocol, self.hyper.clone(), objective, noise, self.run.steps);
        sim.clock = match self.clock.kind {
            ClockName::Lockstep => ClockModel {
                rate_per_node: self.clock.rate,
                ..ClockModel::lockstep()
            },
            ClockName::Poisson => ClockModel::poisson(self.clock.rate),
        };
        sim.straggler = self.straggler.into();
        sim.latency = self.run.latency;
        sim.max_sim_time = self.run.max_sim_time;
        sim.seed = self.run.seed;
        sim.run_id = run_id.to_string();
        sim.trace_every = self.run.trace_every;
        sim.init = InitSpec {
            sq_err: self.init.sq_err,
            offset: self.init.offset,
            jitter: self.init.jitter,
        };
        sim.momentum_scope = self.run.momentum_scope;
        Ok(sim)
    }

    pub fn transport_config(&self) -> TransportConfig {
        TransportConfig {
            timeout: Duration::from_millis(self.transport.timeout_ms),
            jitter_us: self.transport.jitter_us,
        }
    }

    /// Applies [`OUTPUT_DIR_ENV`] when it is set and non-empty.
    pub fn apply_env_overrides(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.run.output_dir = PathBuf::from(dir);
        }
    }
}
