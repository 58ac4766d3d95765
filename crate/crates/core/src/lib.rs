//! Distributed SGD protocol engine: synchronous all-reduce, elastic
//! averaging and pull/push gossiping SGD, executed either by a deterministic
//! discrete-event simulator or by an in-process message-passing runtime, with
//! closed-form convergence bounds to validate trace ensembles against.

pub mod bounds;
pub mod config;
pub mod error;
pub mod experiment;
pub mod hyper;
pub mod mixing;
pub mod node;
pub mod objectives;
pub mod params;
pub mod protocols;
pub mod rng;
pub mod simulator;
pub mod transport;

pub use error::{Error, Result};
pub use hyper::{momentum_delta, Hyperparams, MomentumScope};
pub use node::NodeState;
pub use params::{spatial_mean, ParamVec};
