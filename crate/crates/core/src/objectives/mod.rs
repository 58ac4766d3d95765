//! Gradient oracles: strongly convex objectives with known curvature bounds
//! and an additive gradient-noise model.

mod dataset;
mod logistic;
mod noise;
mod quadratic;

pub use dataset::load_csv_dataset;
pub use logistic::LogisticObjective;
pub use noise::{noisy_gradient, NoiseKind, NoiseModel};
pub use quadratic::QuadraticObjective;

use crate::error::Result;
use crate::params::ParamVec;
use crate::rng::StreamRng;

/// A differentiable, m-strongly convex objective with L-Lipschitz gradient.
pub trait GradientOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, theta: &ParamVec) -> Result<f64>;

    /// Exact full gradient.
    fn gradient(&self, theta: &ParamVec) -> Result<ParamVec>;

    /// Certified `(m, L)`: strong-convexity lower bound and gradient
    /// Lipschitz upper bound.
    fn convexity_params(&self) -> (f64, f64);

    /// The minimizer.
    fn optimum(&self) -> &ParamVec;

    /// Gradient of a minibatch of `batch` samples drawn from `rng`.
    ///
    /// Objectives without a finite dataset return the exact gradient and
    /// leave `rng` untouched.
    fn minibatch_gradient(
        &self,
        theta: &ParamVec,
        _batch: usize,
        _rng: &mut StreamRng,
    ) -> Result<ParamVec> {
        self.gradient(theta)
    }
}

/// The objectives the engine can run.
#[derive(Debug, Clone)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Logistic(LogisticObjective),
}

impl Objective {
    fn inner(&self) -> &dyn GradientOracle {
        match self {
            Objective::Quadratic(q) => q,
            Objective::Logistic(l) => l,
        }
    }
}

impl GradientOracle for Objective {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn value(&self, theta: &ParamVec) -> Result<f64> {
        self.inner().value(theta)
    }

    fn gradient(&self, theta: &ParamVec) -> Result<ParamVec> {
        self.inner().gradient(theta)
    }

    fn convexity_params(&self) -> (f64, f64) {
        self.inner().convexity_params()
    }

    fn optimum(&self) -> &ParamVec {
        self.inner().optimum()
    }

    fn minibatch_gradient(
        &self,
        theta: &ParamVec,
        batch: usize,
        rng: &mut StreamRng,
    ) -> Result<ParamVec> {
        self.inner().minibatch_gradient(theta, batch, rng)
    }
}

impl From<QuadraticObjective> for Objective {
    fn from(q: QuadraticObjective) -> Self {
        Objective::Quadratic(q)
    }
}

impl From<LogisticObjective> for Objective {
    fn from(l: LogisticObjective) -> Self {
        Objective::Logistic(l)
    }
}
