use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVec;
use crate::rng::StreamRng;

use super::GradientOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    Zero,
}

/// Additive zero-mean gradient noise.
///
/// `total_variance` is `E[xi^T xi]`, the quantity the convergence bounds
/// call sigma squared; each coordinate has standard deviation `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    sigma: f64,
    total_variance: f64,
    dim: usize,
}

impl NoiseModel {
    pub fn zero(dim: usize) -> Self {
        NoiseModel {
            kind: NoiseKind::Zero,
            sigma: 0.0,
            total_variance: 0.0,
            dim,
        }
    }

    /// Gaussian noise with per-coordinate standard deviation `sigma`.
    pub fn gaussian(sigma: f64, dim: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        if dim == 0 {
            return Err(Error::Empty("noise dimension"));
        }
        Ok(NoiseModel {
            kind: NoiseKind::Gaussian,
            sigma,
            total_variance: sigma * sigma * dim as f64,
            dim,
        })
    }

    /// Gaussian noise whose coordinate variances sum to `total_variance`.
    pub fn with_total_variance(total_variance: f64, dim: usize) -> Result<Self> {
        if !(total_variance.is_finite() && total_variance >= 0.0) {
            return Err(Error::invalid(format!(
                "noise variance must be >= 0, got {total_variance}"
            )));
        }
        if dim == 0 {
            return Err(Error::Empty("noise dimension"));
        }
        Ok(NoiseModel {
            kind: NoiseKind::Gaussian,
            sigma: (total_variance / dim as f64).sqrt(),
            total_variance,
            dim,
        })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn is_silent(&self) -> bool {
        self.kind == NoiseKind::Zero || self.sigma == 0.0
    }

    /// Adds one noise draw to `grad` in place. Zero noise consumes nothing
    /// from `rng`.
    pub fn perturb(&self, grad: &mut ParamVec, rng: &mut StreamRng) -> Result<()> {
        if grad.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: grad.dim(),
            });
        }
        if self.is_silent() {
            return Ok(());
        }
        for g in grad.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *g += self.sigma * z;
        }
        Ok(())
    }
}

/// `grad f(theta) + xi` with `xi` drawn from `noise` on the caller's stream.
pub fn noisy_gradient(
    obj: &dyn GradientOracle,
    noise: &NoiseModel,
    theta: &ParamVec,
    rng: &mut StreamRng,
) -> Result<ParamVec> {
    let mut g = obj.gradient(theta)?;
    noise.perturb(&mut g, rng)?;
    Ok(g)
}
