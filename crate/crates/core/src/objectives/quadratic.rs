use crate::error::{Error, Result};
use crate::params::ParamVec;

use super::GradientOracle;

/// `f(theta) = 1/2 (theta - opt)^T diag(spectrum) (theta - opt)`.
///
/// Curvature bounds are exact: `m = min(spectrum)`, `L = max(spectrum)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    spectrum: Vec<f64>,
    optimum: ParamVec,
    m: f64,
    l: f64,
}

impl QuadraticObjective {
    /// Centered at the origin.
    pub fn new(spectrum: Vec<f64>) -> Result<Self> {
        let dim = spectrum.len();
        if dim == 0 {
            return Err(Error::Empty("quadratic spectrum"));
        }
        Self::with_optimum(spectrum, ParamVec::zeros(dim))
    }

    pub fn with_optimum(spectrum: Vec<f64>, optimum: ParamVec) -> Result<Self> {
        if spectrum.is_empty() {
            return Err(Error::Empty("quadratic spectrum"));
        }
        if let Some(bad) = spectrum.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::invalid(format!(
                "spectrum entries must be positive and finite, got {bad}"
            )));
        }
        if optimum.dim() != spectrum.len() {
            return Err(Error::DimensionMismatch {
                expected: spectrum.len(),
                found: optimum.dim(),
            });
        }
        let m = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        let l = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(QuadraticObjective {
            spectrum,
            optimum,
            m,
            l,
        })
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    fn check(&self, theta: &ParamVec) -> Result<()> {
        self.optimum.check_dim(theta)
    }
}

impl GradientOracle for QuadraticObjective {
    fn dim(&self) -> usize {
        self.spectrum.len()
    }

    fn value(&self, theta: &ParamVec) -> Result<f64> {
        self.check(theta)?;
        Ok(0.5
            * self
                .spectrum
                .iter()
                .zip(theta.as_slice())
                .zip(self.optimum.as_slice())
                .map(|((a, x), o)| a * (x - o) * (x - o))
                .sum::<f64>())
    }

    fn gradient(&self, theta: &ParamVec) -> Result<ParamVec> {
        self.check(theta)?;
        Ok(ParamVec::from_raw(
            self.spectrum
                .iter()
                .zip(theta.as_slice())
                .zip(self.optimum.as_slice())
                .map(|((a, x), o)| a * (x - o))
                .collect(),
        ))
    }

    fn convexity_params(&self) -> (f64, f64) {
        (self.m, self.l)
    }

    fn optimum(&self) -> &ParamVec {
        &self.optimum
    }
}
