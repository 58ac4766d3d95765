//! Dense parameter vectors and the spatial mean across nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector of model parameters.
///
/// The dimension is fixed at construction and never changes through
/// arithmetic. Constructors reject empty and non-finite input; arithmetic
/// itself does not re-check finiteness, so long-running loops call
/// [`ParamVec::ensure_finite`] at their own checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector must have dim >= 1"));
        }
        let v = ParamVec(values);
        v.ensure_finite()?;
        Ok(v)
    }

    /// # Panics
    /// If `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        Self::from_elem(dim, 0.0)
    }

    /// # Panics
    /// If `dim == 0`.
    pub fn from_elem(dim: usize, value: f64) -> Self {
        assert!(dim >= 1, "parameter vector must have dim >= 1");
        ParamVec(vec![value; dim])
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        ParamVec(values)
    }

    pub fn scalar(value: f64) -> Self {
        ParamVec(vec![value])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::NonFinite(format!(
                "coordinate {k} is {}",
                self.0[k]
            ))),
        }
    }

    pub fn check_dim(&self, other: &ParamVec) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVec) -> Result<ParamVec> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|x| factor * x).collect())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVec) -> Result<()> {
        self.check_dim(x)?;
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += a * xi;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, x: &ParamVec) -> Result<()> {
        self.check_dim(x)?;
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += xi;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVec) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    pub fn dist_sq(&self, other: &ParamVec) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// `self + beta * (target - self)`, coordinate-wise.
    ///
    /// When `target == self` the result is `self` bit-for-bit, which the
    /// degeneration guarantees of the gossip steps rely on.
    pub fn move_toward(&self, target: &ParamVec, beta: f64) -> Result<ParamVec> {
        self.zip_map(target, |a, b| a + beta * (b - a))
    }

    fn zip_map(&self, other: &ParamVec, f: impl Fn(f64, f64) -> f64) -> Result<ParamVec> {
        self.check_dim(other)?;
        Ok(ParamVec(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }
}

impl TryFrom<Vec<f64>> for ParamVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVec::new(values)
    }
}

impl From<ParamVec> for Vec<f64> {
    fn from(v: ParamVec) -> Self {
        v.0
    }
}

/// Coordinate-wise arithmetic mean of the node parameters.
///
/// Evaluated as `x_0 + (1/p) * sum_i (x_i - x_0)` so that a set of identical
/// vectors averages to exactly that vector; the all-reduce consensus
/// invariant is checked for exact zero.
pub fn spatial_mean(thetas: &[ParamVec]) -> Result<ParamVec> {
    let first = thetas.first().ok_or(Error::Empty("spatial_mean of no vectors"))?;
    let p = thetas.len() as f64;
    let mut acc = vec![0.0; first.dim()];
    for theta in &thetas[1..] {
        first.check_dim(theta)?;
        for ((a, x), x0) in acc.iter_mut().zip(theta.as_slice()).zip(first.as_slice()) {
            *a += x - x0;
        }
    }
    Ok(ParamVec(
        first
            .as_slice()
            .iter()
            .zip(&acc)
            .map(|(x0, a)| x0 + a / p)
            .collect(),
    ))
}

/// `sum_i ||theta_i - target||^2`
pub fn sum_sq_dist(thetas: &[ParamVec], target: &ParamVec) -> Result<f64> {
    thetas.iter().map(|t| t.dist_sq(target)).sum()
}
