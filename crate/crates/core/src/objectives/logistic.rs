use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamVec;
use crate::rng::StreamRng;

use super::GradientOracle;

/// Ridge-regularized logistic regression, averaged over samples:
///
/// `f(theta) = (1/n) sum_k [log(1 + exp(x_k.theta)) - y_k x_k.theta] + (l2/2)|theta|^2`
///
/// Certified bounds: `m = l2`, `L = l2 + max_k |x_k|^2 / 4`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    features: Vec<f64>,
    labels: Vec<f64>,
    n: usize,
    dim: usize,
    l2: f64,
    lipschitz: f64,
    optimum: ParamVec,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogisticObjective {
    /// `rows` are feature rows, `labels` are 0 or 1.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u8>, l2: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("logistic dataset"));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: labels.len(),
            });
        }
        if !(l2.is_finite() && l2 > 0.0) {
            return Err(Error::invalid(format!("l2 must be positive, got {l2}")));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Empty("feature rows"));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("feature value".into()));
            }
            features.extend_from_slice(row);
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label must be 0 or 1, got {bad}")));
        }
        let max_row_sq = rows
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max);
        let mut obj = LogisticObjective {
            features,
            labels: labels.into_iter().map(f64::from).collect(),
            n: rows.len(),
            dim,
            l2,
            lipschitz: l2 + 0.25 * max_row_sq,
            optimum: ParamVec::zeros(dim),
        };
        obj.optimum = obj.solve_optimum()?;
        Ok(obj)
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    fn margin(&self, k: usize, theta: &[f64]) -> f64 {
        self.row(k).iter().zip(theta).map(|(x, t)| x * t).sum()
    }

    fn check(&self, theta: &ParamVec) -> Result<()> {
        if theta.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: theta.dim(),
            });
        }
        Ok(())
    }

    /// Gradient of the loss averaged over the given sample indices, plus the
    /// ridge term. Indices may repeat.
    pub fn gradient_on(&self, theta: &ParamVec, indices: &[usize]) -> Result<ParamVec> {
        self.check(theta)?;
        if indices.is_empty() {
            return Err(Error::Empty("minibatch indices"));
        }
        let th = theta.as_slice();
        let mut g: Vec<f64> = th.iter().map(|t| self.l2 * t).collect();
        let w = 1.0 / indices.len() as f64;
        for &k in indices {
            if k >= self.n {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    len: self.n,
                });
            }
            let r = w * (sigmoid(self.margin(k, th)) - self.labels[k]);
            for (gi, x) in g.iter_mut().zip(self.row(k)) {
                *gi += r * x;
            }
        }
        Ok(ParamVec::from_raw(g))
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::<f64>::identity(self.dim, self.dim) * self.l2;
        let w = 1.0 / self.n as f64;
        for k in 0..self.n {
            let s = sigmoid(self.margin(k, theta));
            let c = w * s * (1.0 - s);
            let x = DVector::from_column_slice(self.row(k));
            h.ger(c, &x, &x, 1.0);
        }
        h
    }

    /// Damped Newton with backtracking; the ridge term keeps the Hessian
    /// positive definite.
    fn solve_optimum(&self) -> Result<ParamVec> {
        let mut theta = ParamVec::zeros(self.dim);
        let all: Vec<usize> = (0..self.n).collect();
        for _ in 0..100 {
            let g = self.gradient_on(&theta, &all)?;
            if g.norm_sq().sqrt() < 1e-13 {
                break;
            }
            let h = self.hessian(theta.as_slice());
            let step = h
                .cholesky()
                .ok_or_else(|| Error::NonFinite("logistic hessian not positive definite".into()))?
                .solve(&DVector::from_column_slice(g.as_slice()));
            let f0 = self.value(&theta)?;
            let slope: f64 = g.as_slice().iter().zip(step.iter()).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let cand = ParamVec::from_raw(
                    theta
                        .as_slice()
                        .iter()
                        .zip(step.iter())
                        .map(|(x, s)| x - t * s)
                        .collect(),
                );
                if self.value(&cand)? <= f0 - 1e-4 * t * slope || t < 1e-10 {
                    theta = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        theta.ensure_finite()?;
        Ok(theta)
    }
}

impl GradientOracle for LogisticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &ParamVec) -> Result<f64> {
        self.check(theta)?;
        let th = theta.as_slice();
        let loss: f64 = (0..self.n)
            .map(|k| {
                let z = self.margin(k, th);
                softplus(z) - self.labels[k] * z
            })
            .sum();
        Ok(loss / self.n as f64 + 0.5 * self.l2 * theta.norm_sq())
    }

    fn gradient(&self, theta: &ParamVec) -> Result<ParamVec> {
        let all: Vec<usize> = (0..self.n).collect();
        self.gradient_on(theta, &all)
    }

    fn convexity_params(&self) -> (f64, f64) {
        (self.l2, self.lipschitz)
    }

    fn optimum(&self) -> &ParamVec {
        &self.optimum
    }

    /// Samples `batch` rows uniformly with replacement.
    fn minibatch_gradient(
        &self,
        theta: &ParamVec,
        batch: usize,
        rng: &mut StreamRng,
    ) -> Result<ParamVec> {
        let idx: Vec<usize> = (0..batch.max(1)).map(|_| rng.random_range(0..self.n)).collect();
        self.gradient_on(theta, &idx)
    }
}
