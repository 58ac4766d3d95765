//! Communication matrices, their expected second moments, and the diffusion
//! potential.
//!
//! Every closed-form moment has an exhaustive-enumeration counterpart so the
//! identities can be checked (and printed) rather than trusted.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamVec;

/// Largest `p` for which the `p^p` pull assignments are enumerated.
pub const PULL_ENUMERATION_MAX_P: usize = 5;
/// Largest `p` for which the `p^2` async pairs are enumerated.
pub const ASYNC_ENUMERATION_MAX_P: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    PullM,
    AsyncD,
}

/// The random indices a matrix was built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMeta {
    Pull { assignment: Vec<usize> },
    Async { i: usize, j: usize, beta: f64 },
}

/// A right-stochastic `p x p` mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMatrix {
    entries: DMatrix<f64>,
    kind: MixKind,
    meta: MixMeta,
}

impl MixMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> MixKind {
        self.kind
    }

    pub fn meta(&self) -> &MixMeta {
        &self.meta
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    /// `theta_i <- sum_j entries[i, j] theta_j`.
    pub fn apply(&self, thetas: &[ParamVec]) -> Result<Vec<ParamVec>> {
        let p = self.p();
        if thetas.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: thetas.len(),
            });
        }
        let dim = thetas[0].dim();
        (0..p)
            .map(|i| {
                let mut out = ParamVec::zeros(dim);
                for (j, theta) in thetas.iter().enumerate() {
                    let c = self.entries[(i, j)];
                    if c != 0.0 {
                        out.axpy(c, theta)?;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must be in [0, 1], got {beta}")));
    }
    Ok(())
}

fn check_p(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Empty("mixing over zero nodes"));
    }
    Ok(())
}

/// `M = 1/2 sum_i e_i (e_i + e_{j_i})^T`; `assignment[i]` is node `i`'s
/// partner (0-based).
pub fn pull_matrix(assignment: &[usize], p: usize) -> Result<MixMatrix> {
    check_p(p)?;
    if assignment.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: assignment.len(),
        });
    }
    let mut m = DMatrix::zeros(p, p);
    for (i, &j) in assignment.iter().enumerate() {
        check_index(j, p)?;
        m[(i, i)] += 0.5;
        m[(i, j)] += 0.5;
    }
    Ok(MixMatrix {
        entries: m,
        kind: MixKind::PullM,
        meta: MixMeta::Pull {
            assignment: assignment.to_vec(),
        },
    })
}

/// `D = I + beta e_i (e_j - e_i)^T`: only row `i` mixes.
pub fn async_matrix(i: usize, j: usize, beta: f64, p: usize) -> Result<MixMatrix> {
    check_p(p)?;
    check_index(i, p)?;
    check_index(j, p)?;
    check_beta(beta)?;
    let mut d = DMatrix::identity(p, p);
    if i != j {
        d[(i, i)] = 1.0 - beta;
        d[(i, j)] = beta;
    }
    Ok(MixMatrix {
        entries: d,
        kind: MixKind::AsyncD,
        meta: MixMeta::Async { i, j, beta },
    })
}

fn identity_plus_ones(p: usize, diag: f64, ones: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |r, c| ones + if r == c { diag } else { 0.0 })
}

/// `E[M^T M] = 1/2 (I + 11^T / p)`.
pub fn expected_second_moment_pull(p: usize) -> DMatrix<f64> {
    let pf = p as f64;
    identity_plus_ones(p, 0.5, 0.5 / pf)
}

/// Average of `M^T M` over all `p^p` assignments.
pub fn enumerate_second_moment_pull(p: usize) -> Result<DMatrix<f64>> {
    check_p(p)?;
    if p > PULL_ENUMERATION_MAX_P {
        return Err(Error::Unsupported(format!(
            "pull enumeration is limited to p <= {PULL_ENUMERATION_MAX_P}, got {p}"
        )));
    }
    let total = p.pow(p as u32);
    let mut acc = DMatrix::zeros(p, p);
    let mut assignment = vec![0usize; p];
    for _ in 0..total {
        let m = pull_matrix(&assignment, p)?;
        acc += m.entries.transpose() * &m.entries;
        // base-p odometer
        for digit in assignment.iter_mut() {
            *digit += 1;
            if *digit < p {
                break;
            }
            *digit = 0;
        }
    }
    Ok(acc / total as f64)
}

/// The three expected moments of a random async matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AsyncMoments {
    /// `E[D^T D]`
    pub dtd: DMatrix<f64>,
    /// `E[D^T 1 1^T D]`
    pub dt11td: DMatrix<f64>,
    /// `E[D^T D - (1/p) D^T 1 1^T D]`
    pub consensus_op: DMatrix<f64>,
}

pub fn expected_second_moment_async(p: usize, beta: f64) -> Result<AsyncMoments> {
    check_p(p)?;
    check_beta(beta)?;
    let pf = p as f64;
    let c = 2.0 * beta * (1.0 - beta);
    let b2 = 2.0 * beta * beta;
    let dtd = identity_plus_ones(p, 1.0 - c / pf, c / (pf * pf));
    let dt11td = identity_plus_ones(p, b2 / pf, 1.0 - b2 / (pf * pf));
    let consensus_op = &dtd - &dt11td / pf;
    Ok(AsyncMoments {
        dtd,
        dt11td,
        consensus_op,
    })
}

/// Average over all `p^2` equally likely `(i, j)` pairs.
pub fn enumerate_second_moment_async(p: usize, beta: f64) -> Result<AsyncMoments> {
    check_p(p)?;
    check_beta(beta)?;
    if p > ASYNC_ENUMERATION_MAX_P {
        return Err(Error::Unsupported(format!(
            "async enumeration is limited to p <= {ASYNC_ENUMERATION_MAX_P}, got {p}"
        )));
    }
    let ones = DMatrix::from_element(p, p, 1.0);
    let mut dtd = DMatrix::zeros(p, p);
    let mut dt11td = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let d = async_matrix(i, j, beta, p)?.entries;
            let dt = d.transpose();
            dtd += &dt * &d;
            dt11td += &dt * &ones * &d;
        }
    }
    let n = (p * p) as f64;
    dtd /= n;
    dt11td /= n;
    let consensus_op = &dtd - &dt11td / p as f64;
    Ok(AsyncMoments {
        dtd,
        dt11td,
        consensus_op,
    })
}

/// Which of the two contraction factors for the async consensus error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaVariant {
    /// `1 - 2 beta (1 - beta) / p - 2 beta^2 / p`
    Theorem,
    /// `1 - 2 beta (1 - beta) / p - 2 beta^2 / p^2`, the nonzero eigenvalue
    /// of the consensus operator.
    Diagonalization,
}

impl LambdaVariant {
    pub const BOTH: [LambdaVariant; 2] = [LambdaVariant::Theorem, LambdaVariant::Diagonalization];
}

pub fn contraction_lambda(p: usize, beta: f64, variant: LambdaVariant) -> f64 {
    let pf = p as f64;
    let base = 1.0 - 2.0 * beta * (1.0 - beta) / pf;
    let theorem = base - 2.0 * beta * beta / pf;
    let diag = base - 2.0 * beta * beta / (pf * pf);
    if (theorem - diag).abs() > 1e-12 {
        log::warn!(
            "contraction factor variants differ at p={p}, beta={beta}: theorem {theorem}, diagonalization {diag}"
        );
    }
    match variant {
        LambdaVariant::Theorem => theorem,
        LambdaVariant::Diagonalization => diag,
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Contribution weights `v[i, j]` of node `j`'s initial value in node `i`,
/// and their row sums `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    v: DMatrix<f64>,
    w: DVector<f64>,
}

impl WeightState {
    /// Every node owns only its own value.
    pub fn identity(p: usize) -> Self {
        Self::from_weights(DMatrix::identity(p, p))
    }

    pub fn from_weights(v: DMatrix<f64>) -> Self {
        let w = v.column_sum();
        WeightState { v, w }
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }
}

/// `Phi = sum_i sum_j |v_ij theta_j - (1/p) sum_j' v_ij' theta_j'|^2`,
/// evaluated exactly as written (no outer normalization).
pub fn diffusion_potential(ws: &WeightState, theta0: &[ParamVec]) -> Result<f64> {
    let p = ws.p();
    if theta0.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: theta0.len(),
        });
    }
    let dim = theta0[0].dim();
    for t in theta0 {
        if t.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: t.dim(),
            });
        }
    }
    let pf = p as f64;
    let mut phi = 0.0;
    let mut row_mean = vec![0.0; dim];
    for i in 0..p {
        row_mean.iter_mut().for_each(|x| *x = 0.0);
        for (j, t) in theta0.iter().enumerate() {
            let c = ws.v[(i, j)] / pf;
            for (m, x) in row_mean.iter_mut().zip(t.as_slice()) {
                *m += c * x;
            }
        }
        for (j, t) in theta0.iter().enumerate() {
            let c = ws.v[(i, j)];
            phi += t
                .as_slice()
                .iter()
                .zip(&row_mean)
                .map(|(x, m)| (c * x - m).powi(2))
                .sum::<f64>();
        }
    }
    Ok(phi)
}

/// `v <- mix v`.
pub fn evolve_weights(ws: &WeightState, mix: &MixMatrix) -> Result<WeightState> {
    if mix.p() != ws.p() {
        return Err(Error::DimensionMismatch {
            expected: ws.p(),
            found: mix.p(),
        });
    }
    Ok(WeightState::from_weights(&mix.entries * &ws.v))
}

/// Closed-form versus enumerated moments and eigenstructure for one `(p, beta)`.
#[derive(Debug, Clone, Serialize)]
pub struct MixingDiagnostics {
    pub p: usize,
    pub beta: f64,
    /// `None` when `p` is past the enumeration limit.
    pub pull_moment_max_err: Option<f64>,
    pub async_dtd_max_err: Option<f64>,
    pub async_dt11td_max_err: Option<f64>,
    pub pull_moment_eigenvalues: Vec<f64>,
    pub async_dtd_eigenvalues: Vec<f64>,
    pub consensus_op_eigenvalues: Vec<f64>,
    pub lambda_theorem: f64,
    pub lambda_diagonalization: f64,
}

pub fn diagnose(p: usize, beta: f64) -> Result<MixingDiagnostics> {
    let pull = expected_second_moment_pull(p);
    let asy = expected_second_moment_async(p, beta)?;
    let pull_err = (p <= PULL_ENUMERATION_MAX_P)
        .then(|| enumerate_second_moment_pull(p).map(|e| max_abs_diff(&e, &pull)))
        .transpose()?;
    let enumerated = (p <= ASYNC_ENUMERATION_MAX_P)
        .then(|| enumerate_second_moment_async(p, beta))
        .transpose()?;
    Ok(MixingDiagnostics {
        p,
        beta,
        pull_moment_max_err: pull_err,
        async_dtd_max_err: enumerated.as_ref().map(|e| max_abs_diff(&e.dtd, &asy.dtd)),
        async_dt11td_max_err: enumerated.as_ref().map(|e| max_abs_diff(&e.dt11td, &asy.dt11td)),
        pull_moment_eigenvalues: symmetric_eigenvalues(&pull),
        async_dtd_eigenvalues: symmetric_eigenvalues(&asy.dtd),
        consensus_op_eigenvalues: symmetric_eigenvalues(&asy.consensus_op),
        lambda_theorem: contraction_lambda(p, beta, LambdaVariant::Theorem),
        lambda_diagonalization: contraction_lambda(p, beta, LambdaVariant::Diagonalization),
    })
}
