//! Dense Hessians for small parameter counts, damping, Cholesky solves and
//! power iteration for the dominant eigenvalue.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{InfluenceError, Result};
use crate::fingerprint;
use crate::linalg;
use crate::nn::{ModelSpec, Objective};
use crate::oracle::{DenseMatrix, HvpOracle, MlpProblem};

pub const DEFAULT_DENSE_CAP: usize = 2_000;
pub const DEFAULT_DAMPING: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHessian {
    pub matrix: DenseMatrix,
    /// Total damping added so far.
    pub damping_applied: f64,
    pub theta_fingerprint: String,
}

impl DenseHessian {
    pub fn from_matrix(matrix: DenseMatrix) -> Self {
        DenseHessian {
            matrix,
            damping_applied: 0.0,
            theta_fingerprint: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.n
    }
}

fn theta_fingerprint(theta: &[f64]) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|t| t.to_bits().to_le_bytes()).collect();
    fingerprint::sha256_hex(&bytes)
}

/// Assembles `H` column by column from `oracle` applied to the standard
/// basis, then symmetrizes `(H + H^T) / 2`.
pub fn assemble_hessian(oracle: &dyn HvpOracle, cap: usize) -> Result<DenseMatrix> {
    let p = oracle.dim();
    if p > cap {
        return Err(InfluenceError::HessianTooLarge { p, cap });
    }
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| oracle.apply(&linalg::unit_vector(p, j)))
        .collect();
    let mut data = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            data[i * p + j] = 0.5 * (columns[j][i] + columns[i][j]);
        }
    }
    Ok(DenseMatrix { n: p, data })
}

/// Hessian of the full objective (data term plus decay) at `theta`.
pub fn exact_hessian(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[crate::nn::Example],
    obj: &Objective,
) -> Result<DenseHessian> {
    exact_hessian_with_cap(spec, theta, data, obj, DEFAULT_DENSE_CAP)
}

pub fn exact_hessian_with_cap(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[crate::nn::Example],
    obj: &Objective,
    cap: usize,
) -> Result<DenseHessian> {
    let problem = MlpProblem::new(spec, theta, data, obj)?;
    Ok(DenseHessian {
        matrix: assemble_hessian(&problem, cap)?,
        damping_applied: 0.0,
        theta_fingerprint: theta_fingerprint(theta),
    })
}

/// `H + damping * I`.
pub fn damp(h: &DenseHessian, damping: f64) -> Result<DenseHessian> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(InfluenceError::InvalidInput(format!(
            "damping must be non-negative, got {damping}"
        )));
    }
    let mut out = h.clone();
    if damping != 0.0 {
        let n = out.matrix.n;
        for i in 0..n {
            out.matrix.data[i * n + i] += damping;
        }
    }
    out.damping_applied += damping;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration from a seeded Gaussian start. Stops once successive
/// Rayleigh quotients differ by at most `tol * (1 + |lambda|)`; hitting
/// `max_iters` returns the last estimate with `converged = false`.
pub fn top_eigenvalue(oracle: &dyn HvpOracle, tol: f64, max_iters: usize, seed: u64) -> EigenEstimate {
    let p = oracle.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = linalg::norm(&v);
    linalg::scale(1.0 / n0, &mut v);
    let mut previous = f64::NAN;
    let mut rayleigh = 0.0;
    for it in 1..=max_iters {
        let w = oracle.apply(&v);
        rayleigh = linalg::dot(&v, &w);
        let norm = linalg::norm(&w);
        if norm == 0.0 || !norm.is_finite() {
            return EigenEstimate {
                value: rayleigh,
                iterations: it,
                converged: norm == 0.0,
            };
        }
        if (rayleigh - previous).abs() <= tol * (1.0 + rayleigh.abs()) {
            return EigenEstimate {
                value: rayleigh,
                iterations: it,
                converged: true,
            };
        }
        previous = rayleigh;
        v = w;
        linalg::scale(1.0 / norm, &mut v);
    }
    EigenEstimate {
        value: rayleigh,
        iterations: max_iters,
        converged: false,
    }
}

/// Lower-triangular Cholesky factor `L` with `H = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(h: &DenseMatrix) -> Result<Self> {
        let n = h.n;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = h.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(InfluenceError::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let d = diag.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = h.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Solve followed by one round of iterative refinement against `h`.
    pub fn solve_refined(&self, h: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let mut t = self.solve(b);
        let residual = linalg::sub(b, &h.matvec(&t));
        let correction = self.solve(&residual);
        linalg::axpy(1.0, &correction, &mut t);
        t
    }
}

/// Solves `H t = v` for symmetric positive-definite `H`.
pub fn solve_dense(h: &DenseHessian, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != h.dim() {
        return Err(InfluenceError::DimensionMismatch {
            what: "right-hand side",
            expected: h.dim(),
            got: v.len(),
        });
    }
    let chol = Cholesky::factor(&h.matrix)?;
    Ok(chol.solve_refined(&h.matrix, v))
}
