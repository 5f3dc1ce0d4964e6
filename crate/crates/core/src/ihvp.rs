//! Inverse-Hessian-vector products `t = (H + damping I)^{-1} v` by dense
//! Cholesky, conjugate gradient, or LiSSA stochastic estimation.
//!
//! [`IhvpSolver`] prepares whatever can be shared across right-hand sides
//! (the dense factorization, the LiSSA scale) so influence scoring can solve
//! once per test point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{self, Cholesky, DenseHessian, DEFAULT_DAMPING};
use crate::error::{InfluenceError, Result};
use crate::fingerprint;
use crate::linalg;
use crate::oracle::{DenseMatrix, HvpOracle, Shifted, StochasticHessian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Cg,
    Lissa,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Exact => "exact",
            SolverKind::Cg => "cg",
            SolverKind::Lissa => "lissa",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IhvpConfig {
    pub solver: SolverKind,
    /// Added to the Hessian diagonal for every solver (LiSSA's beta).
    pub damping: f64,
    /// Damping tried when the configured damping leaves the dense Hessian
    /// non-positive-definite; it is raised tenfold until the factorization
    /// succeeds or `max_fallback_damping` is passed. `None` disables it.
    pub fallback_damping: Option<f64>,
    pub max_fallback_damping: f64,
    pub cg_tol: f64,
    /// Defaults to the parameter count.
    pub cg_max_iters: Option<usize>,
    pub lissa_depth: usize,
    /// LiSSA scale gamma; defaults to `2 * |top eigenvalue| + damping`.
    pub lissa_scale: Option<f64>,
    pub lissa_repeats: usize,
    pub lissa_seed: u64,
    /// On divergence, LiSSA is retried with gamma doubled up to this many
    /// times. Zero keeps divergence an error.
    pub lissa_max_rescales: usize,
    pub dense_cap: usize,
}

impl Default for IhvpConfig {
    fn default() -> Self {
        IhvpConfig {
            solver: SolverKind::Exact,
            damping: 0.0,
            fallback_damping: Some(DEFAULT_DAMPING),
            max_fallback_damping: 0.1,
            cg_tol: 1e-10,
            cg_max_iters: None,
            lissa_depth: 5_000,
            lissa_scale: None,
            lissa_repeats: 10,
            lissa_seed: 0,
            lissa_max_rescales: 0,
            dense_cap: curvature::DEFAULT_DENSE_CAP,
        }
    }
}

impl IhvpConfig {
    pub fn with_solver(solver: SolverKind) -> Self {
        IhvpConfig {
            solver,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            problems.push(format!("damping must be non-negative, got {}", self.damping));
        }
        if let Some(f) = self.fallback_damping {
            if !(f > 0.0 && f.is_finite()) {
                problems.push(format!("fallback_damping must be positive, got {f}"));
            }
        }
        match self.solver {
            SolverKind::Exact => {}
            SolverKind::Cg => {
                if !(self.cg_tol > 0.0) {
                    problems.push(format!("cg_tol must be positive, got {}", self.cg_tol));
                }
                if self.cg_max_iters == Some(0) {
                    problems.push("cg_max_iters must be at least 1".into());
                }
            }
            SolverKind::Lissa => {
                if self.lissa_depth == 0 {
                    problems.push("lissa_depth must be at least 1".into());
                }
                if self.lissa_repeats == 0 {
                    problems.push("lissa_repeats must be at least 1".into());
                }
                if let Some(g) = self.lissa_scale {
                    if !(g > 0.0 && g.is_finite()) {
                        problems.push(format!("lissa_scale must be positive, got {g}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(InfluenceError::InvalidConfig(problems))
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::short_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhvpResult {
    pub t: Vec<f64>,
    /// `||(H + damping I) t - v||` where it is computed (exact and CG).
    pub residual_norm: Option<f64>,
    pub solver_used: SolverKind,
    pub damping_used: f64,
    /// CG iterations or LiSSA recursion depth.
    pub iterations_or_depth: usize,
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Dense solve of `(H + damping I) t = v`.
pub fn ihvp_exact(h: &DenseHessian, v: &[f64], damping: f64) -> Result<IhvpResult> {
    let damped = curvature::damp(h, damping)?;
    let t = curvature::solve_dense(&damped, v)?;
    let residual = linalg::distance(&damped.matrix.matvec(&t), v);
    Ok(IhvpResult {
        t,
        residual_norm: Some(residual),
        solver_used: SolverKind::Exact,
        damping_used: damped.damping_applied,
        iterations_or_depth: 1,
        converged: true,
        diagnostics: BTreeMap::new(),
    })
}

const CG_STALL_LIMIT: usize = 10;

/// Conjugate gradient on `(oracle + damping I) t = v` from `t = 0`.
///
/// Stops at `||r|| <= cg_tol * ||v||` or after `cg_max_iters` (reported via
/// `converged = false`). Non-positive curvature along a search direction or
/// ten consecutive non-decreasing residuals are reported as
/// [`InfluenceError::CgFailure`].
pub fn ihvp_cg(oracle: &dyn HvpOracle, v: &[f64], config: &IhvpConfig) -> Result<IhvpResult> {
    let p = oracle.dim();
    if v.len() != p {
        return Err(InfluenceError::DimensionMismatch {
            what: "right-hand side",
            expected: p,
            got: v.len(),
        });
    }
    let op = Shifted {
        inner: oracle,
        shift: config.damping,
    };
    let max_iters = config.cg_max_iters.unwrap_or(p).max(1);
    let v_norm = linalg::norm(v);
    let mut t = vec![0.0; p];
    if v_norm == 0.0 {
        return Ok(IhvpResult {
            t,
            residual_norm: Some(0.0),
            solver_used: SolverKind::Cg,
            damping_used: config.damping,
            iterations_or_depth: 0,
            converged: true,
            diagnostics: BTreeMap::new(),
        });
    }
    let target = config.cg_tol * v_norm;
    let mut r = v.to_vec();
    let mut dir = r.clone();
    let mut rs = linalg::dot(&r, &r);
    let mut prev_residual = rs.sqrt();
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let a_dir = op.apply(&dir);
        let curvature = linalg::dot(&dir, &a_dir);
        if !(curvature > 0.0) {
            return Err(InfluenceError::CgFailure {
                iterations,
                reason: format!("non-positive curvature d^T H d = {curvature:e}"),
            });
        }
        let alpha = rs / curvature;
        linalg::axpy(alpha, &dir, &mut t);
        linalg::axpy(-alpha, &a_dir, &mut r);
        let rs_new = linalg::dot(&r, &r);
        let residual = rs_new.sqrt();
        if residual <= target {
            converged = true;
            break;
        }
        if residual >= prev_residual {
            stalled += 1;
            if stalled >= CG_STALL_LIMIT {
                return Err(InfluenceError::CgFailure {
                    iterations,
                    reason: format!(
                        "residual non-decreasing for {CG_STALL_LIMIT} consecutive iterations"
                    ),
                });
            }
        } else {
            stalled = 0;
        }
        prev_residual = residual;
        let beta = rs_new / rs;
        rs = rs_new;
        for (d, ri) in dir.iter_mut().zip(&r) {
            *d = ri + beta * *d;
        }
    }
    if !linalg::all_finite(&t) {
        return Err(InfluenceError::CgFailure {
            iterations,
            reason: "non-finite iterate".into(),
        });
    }
    let true_residual = linalg::distance(&op.apply(&t), v);
    Ok(IhvpResult {
        t,
        residual_norm: Some(true_residual),
        solver_used: SolverKind::Cg,
        damping_used: config.damping,
        iterations_or_depth: iterations,
        converged,
        diagnostics: BTreeMap::from([("relative_residual".to_string(), true_residual / v_norm)]),
    })
}

const LISSA_BLOWUP: f64 = 1e8;

/// Default LiSSA scale: `2 * |dominant eigenvalue of H| + damping`.
pub fn default_lissa_scale(oracle: &dyn HvpOracle, damping: f64, seed: u64) -> (f64, f64) {
    let top = curvature::top_eigenvalue(oracle, 1e-8, 1_000, seed).value;
    (2.0 * top.abs() + damping, top)
}

fn lissa_seed(seed: u64, repeat: usize) -> u64 {
    seed ^ (repeat as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `lissa_repeats` recursions
/// `t_k = v + (I - (H_i + damping I) / gamma) t_{k-1}`, `t_0 = v`, with one
/// uniformly sampled component `H_i` per step, and returns the mean final
/// iterate divided by `gamma`.
pub fn ihvp_lissa_with_scale(
    problem: &dyn StochasticHessian,
    v: &[f64],
    config: &IhvpConfig,
    gamma: f64,
) -> Result<IhvpResult> {
    let p = problem.dim();
    if v.len() != p {
        return Err(InfluenceError::DimensionMismatch {
            what: "right-hand side",
            expected: p,
            got: v.len(),
        });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(InfluenceError::InvalidInput(format!(
            "LiSSA scale must be positive, got {gamma}"
        )));
    }
    let n = problem.num_components();
    let depth = config.lissa_depth;
    let damping = config.damping;
    let limit = LISSA_BLOWUP * linalg::norm(v).max(f64::MIN_POSITIVE);
    let runs: Vec<Result<Vec<f64>>> = (0..config.lissa_repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(lissa_seed(config.lissa_seed, r));
            let mut t = v.to_vec();
            for k in 1..=depth {
                let i = rng.random_range(0..n);
                let ht = problem.component_apply(i, &t);
                for j in 0..p {
                    t[j] = v[j] + t[j] - (ht[j] + damping * t[j]) / gamma;
                }
                let norm = linalg::norm(&t);
                if !(norm <= limit) {
                    return Err(InfluenceError::LissaDivergence {
                        depth: k,
                        gamma,
                        norm,
                    });
                }
            }
            Ok(t)
        })
        .collect();
    let mut mean = vec![0.0; p];
    let repeats = config.lissa_repeats as f64;
    for run in runs {
        linalg::axpy(1.0 / repeats, &run?, &mut mean);
    }
    linalg::scale(1.0 / gamma, &mut mean);
    Ok(IhvpResult {
        t: mean,
        residual_norm: None,
        solver_used: SolverKind::Lissa,
        damping_used: damping,
        iterations_or_depth: depth,
        converged: true,
        diagnostics: BTreeMap::from([
            ("gamma".to_string(), gamma),
            ("repeats".to_string(), repeats),
        ]),
    })
}

/// LiSSA with `config.lissa_scale`, or the default scale when unset.
pub fn ihvp_lissa(problem: &dyn StochasticHessian, v: &[f64], config: &IhvpConfig) -> Result<IhvpResult> {
    let gamma = match config.lissa_scale {
        Some(g) => g,
        None => default_lissa_scale(problem, config.damping, config.lissa_seed).0,
    };
    ihvp_lissa_with_scale(problem, v, config, gamma)
}

enum Prepared {
    Exact {
        matrix: DenseMatrix,
        chol: Cholesky,
        damping: f64,
    },
    Cg,
    Lissa {
        gamma: f64,
        top_eigenvalue: Option<f64>,
    },
}

/// A solver bound to one Hessian, reusable across right-hand sides.
pub struct IhvpSolver<'a> {
    problem: &'a dyn StochasticHessian,
    config: IhvpConfig,
    prepared: Prepared,
}

impl std::fmt::Debug for IhvpSolver<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IhvpSolver")
            .field("config", &self.config)
            .field("damping_used", &self.damping_used())
            .finish()
    }
}

impl<'a> IhvpSolver<'a> {
    pub fn new(problem: &'a dyn StochasticHessian, config: &IhvpConfig) -> Result<Self> {
        config.validate()?;
        let prepared = match config.solver {
            SolverKind::Exact => {
                let h = curvature::assemble_hessian(problem, config.dense_cap)?;
                Self::factor_with_fallback(h, config)?
            }
            SolverKind::Cg => Prepared::Cg,
            SolverKind::Lissa => match config.lissa_scale {
                Some(gamma) => Prepared::Lissa {
                    gamma,
                    top_eigenvalue: None,
                },
                None => {
                    let (gamma, top) =
                        default_lissa_scale(problem, config.damping, config.lissa_seed);
                    Prepared::Lissa {
                        gamma,
                        top_eigenvalue: Some(top),
                    }
                }
            },
        };
        Ok(IhvpSolver {
            problem,
            config: config.clone(),
            prepared,
        })
    }

    /// Uses an already assembled (undamped) dense Hessian for the exact solver.
    pub fn from_dense(
        problem: &'a dyn StochasticHessian,
        hessian: &DenseHessian,
        config: &IhvpConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.solver != SolverKind::Exact {
            return Self::new(problem, config);
        }
        Ok(IhvpSolver {
            problem,
            config: config.clone(),
            prepared: Self::factor_with_fallback(hessian.matrix.clone(), config)?,
        })
    }

    fn factor_with_fallback(h: DenseMatrix, config: &IhvpConfig) -> Result<Prepared> {
        let attempt = |damping: f64| -> Result<Prepared> {
            let damped = curvature::damp(&DenseHessian::from_matrix(h.clone()), damping)?;
            let chol = Cholesky::factor(&damped.matrix)?;
            Ok(Prepared::Exact {
                matrix: damped.matrix,
                chol,
                damping,
            })
        };
        let mut result = attempt(config.damping);
        let Some(mut damping) = config.fallback_damping else {
            return result;
        };
        while matches!(result, Err(InfluenceError::NotPositiveDefinite { .. }))
            && damping <= config.max_fallback_damping * (1.0 + 1e-12)
        {
            if damping > config.damping {
                result = attempt(damping);
            }
            damping *= 10.0;
        }
        result
    }

    pub fn config(&self) -> &IhvpConfig {
        &self.config
    }

    /// The damping that solves actually use (after any fallback).
    pub fn damping_used(&self) -> f64 {
        match &self.prepared {
            Prepared::Exact { damping, .. } => *damping,
            _ => self.config.damping,
        }
    }

    pub fn solve(&self, v: &[f64]) -> Result<IhvpResult> {
        match &self.prepared {
            Prepared::Exact {
                matrix,
                chol,
                damping,
            } => {
                if v.len() != matrix.n {
                    return Err(InfluenceError::DimensionMismatch {
                        what: "right-hand side",
                        expected: matrix.n,
                        got: v.len(),
                    });
                }
                let t = chol.solve_refined(matrix, v);
                let residual = linalg::distance(&matrix.matvec(&t), v);
                Ok(IhvpResult {
                    t,
                    residual_norm: Some(residual),
                    solver_used: SolverKind::Exact,
                    damping_used: *damping,
                    iterations_or_depth: 1,
                    converged: true,
                    diagnostics: BTreeMap::new(),
                })
            }
            Prepared::Cg => ihvp_cg(self.problem, v, &self.config),
            Prepared::Lissa {
                gamma,
                top_eigenvalue,
            } => {
                let mut scale = *gamma;
                let mut rescales = 0;
                let mut out = loop {
                    match ihvp_lissa_with_scale(self.problem, v, &self.config, scale) {
                        Err(InfluenceError::LissaDivergence { .. })
                            if rescales < self.config.lissa_max_rescales =>
                        {
                            rescales += 1;
                            scale *= 2.0;
                        }
                        other => break other?,
                    }
                };
                out.diagnostics.insert("rescales".into(), rescales as f64);
                if let Some(top) = top_eigenvalue {
                    out.diagnostics.insert("top_eigenvalue".into(), *top);
                }
                Ok(out)
            }
        }
    }
}
