//! Matrix-free second-order oracles.
//!
//! [`HvpOracle`] is a symmetric linear map given only through products.
//! [`StochasticHessian`] additionally exposes it as a mean of components so
//! LiSSA can sample one component per step. [`ErmProblem`] is everything an
//! influence computation needs: parameters, per-example training gradients and
//! the Hessian of the training objective.

use crate::error::{InfluenceError, Result};
use crate::linalg;
use crate::nn::{self, Example, ModelSpec, Objective, Workspace};

pub trait HvpOracle: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

/// A Hessian that is the mean of `num_components()` terms.
pub trait StochasticHessian: HvpOracle {
    fn num_components(&self) -> usize;
    /// Component `i` applied to `v`; the mean over `i` equals [`HvpOracle::apply`].
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64>;
}

/// Empirical-risk problem at a fixed parameter vector.
pub trait ErmProblem: StochasticHessian {
    fn params(&self) -> &[f64];
    fn num_train(&self) -> usize;
    /// Gradient of training example `i`'s loss, without regularization.
    fn train_gradient(&self, i: usize) -> Vec<f64>;
}

impl<T: HvpOracle + ?Sized> HvpOracle for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (**self).apply(v)
    }
}

/// Row-major symmetric matrix used as an explicit oracle. As the Hessian of
/// the quadratic `0.5 * theta^T A theta` it is the exact-arithmetic test hook
/// for the second-order machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(InfluenceError::DimensionMismatch {
                what: "dense matrix entries",
                expected: n * n,
                got: data.len(),
            });
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, x) in d.iter().enumerate() {
            data[i * n + i] = *x;
        }
        DenseMatrix { n, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| linalg::dot(self.row(i), v)).collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

impl HvpOracle for DenseMatrix {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }
}

/// `inner + shift * I`.
pub struct Shifted<O> {
    pub inner: O,
    pub shift: f64,
}

impl<O: HvpOracle> HvpOracle for Shifted<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.inner.apply(v);
        if self.shift != 0.0 {
            linalg::axpy(self.shift, v, &mut out);
        }
        out
    }
}

/// Mean of explicit component matrices plus `shift * I`.
#[derive(Debug, Clone)]
pub struct ComponentSum {
    pub components: Vec<DenseMatrix>,
    pub shift: f64,
}

impl ComponentSum {
    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.components[0].n;
        let mut data = vec![0.0; n * n];
        let k = self.components.len() as f64;
        for c in &self.components {
            linalg::axpy(1.0 / k, &c.data, &mut data);
        }
        for i in 0..n {
            data[i * n + i] += self.shift;
        }
        DenseMatrix { n, data }
    }
}

impl HvpOracle for ComponentSum {
    fn dim(&self) -> usize {
        self.components[0].n
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.components.len() as f64;
        let mut out = vec![0.0; v.len()];
        for c in &self.components {
            linalg::axpy(1.0 / k, &c.matvec(v), &mut out);
        }
        linalg::axpy(self.shift, v, &mut out);
        out
    }
}

impl StochasticHessian for ComponentSum {
    fn num_components(&self) -> usize {
        self.components.len()
    }
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let mut out = self.components[i].matvec(v);
        linalg::axpy(self.shift, v, &mut out);
        out
    }
}

/// A trained network together with its training set and objective.
pub struct MlpProblem<'a> {
    pub spec: &'a ModelSpec,
    pub theta: &'a [f64],
    pub train: &'a [Example],
    weights: Vec<f64>,
    weight_decay: f64,
}

impl<'a> MlpProblem<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        theta: &'a [f64],
        train: &'a [Example],
        obj: &Objective,
    ) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(InfluenceError::DimensionMismatch {
                what: "parameter vector",
                expected: spec.param_count(),
                got: theta.len(),
            });
        }
        if let Some(bad) = train.iter().find(|z| z.features.len() != spec.input_dim) {
            return Err(InfluenceError::DimensionMismatch {
                what: "example features",
                expected: spec.input_dim,
                got: bad.features.len(),
            });
        }
        Ok(MlpProblem {
            spec,
            theta,
            train,
            weights: obj.resolve_weights(train.len())?,
            weight_decay: obj.weight_decay,
        })
    }

    /// Gradient of an arbitrary example's loss (e.g. a test point).
    pub fn example_gradient(&self, z: &Example) -> Result<Vec<f64>> {
        nn::per_example_gradient(self.spec, self.theta, z).map(|g| g.0)
    }

    pub fn example_loss(&self, z: &Example) -> Result<f64> {
        nn::example_loss(self.spec, self.theta, z)
    }
}

impl HvpOracle for MlpProblem<'_> {
    fn dim(&self) -> usize {
        self.theta.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(self.spec);
        let mut out = vec![0.0; v.len()];
        nn::accumulate_hvp(
            &mut ws,
            self.theta,
            self.train,
            &self.weights,
            self.weight_decay,
            v,
            &mut out,
        );
        out
    }
}

impl StochasticHessian for MlpProblem<'_> {
    fn num_components(&self) -> usize {
        self.train.len()
    }
    /// `n * w_i * H_i v + 2 * decay * v`.
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(self.spec);
        let mut out = vec![0.0; v.len()];
        let z = &self.train[i];
        let scale = self.train.len() as f64 * self.weights[i];
        ws.forward(self.theta, &z.features, z.label);
        ws.hvp(self.theta, v, z.label, scale, &mut out);
        if self.weight_decay != 0.0 {
            linalg::axpy(2.0 * self.weight_decay, v, &mut out);
        }
        out
    }
}

impl ErmProblem for MlpProblem<'_> {
    fn params(&self) -> &[f64] {
        self.theta
    }
    fn num_train(&self) -> usize {
        self.train.len()
    }
    fn train_gradient(&self, i: usize) -> Vec<f64> {
        let z = &self.train[i];
        let mut ws = Workspace::new(self.spec);
        let mut g = vec![0.0; self.theta.len()];
        ws.forward(self.theta, &z.features, z.label);
        ws.backward(self.theta, z.label, 1.0, &mut g);
        g
    }
}

/// Ridge regression `mean_i 0.5 (x_i . theta - y_i)^2 + decay * ||theta||^2`
/// solved in closed form. It is the quadratic surrogate on which first-order
/// influence can be compared against exact leave-one-out solutions.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub weight_decay: f64,
    pub theta: Vec<f64>,
}

impl RidgeProblem {
    /// Fits `theta` by a dense solve of the normal equations
    /// `(X^T X / n + 2 decay I) theta = X^T y / n`.
    pub fn fit(xs: Vec<Vec<f64>>, ys: Vec<f64>, weight_decay: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(InfluenceError::InvalidInput(
                "ridge problem needs matching, non-empty inputs and targets".into(),
            ));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for (x, y) in xs.iter().zip(&ys) {
            for i in 0..d {
                rhs[i] += x[i] * y / n;
                for j in 0..d {
                    gram[i * d + j] += x[i] * x[j] / n;
                }
            }
        }
        for i in 0..d {
            gram[i * d + i] += 2.0 * weight_decay;
        }
        let h = crate::curvature::DenseHessian::from_matrix(DenseMatrix { n: d, data: gram });
        let theta = crate::curvature::solve_dense(&h, &rhs)?;
        Ok(RidgeProblem {
            xs,
            ys,
            weight_decay,
            theta,
        })
    }
}

impl HvpOracle for RidgeProblem {
    fn dim(&self) -> usize {
        self.theta.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.xs.len() as f64;
        let mut out = vec![0.0; v.len()];
        for x in &self.xs {
            linalg::axpy(linalg::dot(x, v) / n, x, &mut out);
        }
        linalg::axpy(2.0 * self.weight_decay, v, &mut out);
        out
    }
}

impl StochasticHessian for RidgeProblem {
    fn num_components(&self) -> usize {
        self.xs.len()
    }
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let x = &self.xs[i];
        let mut out: Vec<f64> = x.iter().map(|xi| xi * linalg::dot(x, v)).collect();
        linalg::axpy(2.0 * self.weight_decay, v, &mut out);
        out
    }
}

impl ErmProblem for RidgeProblem {
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn num_train(&self) -> usize {
        self.xs.len()
    }
    fn train_gradient(&self, i: usize) -> Vec<f64> {
        let x = &self.xs[i];
        let r = linalg::dot(x, &self.theta) - self.ys[i];
        x.iter().map(|xi| r * xi).collect()
    }
}
