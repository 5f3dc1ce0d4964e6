//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the crate's solvers: finite differences,
//! nalgebra factorizations and closed-form leave-one-out solutions.

#![allow(dead_code)]

use influence_core::data::{self, Dataset};
use influence_core::nn::{self, Activation, ModelSpec, Objective};
use influence_core::oracle::{ErmProblem, HvpOracle, StochasticHessian};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn iris() -> (Dataset, Dataset) {
    let s = data::split(&data::load_iris(), 0.2, 0, true).unwrap();
    let (train, test, _) = data::normalize(&s.train, &s.test).unwrap();
    (train, test)
}

pub fn gaussian(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    let v = gaussian(rng, p);
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn shifted(theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + h * d).collect()
}

/// ReLU networks are only piecewise smooth; a small step keeps the stencil
/// from straddling a kink.
fn step(spec: &ModelSpec) -> f64 {
    match spec.activation {
        Activation::Relu => 1e-6,
        Activation::Tanh => 1e-4,
    }
}

/// Fourth-order central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`.
fn central<T>(f: impl Fn(f64) -> T, h: f64, combine: impl Fn([T; 4]) -> T) -> T {
    combine([f(-2.0 * h), f(-h), f(h), f(2.0 * h)])
}

/// Worst relative error, over `dirs` random unit directions, of the
/// analytic directional derivative of the objective against central finite
/// differences. Errors are relative to the gradient norm.
pub fn gradient_fd_error(spec: &ModelSpec, theta: &[f64], data: &[nn::Example], obj: &Objective, dirs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = nn::gradient(spec, theta, data, obj).unwrap();
    let scale = norm(&g);
    let h = step(spec);
    (0..dirs)
        .map(|_| {
            let u = unit(&mut rng, theta.len());
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let fd = central(
                |s| nn::objective_loss(spec, &shifted(theta, &u, s), data, obj).unwrap(),
                h,
                |[a, b, c, d]| (a - 8.0 * b + 8.0 * c - d) / (12.0 * h),
            );
            (fd - analytic).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the HVP against central differences of the
/// analytic gradient.
pub fn hvp_fd_error(spec: &ModelSpec, theta: &[f64], data: &[nn::Example], obj: &Objective, dirs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = step(spec);
    (0..dirs)
        .map(|_| {
            let u = unit(&mut rng, theta.len());
            let hv = nn::hvp(spec, theta, data, obj, &u).unwrap();
            let fd = central(
                |s| nn::gradient(spec, &shifted(theta, &u, s), data, obj).unwrap().0,
                h,
                |[a, b, c, d]| {
                    (0..a.len())
                        .map(|i| (a[i] - 8.0 * b[i] + 8.0 * c[i] - d[i]) / (12.0 * h))
                        .collect()
                },
            );
            rel_err(&hv, &fd)
        })
        .fold(0.0, f64::max)
}

/// MLP parameters away from a stationary point: a short run of plain GD
/// from the seeded initialization, so gradients are well above round-off.
pub fn warm_params(spec: &ModelSpec, data: &[nn::Example], obj: &Objective, seed: u64) -> Vec<f64> {
    let mut theta = nn::init_params(spec, seed).0;
    for _ in 0..20 {
        let g = nn::gradient(spec, &theta, data, obj).unwrap();
        theta.iter_mut().zip(g.iter()).for_each(|(t, d)| *t -= 0.1 * d);
    }
    theta
}

/// Smallest `|pre-activation|` over hidden units and examples, from a
/// forward pass written against the documented parameter layout. ReLU
/// networks are not differentiable where this is zero.
pub fn min_abs_preactivation(spec: &ModelSpec, theta: &[f64], data: &[nn::Example]) -> f64 {
    let mut best = f64::INFINITY;
    for z in data {
        let mut input = z.features.clone();
        let mut offset = 0;
        for &width in &spec.hidden_widths {
            let fan_in = input.len();
            let (w, b) = (&theta[offset..offset + width * fan_in], &theta[offset + width * fan_in..]);
            let pre: Vec<f64> = (0..width)
                .map(|o| b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * input[i]).sum::<f64>())
                .collect();
            best = pre.iter().fold(best, |m, a| m.min(a.abs()));
            offset += width * fan_in + width;
            input = pre.iter().map(|&a| match spec.activation {
                Activation::Relu => a.max(0.0),
                Activation::Tanh => a.tanh(),
            }).collect();
        }
    }
    best
}

pub fn spec(depth: usize, width: usize, act: Activation) -> ModelSpec {
    ModelSpec::uniform(4, depth, width, 3, act).unwrap()
}

pub fn to_dmatrix(h: &influence_core::oracle::DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(h.n, h.n, &h.data)
}

/// `mean_i x_i x_i^T + shift * I` given through factors, so every product is
/// `O(n p)` and a component product is `O(p)`.
pub struct RankOneSum {
    pub xs: Vec<Vec<f64>>,
    pub shift: f64,
}

impl RankOneSum {
    /// `n` Gaussian factors of dimension `p` scaled so the largest
    /// eigenvalue is of order one; `shift` is relative to the mean eigenvalue.
    pub fn random(rng: &mut ChaCha8Rng, p: usize, n: usize, relative_shift: f64) -> Self {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| gaussian(rng, p).into_iter().map(|x| x / (p as f64).sqrt()).collect())
            .collect();
        // trace(mean x x^T) / p = mean ||x||^2 / p
        let mean_eig = xs.iter().map(|x| norm(x).powi(2)).sum::<f64>() / (n * p) as f64;
        RankOneSum {
            xs,
            shift: relative_shift * mean_eig,
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let p = self.xs[0].len();
        let mut m = DMatrix::identity(p, p) * self.shift;
        for x in &self.xs {
            let v = DVector::from_column_slice(x);
            m += (&v * v.transpose()) / self.xs.len() as f64;
        }
        m
    }
}

impl HvpOracle for RankOneSum {
    fn dim(&self) -> usize {
        self.xs[0].len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.xs.len() as f64;
        let mut out: Vec<f64> = v.iter().map(|x| self.shift * x).collect();
        for x in &self.xs {
            let d: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n;
            out.iter_mut().zip(x).for_each(|(o, xi)| *o += d * xi);
        }
        out
    }
}

impl StochasticHessian for RankOneSum {
    fn num_components(&self) -> usize {
        self.xs.len()
    }
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let x = &self.xs[i];
        let d: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
        v.iter().zip(x).map(|(vi, xi)| self.shift * vi + d * xi).collect()
    }
}

/// `D + mean_i s (a_i a_i^T - b_i b_i^T)`: a diagonal with log-spaced
/// spectrum in `[1/cond, 1]` plus zero-mean rank-two noise per component, so
/// single-component samples scatter around a positive definite mean.
pub struct NoisyDiagonal {
    pub diag: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl NoisyDiagonal {
    pub fn random(rng: &mut ChaCha8Rng, p: usize, n: usize, cond: f64, noise: f64) -> Self {
        let diag = (0..p)
            .map(|i| cond.powf(-(i as f64) / (p.max(2) - 1) as f64))
            .collect();
        let scale = (noise / p as f64).sqrt();
        let mut draw = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| gaussian(rng, p).into_iter().map(|x| x * scale).collect())
                .collect()
        };
        let a = draw();
        let b = draw();
        NoisyDiagonal { diag, a, b }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.a.len() as f64;
        let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for (a, b) in self.a.iter().zip(&self.b) {
            let a = DVector::from_column_slice(a);
            let b = DVector::from_column_slice(b);
            m += (&a * a.transpose() - &b * b.transpose()) / n;
        }
        m
    }

    fn component(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let (a, b) = (&self.a[i], &self.b[i]);
        let da: f64 = a.iter().zip(v).map(|(x, y)| x * y).sum();
        let db: f64 = b.iter().zip(v).map(|(x, y)| x * y).sum();
        (0..v.len())
            .map(|k| self.diag[k] * v[k] + da * a[k] - db * b[k])
            .collect()
    }
}

impl HvpOracle for NoisyDiagonal {
    fn dim(&self) -> usize {
        self.diag.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.a.len() as f64;
        let mut out = vec![0.0; v.len()];
        for i in 0..self.a.len() {
            out.iter_mut().zip(self.component(i, v)).for_each(|(o, c)| *o += c / n);
        }
        out
    }
}

impl StochasticHessian for NoisyDiagonal {
    fn num_components(&self) -> usize {
        self.a.len()
    }
    fn component_apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        self.component(i, v)
    }
}

/// Ridge problem `mean_i 0.5 (x_i . theta - y_i)^2 + decay ||theta||^2` on
/// standardized Iris features with the class index as target, together
/// with its exact leave-one-out parameters under the removal convention
/// used throughout the crate (example weight `1/n` set to zero).
pub struct RidgeOracle {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub decay: f64,
    pub theta: DVector<f64>,
    a_inv: DMatrix<f64>,
    b: DVector<f64>,
}

impl RidgeOracle {
    pub fn iris(decay: f64) -> Self {
        let (train, _) = iris();
        let xs: Vec<Vec<f64>> = train.examples.iter().map(|z| z.features.clone()).collect();
        let mean = train.examples.iter().map(|z| z.label as f64).sum::<f64>() / train.len() as f64;
        let ys: Vec<f64> = train.examples.iter().map(|z| z.label as f64 - mean).collect();
        Self::new(xs, ys, decay)
    }

    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, decay: f64) -> Self {
        let n = xs.len() as f64;
        let d = xs[0].len();
        let mut a = DMatrix::identity(d, d) * (2.0 * decay);
        let mut b = DVector::zeros(d);
        for (x, &y) in xs.iter().zip(&ys) {
            let v = DVector::from_column_slice(x);
            a += (&v * v.transpose()) / n;
            b += v * (y / n);
        }
        let a_inv = a.try_inverse().expect("ridge normal matrix is invertible");
        let theta = &a_inv * &b;
        RidgeOracle {
            xs,
            ys,
            decay,
            theta,
            a_inv,
            b,
        }
    }

    /// `x_i^T A^-1 x_i / n` for the regularized normal matrix `A`.
    pub fn leverage(&self, i: usize) -> f64 {
        let x = DVector::from_column_slice(&self.xs[i]);
        x.dot(&(&self.a_inv * &x)) / self.xs.len() as f64
    }

    /// Exact minimizer with example `i` removed, via Sherman-Morrison.
    pub fn loo(&self, i: usize) -> DVector<f64> {
        let n = self.xs.len() as f64;
        let x = DVector::from_column_slice(&self.xs[i]);
        let ax = &self.a_inv * &x;
        let denom = 1.0 - x.dot(&ax) / n;
        let a_inv_i = &self.a_inv + (&ax * ax.transpose()) / (n * denom);
        a_inv_i * (&self.b - x * (self.ys[i] / n))
    }
}

/// Sanity: the crate's problem reports the same parameters and gradients.
pub fn ridge_agrees(problem: &impl ErmProblem, oracle: &RidgeOracle) -> bool {
    rel_err(problem.params(), oracle.theta.as_slice()) < 1e-10
}
