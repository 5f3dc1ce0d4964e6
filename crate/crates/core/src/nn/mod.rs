//! Dense feed-forward classifiers with softmax cross-entropy loss.
//!
//! Parameters live in one flat `f64` vector. The layout is layer-major: for
//! each layer the weight matrix (shape `fan_out x fan_in`, row-major, so the
//! weight from input `i` to unit `o` sits at `o * fan_in + i`) followed by
//! its `fan_out` biases.
//!
//! The training objective is `sum_i w_i * loss(z_i) + decay * ||theta||^2`
//! with uniform weights `1/n` unless explicit weights are supplied. The decay
//! applies to every parameter, biases included. Per-example gradients never
//! contain the decay term; gradients and Hessian-vector products of the
//! objective always do.

mod engine;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{InfluenceError, Result};
use crate::linalg;

pub(crate) use engine::Workspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
        }
    }
}

/// Architecture of a dense classifier. No hidden layers gives multinomial
/// logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_widths,
            num_classes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `depth` hidden layers of identical `width`.
    pub fn uniform(
        input_dim: usize,
        depth: usize,
        width: usize,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(input_dim, vec![width; depth], num_classes, activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(InfluenceError::InvalidInput("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(InfluenceError::InvalidInput(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(InfluenceError::InvalidInput(
                "hidden layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    pub fn param_count(&self) -> usize {
        engine::layer_shapes(self)
            .iter()
            .map(|s| s.fan_in * s.fan_out + s.fan_out)
            .sum()
    }

    /// Index ranges of the bias blocks inside a [`ParamVector`].
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        engine::layer_shapes(self)
            .iter()
            .map(|s| s.b_offset..s.b_offset + s.fan_out)
            .collect()
    }
}

/// Flat parameter vector in the layout described at module level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        ParamVector(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.0)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example { features, label }
    }
}

/// Weighted empirical risk plus `weight_decay * ||theta||^2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weight_decay: f64,
    /// One weight per example; `None` means uniform `1/n`.
    pub weights: Option<Vec<f64>>,
}

impl Objective {
    pub fn uniform(weight_decay: f64) -> Self {
        Objective {
            weight_decay,
            weights: None,
        }
    }

    pub fn weighted(weight_decay: f64, weights: Vec<f64>) -> Self {
        Objective {
            weight_decay,
            weights: Some(weights),
        }
    }

    pub(crate) fn resolve_weights(&self, n: usize) -> Result<Vec<f64>> {
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(InfluenceError::InvalidInput(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        match &self.weights {
            Some(w) => {
                if w.len() != n {
                    return Err(InfluenceError::DimensionMismatch {
                        what: "per-example weights",
                        expected: n,
                        got: w.len(),
                    });
                }
                if !linalg::all_finite(w) {
                    return Err(InfluenceError::InvalidInput(
                        "per-example weights must be finite".into(),
                    ));
                }
                Ok(w.clone())
            }
            None => {
                if n == 0 {
                    return Err(InfluenceError::InvalidInput("empty dataset".into()));
                }
                Ok(vec![1.0 / n as f64; n])
            }
        }
    }
}

/// Scaled-uniform initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// biases zero. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; spec.param_count()];
    for shape in engine::layer_shapes(spec) {
        let bound = 1.0 / (shape.fan_in as f64).sqrt();
        for w in &mut theta[shape.w_offset..shape.w_offset + shape.fan_in * shape.fan_out] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector(theta)
}

fn check_theta(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    let p = spec.param_count();
    if theta.len() != p {
        return Err(InfluenceError::DimensionMismatch {
            what: "parameter vector",
            expected: p,
            got: theta.len(),
        });
    }
    Ok(())
}

fn check_example(spec: &ModelSpec, z: &Example) -> Result<()> {
    if z.features.len() != spec.input_dim {
        return Err(InfluenceError::DimensionMismatch {
            what: "example features",
            expected: spec.input_dim,
            got: z.features.len(),
        });
    }
    if z.label >= spec.num_classes {
        return Err(InfluenceError::InvalidInput(format!(
            "label {} out of range for {} classes",
            z.label, spec.num_classes
        )));
    }
    Ok(())
}

fn check_examples(spec: &ModelSpec, data: &[Example]) -> Result<()> {
    data.iter().try_for_each(|z| check_example(spec, z))
}

/// Softmax cross-entropy (natural log) of the network output at `z`.
/// Excludes weight decay.
pub fn example_loss(spec: &ModelSpec, theta: &[f64], z: &Example) -> Result<f64> {
    check_theta(spec, theta)?;
    check_example(spec, z)?;
    let mut ws = Workspace::new(spec);
    Ok(ws.forward(theta, &z.features, z.label))
}

/// Per-example losses for every element of `data`.
pub fn example_losses(spec: &ModelSpec, theta: &[f64], data: &[Example]) -> Result<Vec<f64>> {
    check_theta(spec, theta)?;
    check_examples(spec, data)?;
    let mut ws = Workspace::new(spec);
    Ok(data
        .iter()
        .map(|z| ws.forward(theta, &z.features, z.label))
        .collect())
}

/// Predicted class (argmax of the logits, lowest index on ties).
pub fn predict(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<usize> {
    check_theta(spec, theta)?;
    if x.len() != spec.input_dim {
        return Err(InfluenceError::DimensionMismatch {
            what: "example features",
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    let mut ws = Workspace::new(spec);
    ws.forward(theta, x, 0);
    let probs = ws.probs();
    let mut best = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = k;
        }
    }
    Ok(best)
}

pub fn accuracy(spec: &ModelSpec, theta: &[f64], data: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    for z in data {
        if predict(spec, theta, &z.features)? == z.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn objective_loss(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[Example],
    obj: &Objective,
) -> Result<f64> {
    check_theta(spec, theta)?;
    check_examples(spec, data)?;
    let weights = obj.resolve_weights(data.len())?;
    let mut ws = Workspace::new(spec);
    let mut total = 0.0;
    for (z, w) in data.iter().zip(&weights) {
        if *w != 0.0 {
            total += w * ws.forward(theta, &z.features, z.label);
        }
    }
    Ok(total + obj.weight_decay * linalg::dot(theta, theta))
}

/// Objective value and gradient in one pass.
pub fn objective_and_gradient(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[Example],
    obj: &Objective,
) -> Result<(f64, ParamVector)> {
    check_theta(spec, theta)?;
    check_examples(spec, data)?;
    let weights = obj.resolve_weights(data.len())?;
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; theta.len()];
    let value = accumulate_gradient(&mut ws, theta, data, &weights, obj.weight_decay, &mut grad);
    Ok((value, ParamVector(grad)))
}

/// Unchecked inner loop shared with the trainer. Overwrites `grad`.
pub(crate) fn accumulate_gradient(
    ws: &mut Workspace,
    theta: &[f64],
    data: &[Example],
    weights: &[f64],
    weight_decay: f64,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for (z, &w) in data.iter().zip(weights) {
        if w != 0.0 {
            total += w * ws.forward(theta, &z.features, z.label);
            ws.backward(theta, z.label, w, grad);
        }
    }
    if weight_decay != 0.0 {
        linalg::axpy(2.0 * weight_decay, theta, grad);
    }
    total + weight_decay * linalg::dot(theta, theta)
}

pub fn gradient(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[Example],
    obj: &Objective,
) -> Result<ParamVector> {
    objective_and_gradient(spec, theta, data, obj).map(|(_, g)| g)
}

/// Gradient of [`example_loss`] alone (no weight decay).
pub fn per_example_gradient(spec: &ModelSpec, theta: &[f64], z: &Example) -> Result<ParamVector> {
    check_theta(spec, theta)?;
    check_example(spec, z)?;
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; theta.len()];
    ws.forward(theta, &z.features, z.label);
    ws.backward(theta, z.label, 1.0, &mut grad);
    Ok(ParamVector(grad))
}

/// Hessian of the full objective (data term plus decay) applied to `v`,
/// computed by forward-over-reverse differentiation without forming the
/// Hessian.
pub fn hvp(
    spec: &ModelSpec,
    theta: &[f64],
    data: &[Example],
    obj: &Objective,
    v: &[f64],
) -> Result<ParamVector> {
    check_theta(spec, theta)?;
    check_examples(spec, data)?;
    if v.len() != theta.len() {
        return Err(InfluenceError::DimensionMismatch {
            what: "hvp direction",
            expected: theta.len(),
            got: v.len(),
        });
    }
    let weights = obj.resolve_weights(data.len())?;
    let mut ws = Workspace::new(spec);
    let mut out = vec![0.0; theta.len()];
    accumulate_hvp(&mut ws, theta, data, &weights, obj.weight_decay, v, &mut out);
    Ok(ParamVector(out))
}

/// Unchecked inner loop. Overwrites `out`.
pub(crate) fn accumulate_hvp(
    ws: &mut Workspace,
    theta: &[f64],
    data: &[Example],
    weights: &[f64],
    weight_decay: f64,
    v: &[f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (z, &w) in data.iter().zip(weights) {
        if w != 0.0 {
            ws.forward(theta, &z.features, z.label);
            ws.hvp(theta, v, z.label, w, out);
        }
    }
    if weight_decay != 0.0 {
        linalg::axpy(2.0 * weight_decay, v, out);
    }
}

/// Hessian of a single example's loss (no decay) applied to `v`.
pub fn per_example_hvp(
    spec: &ModelSpec,
    theta: &[f64],
    z: &Example,
    v: &[f64],
) -> Result<ParamVector> {
    check_theta(spec, theta)?;
    check_example(spec, z)?;
    if v.len() != theta.len() {
        return Err(InfluenceError::DimensionMismatch {
            what: "hvp direction",
            expected: theta.len(),
            got: v.len(),
        });
    }
    let mut ws = Workspace::new(spec);
    let mut out = vec![0.0; theta.len()];
    ws.forward(theta, &z.features, z.label);
    ws.hvp(theta, v, z.label, 1.0, &mut out);
    Ok(ParamVector(out))
}
