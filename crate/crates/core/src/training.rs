//! Full-batch gradient descent on the regularized objective, and
//! retraining under reweighted objectives (removal, up-weighting).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{InfluenceError, Result};
use crate::linalg;
use crate::nn::{self, ModelSpec, Objective, ParamVector, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record a history entry every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub record_grad_norm_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(InfluenceError::InvalidInput(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(InfluenceError::InvalidInput(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub theta_star: ParamVector,
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub final_objective: f64,
    pub final_grad_norm: f64,
    pub history: Vec<HistoryRecord>,
}

impl TrainedModel {
    pub fn objective(&self) -> Objective {
        Objective::uniform(self.config.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    WarmStart,
    Scratch,
}

impl std::fmt::Display for RetrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrainMode::WarmStart => f.write_str("warm_start"),
            RetrainMode::Scratch => f.write_str("scratch"),
        }
    }
}

/// Perturbation of the uniform `1/n` example weights. Removing example `i`
/// is the same as adding `-1/n` to its weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpweightSpec {
    pub removed_indices: Vec<usize>,
    #[serde(default)]
    pub epsilon_overrides: BTreeMap<usize, f64>,
}

impl UpweightSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn remove(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut removed: Vec<usize> = indices.into_iter().collect();
        removed.sort_unstable();
        removed.dedup();
        UpweightSpec {
            removed_indices: removed,
            epsilon_overrides: BTreeMap::new(),
        }
    }

    pub fn upweight(index: usize, epsilon: f64) -> Self {
        UpweightSpec {
            removed_indices: Vec::new(),
            epsilon_overrides: BTreeMap::from([(index, epsilon)]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.removed_indices.is_empty() && self.epsilon_overrides.is_empty()
    }

    /// Example weights `1/n + epsilon_i`.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>> {
        let base = 1.0 / n as f64;
        let mut eps = vec![0.0; n];
        for (&i, &e) in &self.epsilon_overrides {
            if i >= n {
                return Err(InfluenceError::InvalidInput(format!(
                    "up-weighted index {i} out of range for {n} training points"
                )));
            }
            if !e.is_finite() {
                return Err(InfluenceError::InvalidInput(format!(
                    "epsilon for index {i} is not finite"
                )));
            }
            eps[i] = e;
        }
        for &i in &self.removed_indices {
            if i >= n {
                return Err(InfluenceError::InvalidInput(format!(
                    "removed index {i} out of range for {n} training points"
                )));
            }
            if self.epsilon_overrides.contains_key(&i) {
                return Err(InfluenceError::InvalidInput(format!(
                    "index {i} is both removed and up-weighted"
                )));
            }
            eps[i] = -base;
        }
        Ok(eps.into_iter().map(|e| base + e).collect())
    }
}

struct DescentOutcome {
    theta: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    history: Vec<HistoryRecord>,
}

/// `steps` updates `theta <- theta - lr * grad`. The objective is checked
/// for finiteness before every update.
fn descend(
    spec: &ModelSpec,
    data: &Dataset,
    weights: &[f64],
    weight_decay: f64,
    start: Vec<f64>,
    lr: f64,
    steps: usize,
    record_every: usize,
) -> Result<DescentOutcome> {
    let mut ws = Workspace::new(spec);
    let mut theta = start;
    let mut grad = vec![0.0; theta.len()];
    let mut history = Vec::new();
    for step in 0..steps {
        let objective =
            nn::accumulate_gradient(&mut ws, &theta, data.examples(), weights, weight_decay, &mut grad);
        if !objective.is_finite() || !linalg::all_finite(&grad) {
            return Err(InfluenceError::Divergence { step, objective });
        }
        if record_every > 0 && step % record_every == 0 {
            history.push(HistoryRecord {
                step,
                objective,
                grad_norm: linalg::norm(&grad),
            });
        }
        linalg::axpy(-lr, &grad, &mut theta);
    }
    let objective =
        nn::accumulate_gradient(&mut ws, &theta, data.examples(), weights, weight_decay, &mut grad);
    if !objective.is_finite() || !linalg::all_finite(&theta) {
        return Err(InfluenceError::Divergence {
            step: steps,
            objective,
        });
    }
    let grad_norm = linalg::norm(&grad);
    history.push(HistoryRecord {
        step: steps,
        objective,
        grad_norm,
    });
    Ok(DescentOutcome {
        theta,
        objective,
        grad_norm,
        history,
    })
}

fn check_dataset(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.feature_dim != spec.input_dim || data.num_classes > spec.num_classes {
        return Err(InfluenceError::InvalidInput(format!(
            "dataset {} ({} features, {} classes) does not fit model ({} inputs, {} classes)",
            data.name, data.feature_dim, data.num_classes, spec.input_dim, spec.num_classes
        )));
    }
    Ok(())
}

/// Exactly `config.steps` full-batch gradient steps from
/// `init_params(spec, config.seed)`.
pub fn train(spec: &ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    config.validate()?;
    check_dataset(spec, data)?;
    let weights = Objective::uniform(config.weight_decay).resolve_weights(data.len())?;
    let start = nn::init_params(spec, config.seed).0;
    let out = descend(
        spec,
        data,
        &weights,
        config.weight_decay,
        start,
        config.learning_rate,
        config.steps,
        config.record_grad_norm_every,
    )?;
    Ok(TrainedModel {
        spec: spec.clone(),
        theta_star: ParamVector(out.theta),
        config: config.clone(),
        dataset_fingerprint: data.fingerprint(),
        final_objective: out.objective,
        final_grad_norm: out.grad_norm,
        history: out.history,
    })
}

/// Optimizes the reweighted objective for `steps` steps, starting from
/// `theta_star` (warm start) or from the original initialization (scratch).
/// The returned model's `config.steps` is `steps`.
pub fn retrain(
    trained: &TrainedModel,
    data: &Dataset,
    upweight: &UpweightSpec,
    steps: usize,
    mode: RetrainMode,
) -> Result<TrainedModel> {
    if data.fingerprint() != trained.dataset_fingerprint {
        return Err(InfluenceError::InvalidInput(
            "retraining dataset does not match the trained model's fingerprint".into(),
        ));
    }
    retrain_unchecked(trained, data, upweight, steps, mode)
}

/// [`retrain`] without re-hashing the dataset; callers guarantee the match.
pub(crate) fn retrain_unchecked(
    trained: &TrainedModel,
    data: &Dataset,
    upweight: &UpweightSpec,
    steps: usize,
    mode: RetrainMode,
) -> Result<TrainedModel> {
    let weights = upweight.weights(data.len())?;
    let start = match mode {
        RetrainMode::WarmStart => trained.theta_star.0.clone(),
        RetrainMode::Scratch => nn::init_params(&trained.spec, trained.config.seed).0,
    };
    let out = descend(
        &trained.spec,
        data,
        &weights,
        trained.config.weight_decay,
        start,
        trained.config.learning_rate,
        steps,
        0,
    )?;
    Ok(TrainedModel {
        spec: trained.spec.clone(),
        theta_star: ParamVector(out.theta),
        config: TrainConfig {
            steps,
            ..trained.config.clone()
        },
        dataset_fingerprint: trained.dataset_fingerprint.clone(),
        final_objective: out.objective,
        final_grad_norm: out.grad_norm,
        history: out.history,
    })
}

/// Gradient descent on an arbitrary weighting until the gradient norm drops
/// to `tol`. Returns the parameters and the number of steps taken.
pub fn descend_to_tolerance(
    spec: &ModelSpec,
    data: &Dataset,
    obj: &Objective,
    start: &[f64],
    lr: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(ParamVector, usize)> {
    let weights = obj.resolve_weights(data.len())?;
    let mut ws = Workspace::new(spec);
    let mut theta = start.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut grad_norm = f64::INFINITY;
    for step in 0..=max_steps {
        let objective = nn::accumulate_gradient(
            &mut ws,
            &theta,
            data.examples(),
            &weights,
            obj.weight_decay,
            &mut grad,
        );
        if !objective.is_finite() {
            return Err(InfluenceError::Divergence { step, objective });
        }
        grad_norm = linalg::norm(&grad);
        if grad_norm <= tol {
            return Ok((ParamVector(theta), step));
        }
        if step < max_steps {
            linalg::axpy(-lr, &grad, &mut theta);
        }
    }
    Err(InfluenceError::NonConvergence {
        iterations: max_steps,
        grad_norm,
        tol,
    })
}

/// Central-difference estimate of `d theta*(eps) / d eps` at `eps = 0` for
/// up-weighting training example `z_index`, one estimate per grid value.
/// Each perturbed problem is re-solved from `theta_star` to a gradient norm
/// of `1e-12`. Only convex (no hidden layer) models are accepted.
pub fn epsilon_derivative_estimates(
    trained: &TrainedModel,
    data: &Dataset,
    z_index: usize,
    eps_grid: &[f64],
) -> Result<Vec<ParamVector>> {
    if trained.spec.depth() != 0 {
        return Err(InfluenceError::InvalidInput(
            "the epsilon-derivative oracle needs a convex model (no hidden layers)".into(),
        ));
    }
    if z_index >= data.len() {
        return Err(InfluenceError::InvalidInput(format!(
            "index {z_index} out of range for {} training points",
            data.len()
        )));
    }
    const TOL: f64 = 1e-12;
    const MAX_STEPS: usize = 2_000_000;
    let n = data.len();
    let solve = |eps: f64| -> Result<ParamVector> {
        let weights = UpweightSpec::upweight(z_index, eps).weights(n)?;
        let obj = Objective::weighted(trained.config.weight_decay, weights);
        descend_to_tolerance(
            &trained.spec,
            data,
            &obj,
            &trained.theta_star,
            trained.config.learning_rate,
            TOL,
            MAX_STEPS,
        )
        .map(|(theta, _)| theta)
    };
    eps_grid
        .iter()
        .map(|&eps| {
            if !(eps > 0.0) {
                return Err(InfluenceError::InvalidInput(format!(
                    "epsilon grid values must be positive, got {eps}"
                )));
            }
            let plus = solve(eps)?;
            let minus = solve(-eps)?;
            Ok(ParamVector(
                plus.iter()
                    .zip(minus.iter())
                    .map(|(a, b)| (a - b) / (2.0 * eps))
                    .collect(),
            ))
        })
        .collect()
}

/// The estimate at the smallest grid value.
pub fn epsilon_derivative_oracle(
    trained: &TrainedModel,
    data: &Dataset,
    z_index: usize,
    eps_grid: &[f64],
) -> Result<ParamVector> {
    let smallest = eps_grid
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Err(InfluenceError::InvalidInput("empty epsilon grid".into()));
    }
    epsilon_derivative_estimates(trained, data, z_index, &[smallest]).map(|mut v| v.remove(0))
}
