//! First-order influence: parameter influence `I(z) = -H^{-1} grad l(z)`,
//! pair influence `I(z, z_t) = -grad l(z_t)^T H^{-1} grad l(z)`, predicted
//! removal effects, rankings and additive group influence.
//!
//! Removing `z` is up-weighting it by `eps = -1/n`, so the predicted
//! parameters are `theta* + H^{-1} grad l(z) / n` and the predicted change in
//! test loss is `-I(z, z_t) / n`: positive means the test loss goes up when
//! `z` is removed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{InfluenceError, Result};
use crate::fingerprint;
use crate::ihvp::{IhvpConfig, IhvpResult, IhvpSolver, SolverKind};
use crate::linalg;
use crate::nn::{self, Example, ParamVector};
use crate::oracle::{ErmProblem, MlpProblem};
use crate::training::TrainedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub train_index: usize,
    pub test_index: usize,
    pub pair_influence: f64,
    /// `-pair_influence / n`.
    pub predicted_delta_loss: f64,
    pub solver_provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub index: usize,
    pub loss: f64,
}

/// How the shared test-side iHVP was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub solver: SolverKind,
    pub damping_used: f64,
    pub iterations_or_depth: usize,
    pub residual_norm: Option<f64>,
    pub converged: bool,
}

impl From<&IhvpResult> for SolveSummary {
    fn from(r: &IhvpResult) -> Self {
        SolveSummary {
            solver: r.solver_used,
            damping_used: r.damping_used,
            iterations_or_depth: r.iterations_or_depth,
            residual_norm: r.residual_norm,
            converged: r.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub test_point: TestPoint,
    pub scores: Vec<InfluenceScore>,
    /// Training indices by descending pair influence, ties by ascending index.
    pub ranking: Vec<usize>,
    pub ihvp_config_hash: String,
    pub params_fingerprint: String,
    pub solve: SolveSummary,
}

impl InfluenceReport {
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn score(&self, train_index: usize) -> Option<&InfluenceScore> {
        self.scores.get(train_index)
    }

    /// 1-based rank of every training index.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.ranking.len()];
        for (pos, &i) in self.ranking.iter().enumerate() {
            ranks[i] = pos + 1;
        }
        ranks
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `index,score,predicted_delta_loss,rank` in training-index order.
    pub fn to_csv(&self) -> String {
        let ranks = self.ranks();
        let mut out = String::from("index,score,predicted_delta_loss,rank\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{},{:e},{:e},{}\n",
                s.train_index, s.pair_influence, s.predicted_delta_loss, ranks[s.train_index]
            ));
        }
        out
    }
}

/// Sorts indices by descending score with ties broken by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub(crate) fn params_fingerprint(theta: &[f64]) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|t| t.to_bits().to_le_bytes()).collect();
    fingerprint::sha256_hex(&bytes)[..16].to_string()
}

/// Influence computations against one problem with a prepared solver, so the
/// Hessian is assembled or factored once.
pub struct Influencer<'a, P: ErmProblem> {
    problem: &'a P,
    solver: IhvpSolver<'a>,
    config_hash: String,
}

impl<'a, P: ErmProblem> Influencer<'a, P> {
    pub fn new(problem: &'a P, config: &IhvpConfig) -> Result<Self> {
        Ok(Influencer {
            problem,
            solver: IhvpSolver::new(problem, config)?,
            config_hash: config.fingerprint(),
        })
    }

    pub fn problem(&self) -> &P {
        self.problem
    }

    pub fn solver(&self) -> &IhvpSolver<'a> {
        &self.solver
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn ihvp(&self, v: &[f64]) -> Result<IhvpResult> {
        self.solver.solve(v)
    }

    /// `-H^{-1} g` for a per-example gradient `g`.
    pub fn influence_param(&self, grad: &[f64]) -> Result<ParamVector> {
        let mut t = self.ihvp(grad)?.t;
        linalg::scale(-1.0, &mut t);
        Ok(ParamVector(t))
    }

    /// `-g_t^T H^{-1} g_z`.
    pub fn influence_pair(&self, grad_z: &[f64], grad_t: &[f64]) -> Result<f64> {
        Ok(-linalg::dot(grad_t, &self.ihvp(grad_z)?.t))
    }

    /// `theta* + H^{-1} grad l(z_i) / n`.
    pub fn predict_removed_params(&self, train_index: usize) -> Result<ParamVector> {
        self.check_index(train_index)?;
        let step = self.ihvp(&self.problem.train_gradient(train_index))?.t;
        let n = self.problem.num_train() as f64;
        let mut theta = self.problem.params().to_vec();
        linalg::axpy(1.0 / n, &step, &mut theta);
        Ok(ParamVector(theta))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.problem.num_train() {
            return Err(InfluenceError::InvalidInput(format!(
                "training index {i} out of range for {} points",
                self.problem.num_train()
            )));
        }
        Ok(())
    }

    /// Scores every training point against one test gradient, solving the
    /// test-side system `H s = g_t` once and dotting `s` with each training
    /// gradient.
    pub fn rank(&self, test: TestPoint, grad_t: &[f64]) -> Result<InfluenceReport> {
        let solved = self.ihvp(grad_t)?;
        let s = &solved.t;
        let n = self.problem.num_train();
        let nf = n as f64;
        let influences: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| -linalg::dot(s, &self.problem.train_gradient(i)))
            .collect();
        if let Some(i) = influences.iter().position(|x| !x.is_finite()) {
            return Err(InfluenceError::InvalidInput(format!(
                "non-finite influence for training point {i}"
            )));
        }
        let scores = influences
            .iter()
            .enumerate()
            .map(|(i, &inf)| InfluenceScore {
                train_index: i,
                test_index: test.index,
                pair_influence: inf,
                predicted_delta_loss: -inf / nf,
                solver_provenance: self.config_hash.clone(),
            })
            .collect();
        Ok(InfluenceReport {
            test_point: test,
            scores,
            ranking: rank_descending(&influences),
            ihvp_config_hash: self.config_hash.clone(),
            params_fingerprint: params_fingerprint(self.problem.params()),
            solve: SolveSummary::from(&solved),
        })
    }
}

/// Additive first-order estimate of the loss change from removing `group`:
/// the sum of the members' predicted loss changes.
pub fn group_influence_from_report(report: &InfluenceReport, group: &[usize]) -> Result<f64> {
    if group.is_empty() {
        return Err(InfluenceError::InvalidInput("group must not be empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut total = 0.0;
    for &i in group {
        let s = report.score(i).ok_or_else(|| {
            InfluenceError::InvalidInput(format!(
                "group index {i} out of range for {} points",
                report.n()
            ))
        })?;
        if !seen.insert(i) {
            return Err(InfluenceError::InvalidInput(format!(
                "group index {i} appears twice"
            )));
        }
        total += s.predicted_delta_loss;
    }
    Ok(total)
}

fn mlp_problem<'a>(trained: &'a TrainedModel, train: &'a Dataset) -> Result<MlpProblem<'a>> {
    MlpProblem::new(
        &trained.spec,
        &trained.theta_star,
        train.examples(),
        &trained.objective(),
    )
}

/// Parameter influence of example `z` on a trained network.
pub fn influence_param(
    trained: &TrainedModel,
    train: &Dataset,
    z: &Example,
    config: &IhvpConfig,
) -> Result<ParamVector> {
    let problem = mlp_problem(trained, train)?;
    let grad = problem.example_gradient(z)?;
    Influencer::new(&problem, config)?.influence_param(&grad)
}

/// Pair influence of training point `train_index` on test example `z_t`.
pub fn influence_pair(
    trained: &TrainedModel,
    train: &Dataset,
    train_index: usize,
    z_t: &Example,
    test_index: usize,
    config: &IhvpConfig,
) -> Result<InfluenceScore> {
    let problem = mlp_problem(trained, train)?;
    let inf = Influencer::new(&problem, config)?;
    inf.check_index(train_index)?;
    let grad_t = problem.example_gradient(z_t)?;
    let value = inf.influence_pair(&problem.train_gradient(train_index), &grad_t)?;
    Ok(InfluenceScore {
        train_index,
        test_index,
        pair_influence: value,
        predicted_delta_loss: -value / train.len() as f64,
        solver_provenance: inf.config_hash.clone(),
    })
}

pub fn predict_removed_params(
    trained: &TrainedModel,
    train: &Dataset,
    train_index: usize,
    config: &IhvpConfig,
) -> Result<ParamVector> {
    let problem = mlp_problem(trained, train)?;
    Influencer::new(&problem, config)?.predict_removed_params(train_index)
}

/// Scores all training points against the test example `z_t`.
pub fn rank_training_points(
    trained: &TrainedModel,
    train: &Dataset,
    z_t: &Example,
    test_index: usize,
    config: &IhvpConfig,
) -> Result<InfluenceReport> {
    let problem = mlp_problem(trained, train)?;
    let inf = Influencer::new(&problem, config)?;
    let test = TestPoint {
        index: test_index,
        loss: nn::example_loss(&trained.spec, &trained.theta_star, z_t)?,
    };
    inf.rank(test, &problem.example_gradient(z_t)?)
}

pub fn group_influence(
    trained: &TrainedModel,
    train: &Dataset,
    group: &[usize],
    z_t: &Example,
    config: &IhvpConfig,
) -> Result<f64> {
    if group.is_empty() {
        return Err(InfluenceError::InvalidInput("group must not be empty".into()));
    }
    let report = rank_training_points(trained, train, z_t, 0, config)?;
    group_influence_from_report(&report, group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{DenseMatrix, HvpOracle, StochasticHessian};

    /// Identity Hessian with fixed training gradients.
    struct Fixed {
        grads: Vec<Vec<f64>>,
        theta: Vec<f64>,
    }

    impl HvpOracle for Fixed {
        fn dim(&self) -> usize {
            self.theta.len()
        }
        fn apply(&self, v: &[f64]) -> Vec<f64> {
            DenseMatrix::identity(self.theta.len()).matvec(v)
        }
    }

    impl StochasticHessian for Fixed {
        fn num_components(&self) -> usize {
            self.grads.len()
        }
        fn component_apply(&self, _i: usize, v: &[f64]) -> Vec<f64> {
            v.to_vec()
        }
    }

    impl ErmProblem for Fixed {
        fn params(&self) -> &[f64] {
            &self.theta
        }
        fn num_train(&self) -> usize {
            self.grads.len()
        }
        fn train_gradient(&self, i: usize) -> Vec<f64> {
            self.grads[i].clone()
        }
    }

    fn fixed(grads: Vec<Vec<f64>>) -> Fixed {
        let p = grads[0].len();
        Fixed {
            grads,
            theta: vec![0.5; p],
        }
    }

    #[test]
    fn identity_hessian_pair_influence() {
        let problem = fixed(vec![vec![2.0, 0.0]]);
        let inf = Influencer::new(&problem, &IhvpConfig::default()).unwrap();
        assert_eq!(inf.influence_pair(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), -2.0);
        assert_eq!(inf.influence_param(&[2.0, -1.0]).unwrap().0, vec![-2.0, 1.0]);
        assert_eq!(inf.influence_param(&[0.0, 0.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn removal_prediction_is_a_scaled_newton_step() {
        let problem = fixed(vec![vec![2.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 4.0]]);
        let inf = Influencer::new(&problem, &IhvpConfig::default()).unwrap();
        assert_eq!(inf.predict_removed_params(0).unwrap().0, vec![1.0, 0.5]);
        assert_eq!(inf.predict_removed_params(1).unwrap().0, problem.theta);
        assert!(inf.predict_removed_params(4).is_err());
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_index() {
        assert_eq!(rank_descending(&[1.0, 3.0, 3.0, -1.0, 2.0]), vec![1, 2, 4, 0, 3]);
        assert_eq!(rank_descending(&[0.0]), vec![0]);

        // duplicated gradients score identically and sit next to each other
        let problem = fixed(vec![vec![1.0, 0.0], vec![-3.0, 1.0], vec![-3.0, 1.0], vec![0.5, 0.5]]);
        let inf = Influencer::new(&problem, &IhvpConfig::default()).unwrap();
        let report = inf.rank(TestPoint { index: 7, loss: 1.0 }, &[1.0, 0.0]).unwrap();
        assert_eq!(report.ranking, vec![1, 2, 3, 0]);
        assert_eq!(report.scores[1].pair_influence, report.scores[2].pair_influence);
        for s in &report.scores {
            assert_eq!(s.predicted_delta_loss, -s.pair_influence / 4.0);
            assert_eq!(s.test_index, 7);
        }
        assert_eq!(report.ranks(), vec![4, 1, 2, 3]);
        let csv = report.to_csv();
        assert!(csv.starts_with("index,score,predicted_delta_loss,rank\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn group_influence_is_additive() {
        let problem = fixed(vec![vec![1.0, 0.0], vec![-3.0, 1.0], vec![2.0, 2.0], vec![0.5, 0.5]]);
        let inf = Influencer::new(&problem, &IhvpConfig::default()).unwrap();
        let report = inf.rank(TestPoint { index: 0, loss: 0.0 }, &[1.0, -1.0]).unwrap();
        let single = group_influence_from_report(&report, &[2]).unwrap();
        assert_eq!(single, report.scores[2].predicted_delta_loss);
        let a = group_influence_from_report(&report, &[0, 1]).unwrap();
        let b = group_influence_from_report(&report, &[3]).unwrap();
        let ab = group_influence_from_report(&report, &[0, 1, 3]).unwrap();
        assert!((ab - (a + b)).abs() < 1e-15);
        assert!(group_influence_from_report(&report, &[]).is_err());
        assert!(group_influence_from_report(&report, &[1, 1]).is_err());
        assert!(group_influence_from_report(&report, &[9]).is_err());
    }
}
