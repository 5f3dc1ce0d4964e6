//! Leave-one-out and leave-group-out retraining: the realized loss and
//! parameter changes that influence estimates are judged against.
//!
//! Retrained parameters are cached by (checkpoint, removed set, protocol), so
//! one retraining serves every test point.

use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::data::Dataset;
use crate::error::{InfluenceError, Result};
use crate::influence::params_fingerprint;
use crate::linalg;
use crate::metrics;
use crate::nn::{self, Example, Objective, ParamVector};
use crate::training::{self, RetrainMode, TrainedModel, UpweightSpec};

/// How a retraining is run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainProtocol {
    pub steps: usize,
    pub mode: RetrainMode,
    /// When set, descent stops as soon as the gradient norm reaches this
    /// value and `steps` is only an upper bound.
    #[serde(default)]
    pub converge_tol: Option<f64>,
}

impl RetrainProtocol {
    pub fn fixed(steps: usize, mode: RetrainMode) -> Self {
        RetrainProtocol {
            steps,
            mode,
            converge_tol: None,
        }
    }

    pub fn to_convergence(tol: f64, max_steps: usize) -> Self {
        RetrainProtocol {
            steps: max_steps,
            mode: RetrainMode::WarmStart,
            converge_tol: Some(tol),
        }
    }
}

/// Parameters after retraining with `removed` taken out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrained {
    pub removed: Vec<usize>,
    pub protocol: RetrainProtocol,
    pub steps_taken: usize,
    pub theta: ParamVector,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub removed: Vec<usize>,
    pub test_index: usize,
    pub mode: RetrainMode,
    pub steps: usize,
    pub steps_taken: usize,
    /// `loss(retrained, z_t) - loss(theta*, z_t)`, raw per-example loss.
    pub delta_loss_at_test: f64,
    pub delta_param_norm: f64,
    pub retrained_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainFailure {
    pub removed: Vec<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub records: Vec<GroundTruthRecord>,
    pub failures: Vec<RetrainFailure>,
}

impl GroundTruthSet {
    pub fn record_for(&self, train_index: usize) -> Option<&GroundTruthRecord> {
        self.records.iter().find(|r| r.removed == [train_index])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "removed,test_index,mode,steps,steps_taken,delta_loss_at_test,delta_param_norm,retrained_checkpoint\n",
        );
        for r in &self.records {
            let removed: Vec<String> = r.removed.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{:e},{:e},{}\n",
                removed.join(" "),
                r.test_index,
                r.mode,
                r.steps,
                r.steps_taken,
                r.delta_loss_at_test,
                r.delta_param_norm,
                r.retrained_checkpoint
            ));
        }
        out
    }
}

/// Shared execution state: the cache and the retraining worker count.
#[derive(Debug)]
pub struct JobContext<'a> {
    pub cache: &'a Cache,
    pub workers: usize,
}

impl<'a> JobContext<'a> {
    pub fn new(cache: &'a Cache, workers: usize) -> Self {
        JobContext {
            cache,
            workers: workers.max(1),
        }
    }

    /// Runs `f` over `items` on at most `workers` threads, results in input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        use rayon::prelude::*;
        if self.workers == 1 || items.len() < 2 {
            return items.iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(self.workers).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        }
    }
}

#[derive(Serialize)]
struct RetrainKey<'a> {
    checkpoint: &'a str,
    removed: &'a [usize],
    protocol: &'a RetrainProtocol,
}

fn normalize_group(group: &[usize], n: usize) -> Result<Vec<usize>> {
    if group.is_empty() {
        return Err(InfluenceError::InvalidInput("removal group must not be empty".into()));
    }
    let mut g = group.to_vec();
    g.sort_unstable();
    g.dedup();
    if g.len() != group.len() {
        return Err(InfluenceError::InvalidInput("removal group has duplicate indices".into()));
    }
    if let Some(&bad) = g.iter().find(|&&i| i >= n) {
        return Err(InfluenceError::InvalidInput(format!(
            "removal index {bad} out of range for {n} training points"
        )));
    }
    if g.len() == n {
        return Err(InfluenceError::InvalidInput("cannot remove every training point".into()));
    }
    Ok(g)
}

fn retrain_uncached(
    trained: &TrainedModel,
    train: &Dataset,
    removed: &[usize],
    protocol: &RetrainProtocol,
) -> Result<Retrained> {
    let upweight = UpweightSpec::remove(removed.iter().copied());
    let (theta, steps_taken) = match protocol.converge_tol {
        None => {
            let out = training::retrain_unchecked(trained, train, &upweight, protocol.steps, protocol.mode)?;
            (out.theta_star, protocol.steps)
        }
        Some(tol) => {
            let start = match protocol.mode {
                RetrainMode::WarmStart => trained.theta_star.clone(),
                RetrainMode::Scratch => nn::init_params(&trained.spec, trained.config.seed),
            };
            let obj = Objective::weighted(trained.config.weight_decay, upweight.weights(train.len())?);
            training::descend_to_tolerance(
                &trained.spec,
                train,
                &obj,
                &start,
                trained.config.learning_rate,
                tol,
                protocol.steps,
            )?
        }
    };
    Ok(Retrained {
        removed: removed.to_vec(),
        protocol: *protocol,
        steps_taken,
        checkpoint: params_fingerprint(&theta),
        theta,
    })
}

/// Key under which a trained model is identified in the cache.
pub fn model_checkpoint(trained: &TrainedModel) -> String {
    Cache::key_of(&(
        &trained.spec,
        &trained.config,
        &trained.dataset_fingerprint,
        params_fingerprint(&trained.theta_star),
    ))
}

/// Retrains once with `group` removed, through the cache.
pub fn retrain_without(
    trained: &TrainedModel,
    train: &Dataset,
    group: &[usize],
    protocol: &RetrainProtocol,
    cache: &Cache,
) -> Result<Retrained> {
    let removed = normalize_group(group, train.len())?;
    let checkpoint = model_checkpoint(trained);
    let key = Cache::key_of(&RetrainKey {
        checkpoint: &checkpoint,
        removed: &removed,
        protocol,
    });
    cache
        .get_or_compute("retrain", &key, || retrain_uncached(trained, train, &removed, protocol))
        .map(|(r, _)| r)
}

/// One retraining per group, in parallel; failures are collected, not fatal.
pub fn retrain_groups(
    trained: &TrainedModel,
    train: &Dataset,
    groups: &[Vec<usize>],
    protocol: &RetrainProtocol,
    ctx: &JobContext,
) -> Result<(Vec<Retrained>, Vec<RetrainFailure>)> {
    if train.fingerprint() != trained.dataset_fingerprint {
        return Err(InfluenceError::InvalidInput(
            "ground-truth dataset does not match the trained model's fingerprint".into(),
        ));
    }
    let results = ctx.map(groups, |g| retrain_without(trained, train, g, protocol, ctx.cache));
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (g, r) in groups.iter().zip(results) {
        match r {
            Ok(r) => ok.push(r),
            Err(e) if e.is_numerical() => failed.push(RetrainFailure {
                removed: g.clone(),
                error: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((ok, failed))
}

/// The record of one retraining as seen from test point `z_t`.
pub fn record_for_test(
    trained: &TrainedModel,
    retrained: &Retrained,
    z_t: &Example,
    test_index: usize,
) -> Result<GroundTruthRecord> {
    let before = nn::example_loss(&trained.spec, &trained.theta_star, z_t)?;
    let after = nn::example_loss(&trained.spec, &retrained.theta, z_t)?;
    let delta_param_norm = linalg::distance(&retrained.theta, &trained.theta_star);
    let delta_loss_at_test = after - before;
    if !delta_loss_at_test.is_finite() || !delta_param_norm.is_finite() {
        return Err(InfluenceError::Divergence {
            step: retrained.steps_taken,
            objective: f64::NAN,
        });
    }
    Ok(GroundTruthRecord {
        removed: retrained.removed.clone(),
        test_index,
        mode: retrained.protocol.mode,
        steps: retrained.protocol.steps,
        steps_taken: retrained.steps_taken,
        delta_loss_at_test,
        delta_param_norm,
        retrained_checkpoint: retrained.checkpoint.clone(),
    })
}

fn records(
    trained: &TrainedModel,
    retrained: &[Retrained],
    failures: Vec<RetrainFailure>,
    z_t: &Example,
    test_index: usize,
) -> Result<GroundTruthSet> {
    let mut set = GroundTruthSet {
        records: Vec::with_capacity(retrained.len()),
        failures,
    };
    for r in retrained {
        match record_for_test(trained, r, z_t, test_index) {
            Ok(rec) => set.records.push(rec),
            Err(e) => set.failures.push(RetrainFailure {
                removed: r.removed.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(set)
}

/// Leave-one-out ground truth for each candidate, measured at `z_t`.
pub fn loo_ground_truth(
    trained: &TrainedModel,
    train: &Dataset,
    candidates: &[usize],
    z_t: &Example,
    test_index: usize,
    protocol: &RetrainProtocol,
    ctx: &JobContext,
) -> Result<GroundTruthSet> {
    let groups: Vec<Vec<usize>> = candidates.iter().map(|&i| vec![i]).collect();
    let (retrained, failures) = retrain_groups(trained, train, &groups, protocol, ctx)?;
    records(trained, &retrained, failures, z_t, test_index)
}

/// Ground truth for removing the whole `group` at once.
pub fn group_ground_truth(
    trained: &TrainedModel,
    train: &Dataset,
    group: &[usize],
    z_t: &Example,
    test_index: usize,
    protocol: &RetrainProtocol,
    cache: &Cache,
) -> Result<GroundTruthRecord> {
    let retrained = retrain_without(trained, train, group, protocol, cache)?;
    record_for_test(trained, &retrained, z_t, test_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchWarmRow {
    pub train_index: usize,
    /// `||theta'_scratch - theta'_warm||`.
    pub param_difference: f64,
    pub warm_delta_loss: f64,
    pub scratch_delta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchWarmReport {
    pub warm_steps: usize,
    pub scratch_steps: usize,
    pub rows: Vec<ScratchWarmRow>,
    pub failures: Vec<RetrainFailure>,
    /// Correlations of the two delta-loss vectors; `None` when undefined.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Retrains every candidate both warm (from `theta*`) and from scratch and
/// compares the two outcomes. A `converge_tol` on the warm protocol applies
/// to both runs, with `scratch_steps` as the scratch cap.
pub fn scratch_vs_warm_report(
    trained: &TrainedModel,
    train: &Dataset,
    candidates: &[usize],
    z_t: &Example,
    warm_protocol: &RetrainProtocol,
    scratch_steps: usize,
    ctx: &JobContext,
) -> Result<ScratchWarmReport> {
    let groups: Vec<Vec<usize>> = candidates.iter().map(|&i| vec![i]).collect();
    let warm_protocol = RetrainProtocol {
        mode: RetrainMode::WarmStart,
        ..*warm_protocol
    };
    let scratch_protocol = RetrainProtocol {
        steps: scratch_steps,
        mode: RetrainMode::Scratch,
        converge_tol: warm_protocol.converge_tol,
    };
    let (warm, mut failures) = retrain_groups(trained, train, &groups, &warm_protocol, ctx)?;
    let (scratch, scratch_failures) = retrain_groups(trained, train, &groups, &scratch_protocol, ctx)?;
    failures.extend(scratch_failures);
    let before = nn::example_loss(&trained.spec, &trained.theta_star, z_t)?;
    let mut rows = Vec::new();
    for w in &warm {
        let Some(s) = scratch.iter().find(|s| s.removed == w.removed) else {
            continue;
        };
        rows.push(ScratchWarmRow {
            train_index: w.removed[0],
            param_difference: linalg::distance(&s.theta, &w.theta),
            warm_delta_loss: nn::example_loss(&trained.spec, &w.theta, z_t)? - before,
            scratch_delta_loss: nn::example_loss(&trained.spec, &s.theta, z_t)? - before,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.warm_delta_loss).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.scratch_delta_loss).collect();
    Ok(ScratchWarmReport {
        warm_steps: warm_protocol.steps,
        scratch_steps,
        pearson: metrics::pearson(&xs, &ys).ok(),
        spearman: metrics::spearman(&xs, &ys).ok(),
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nn::{Activation, ModelSpec};
    use crate::training::{train, TrainConfig};

    fn small() -> (TrainedModel, Dataset) {
        let ds = gen_blobs(8, 2, 2, 3.0, 5).unwrap();
        let spec = ModelSpec::uniform(2, 1, 3, 2, Activation::Tanh).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.2,
            steps: 300,
            weight_decay: 1e-2,
            seed: 1,
            record_grad_norm_every: 0,
        };
        (train(&spec, &ds, &cfg).unwrap(), ds)
    }

    #[test]
    fn zero_steps_give_zero_deltas() {
        let (m, ds) = small();
        let cache = Cache::disabled();
        let ctx = JobContext::new(&cache, 1);
        let set = loo_ground_truth(
            &m,
            &ds,
            &[0, 3, 7],
            &ds.examples[1],
            1,
            &RetrainProtocol::fixed(0, RetrainMode::WarmStart),
            &ctx,
        )
        .unwrap();
        assert_eq!(set.records.len(), 3);
        for r in &set.records {
            assert_eq!(r.delta_loss_at_test, 0.0);
            assert_eq!(r.delta_param_norm, 0.0);
        }
    }

    #[test]
    fn cached_and_fresh_records_are_identical() {
        let (m, ds) = small();
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let protocol = RetrainProtocol::fixed(50, RetrainMode::WarmStart);
        let fresh = loo_ground_truth(&m, &ds, &[2, 5], &ds.examples[0], 0, &protocol, &JobContext::new(&cache, 2))
            .unwrap();
        assert_eq!(cache.stats().writes, 2);
        let again = loo_ground_truth(&m, &ds, &[2, 5], &ds.examples[0], 0, &protocol, &JobContext::new(&cache, 1))
            .unwrap();
        assert_eq!(cache.stats().hits, 2);
        let uncached = loo_ground_truth(
            &m,
            &ds,
            &[2, 5],
            &ds.examples[0],
            0,
            &protocol,
            &JobContext::new(&Cache::disabled(), 1),
        )
        .unwrap();
        assert_eq!(fresh, again);
        assert_eq!(fresh, uncached);
    }

    #[test]
    fn singleton_group_equals_loo_record() {
        let (m, ds) = small();
        let cache = Cache::disabled();
        let protocol = RetrainProtocol::fixed(40, RetrainMode::WarmStart);
        let g = group_ground_truth(&m, &ds, &[4], &ds.examples[2], 2, &protocol, &cache).unwrap();
        let set = loo_ground_truth(&m, &ds, &[4], &ds.examples[2], 2, &protocol, &JobContext::new(&cache, 1))
            .unwrap();
        assert_eq!(set.records[0], g);
        assert!(group_ground_truth(&m, &ds, &[], &ds.examples[0], 0, &protocol, &cache).is_err());
        assert!(group_ground_truth(&m, &ds, &[1, 1], &ds.examples[0], 0, &protocol, &cache).is_err());
    }

    #[test]
    fn zero_step_scratch_difference_is_init_distance() {
        let (m, ds) = small();
        let cache = Cache::disabled();
        let report =
            scratch_vs_warm_report(
            &m,
            &ds,
            &[0, 1],
            &ds.examples[0],
            &RetrainProtocol::fixed(0, RetrainMode::WarmStart),
            0,
            &JobContext::new(&cache, 1),
        ).unwrap();
        let init = nn::init_params(&m.spec, m.config.seed);
        let expected = linalg::distance(&init, &m.theta_star);
        for row in &report.rows {
            assert_eq!(row.param_difference, expected);
            assert_eq!(row.warm_delta_loss, 0.0);
        }
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let (m, ds) = small();
        let cache = Cache::disabled();
        let set = loo_ground_truth(
            &m,
            &ds,
            &[0, 1, 2],
            &ds.examples[0],
            0,
            &RetrainProtocol::fixed(5, RetrainMode::WarmStart),
            &JobContext::new(&cache, 1),
        )
        .unwrap();
        let csv = set.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,warm_start,5,5,"));
    }
}
