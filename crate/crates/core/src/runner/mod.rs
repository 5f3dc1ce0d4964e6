//! Config-driven experiments: train, score, retrain, correlate, report.
//!
//! A run expands the config into (sweep point, seed) jobs and executes them
//! in order. Trained models and retrainings go through the [`Cache`], so a
//! rerun with an intact cache performs no optimization at all. Reports are
//! pure functions of the config; wall-clock timings only appear in the
//! `run.log` sidecar.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::curvature;
use crate::data::Dataset;
use crate::error::{InfluenceError, Result};
use crate::groundtruth::{self, GroundTruthSet, JobContext};
use crate::ihvp::{IhvpConfig, SolverKind};
use crate::influence::{self, InfluenceReport, Influencer, TestPoint};
use crate::metrics::{self, CorrelationRow, SelectionRule, TaylorGapRow};
use crate::nn::{self, ModelSpec};
use crate::oracle::MlpProblem;
use crate::training::{self, TrainedModel};

pub use config::{ExperimentConfig, PointSettings, SweepValue, FORMAT_VERSION};

const EIGEN_TOL: f64 = 1e-8;
const EIGEN_MAX_ITERS: usize = 1_000;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides [`crate::cache::CACHE_DIR_ENV`]; with neither, results are
    /// not cached.
    pub cache_dir: Option<PathBuf>,
    /// Concurrent retraining jobs; 0 means one per available core.
    pub workers: usize,
    /// Replaces the config's seed list with this single seed.
    pub seed_override: Option<u64>,
    /// Replaces the config's output directory.
    pub output_dir: Option<PathBuf>,
}

impl RunOptions {
    fn cache(&self) -> Cache {
        match self
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(crate::cache::CACHE_DIR_ENV).map(PathBuf::from))
        {
            Some(dir) => Cache::new(dir),
            None => Cache::disabled(),
        }
    }

    fn workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }

    fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.clone();
        if let Some(seed) = self.seed_override {
            c.seeds = vec![seed];
        }
        if let Some(dir) = &self.output_dir {
            c.output_dir = dir.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverCorrelation {
    pub solver: SolverKind,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_pairs: usize,
    pub excluded: usize,
    pub damping_used: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchSummary {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub max_param_difference: f64,
    pub rows: Vec<groundtruth::ScratchWarmRow>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: Vec<usize>,
    pub predicted_delta_loss: f64,
    pub actual_delta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub sweep_value: Option<SweepValue>,
    pub seed: u64,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub model_checkpoint: Option<String>,
    pub final_objective: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub top_eigenvalue: Option<f64>,
    pub test_indices: Vec<usize>,
    pub candidates: Vec<usize>,
    /// The configured solver first, then `compare_solvers` in order.
    pub correlations: Vec<SolverCorrelation>,
    pub taylor_gap_spearman: Option<f64>,
    pub taylor_gap: Vec<TaylorGapRow>,
    pub ground_truth_failures: usize,
    pub scratch: Option<ScratchSummary>,
    pub groups: Vec<GroupRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    Failed,
}

impl PointRecord {
    fn failed(settings: &PointSettings, error: &InfluenceError) -> Self {
        PointRecord {
            sweep_value: settings.sweep_value,
            seed: settings.seed,
            status: PointStatus::Failed,
            error: Some(error.to_string()),
            model_checkpoint: None,
            final_objective: None,
            final_grad_norm: None,
            top_eigenvalue: None,
            test_indices: vec![],
            candidates: vec![],
            correlations: vec![],
            taylor_gap_spearman: None,
            taylor_gap: vec![],
            ground_truth_failures: 0,
            scratch: None,
            groups: vec![],
        }
    }

    pub fn primary(&self) -> Option<&SolverCorrelation> {
        self.correlations.first()
    }

    pub fn correlation_for(&self, solver: SolverKind) -> Option<&SolverCorrelation> {
        self.correlations.iter().find(|c| c.solver == solver)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: Option<SweepValue>,
    pub solver: SolverKind,
    pub n_ok: usize,
    pub median_pearson: Option<f64>,
    pub median_spearman: Option<f64>,
    pub median_top_eigenvalue: Option<f64>,
    pub median_taylor_gap_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub experiment_id: String,
    pub config_fingerprint: String,
    pub sweep_axis: String,
    pub test_rules: Vec<String>,
    pub candidate_rule: String,
    pub init_scheme: String,
    pub failed_points: usize,
    pub ground_truth_failures: usize,
    pub records: Vec<PointRecord>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn records_at(&self, value: Option<SweepValue>) -> impl Iterator<Item = &PointRecord> {
        self.records.iter().filter(move |r| r.sweep_value == value)
    }

    pub fn summary_for(&self, value: Option<SweepValue>, solver: SolverKind) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.sweep_value == value && s.solver == solver)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub trainings_run: usize,
    pub trainings_cached: usize,
    pub retrainings_run: usize,
    pub retrainings_cached: usize,
    pub failed_points: usize,
    pub output_dir: PathBuf,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    })
}

struct Data {
    train: Dataset,
    test: Dataset,
    num_classes: usize,
}

fn resolve_spec(settings: &PointSettings, data: &Data) -> Result<ModelSpec> {
    ModelSpec::new(
        data.train.feature_dim,
        settings.spec.hidden_widths.clone(),
        data.num_classes,
        settings.spec.activation,
    )
}

/// Trains through the cache; the boolean reports a cache hit.
pub fn train_cached(
    spec: &ModelSpec,
    train: &Dataset,
    cfg: &training::TrainConfig,
    cache: &Cache,
) -> Result<(TrainedModel, bool)> {
    let key = Cache::key_of(&(train.fingerprint(), spec, cfg));
    cache.get_or_compute("model", &key, || training::train(spec, train, cfg))
}

fn experiment_point_id(config: &ExperimentConfig, p: &PointRecord) -> String {
    match p.sweep_value {
        Some(v) => format!("{}/{}={}/seed={}", config.experiment_id, config.sweep.axis(), v, p.seed),
        None => format!("{}/seed={}", config.experiment_id, p.seed),
    }
}

struct PointRunner<'a> {
    config: &'a ExperimentConfig,
    data: &'a Data,
    ctx: JobContext<'a>,
}

impl PointRunner<'_> {
    fn run(&self, settings: &PointSettings) -> Result<PointRecord> {
        let spec = resolve_spec(settings, self.data)?;
        let train = &self.data.train;
        let test = &self.data.test;
        let (trained, _) = train_cached(&spec, train, &settings.train, self.ctx.cache)?;
        let problem = MlpProblem::new(&trained.spec, &trained.theta_star, train.examples(), &trained.objective())?;
        let top = curvature::top_eigenvalue(&problem, EIGEN_TOL, EIGEN_MAX_ITERS, settings.seed);

        let rules: Vec<SelectionRule> = std::iter::once(self.config.test_rule)
            .chain(self.config.extra_test_rules.iter().copied())
            .collect();
        let losses = nn::example_losses(&trained.spec, &trained.theta_star, test.examples())?;
        let test_indices = rules
            .iter()
            .map(|r| metrics::select_by_loss(&losses, r))
            .collect::<Result<Vec<_>>>()?;

        let primary = Influencer::new(&problem, &settings.ihvp)?;
        let rank_with = |inf: &Influencer<'_, MlpProblem<'_>>| -> Result<Vec<InfluenceReport>> {
            test_indices
                .iter()
                .map(|&t| {
                    let z = &test.examples[t];
                    inf.rank(
                        TestPoint {
                            index: t,
                            loss: losses[t],
                        },
                        &problem.example_gradient(z)?,
                    )
                })
                .collect()
        };
        let reports = rank_with(&primary)?;
        let protocol = self.config.ground_truth_protocol();

        let mut record = PointRecord {
            sweep_value: settings.sweep_value,
            seed: settings.seed,
            status: PointStatus::Ok,
            error: None,
            model_checkpoint: Some(groundtruth::model_checkpoint(&trained)),
            final_objective: Some(trained.final_objective),
            final_grad_norm: Some(trained.final_grad_norm),
            top_eigenvalue: Some(top.value),
            test_indices: test_indices.clone(),
            candidates: vec![],
            correlations: vec![],
            taylor_gap_spearman: None,
            taylor_gap: vec![],
            ground_truth_failures: 0,
            scratch: None,
            groups: vec![],
        };

        if let Some(size) = settings.group_size {
            self.run_groups(&trained, &reports[0], size, settings, &mut record)?;
            return Ok(record);
        }

        let mut candidate_sets = Vec::new();
        let mut gts = Vec::new();
        for report in &reports {
            let candidates = metrics::select_candidates(report, &self.config.candidate_rule)?;
            let t = report.test_point.index;
            let gt = groundtruth::loo_ground_truth(
                &trained,
                train,
                &candidates,
                &test.examples[t],
                t,
                &protocol,
                &self.ctx,
            )?;
            candidate_sets.push(candidates);
            gts.push(gt);
        }
        record.ground_truth_failures = gts.iter().map(|g| g.failures.len()).sum();
        record.candidates = candidate_sets[0].clone();

        record
            .correlations
            .push(correlation_entry(settings.ihvp.solver, Some(primary.solver().damping_used()), Ok(&reports), &gts));
        for &solver in &self.config.compare_solvers {
            // Same damping as the primary solve, so only the solver differs.
            let cfg = IhvpConfig {
                solver,
                damping: primary.solver().damping_used(),
                ..settings.ihvp.clone()
            };
            let other = Influencer::new(&problem, &cfg).and_then(|inf| {
                let damping = inf.solver().damping_used();
                rank_with(&inf).map(|r| (r, damping))
            });
            let entry = match &other {
                Ok((r, damping)) => correlation_entry(solver, Some(*damping), Ok(r), &gts),
                Err(e) => correlation_entry(solver, None, Err(e), &gts),
            };
            record.correlations.push(entry);
        }

        match metrics::taylor_gap_report(&primary, &candidate_sets[0], &gts[0]) {
            Ok(gap) => {
                record.taylor_gap_spearman = Some(gap.spearman);
                record.taylor_gap = gap.rows;
            }
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }

        if let Some(scratch) = &self.config.scratch {
            let t = test_indices[0];
            let report = groundtruth::scratch_vs_warm_report(
                &trained,
                train,
                &candidate_sets[0],
                &test.examples[t],
                &protocol,
                scratch.scratch_steps,
                &self.ctx,
            )?;
            record.scratch = Some(ScratchSummary {
                pearson: report.pearson,
                spearman: report.spearman,
                max_param_difference: report
                    .rows
                    .iter()
                    .map(|r| r.param_difference)
                    .fold(0.0, f64::max),
                failures: report.failures.len(),
                rows: report.rows,
            });
        }
        Ok(record)
    }

    fn run_groups(
        &self,
        trained: &TrainedModel,
        report: &InfluenceReport,
        size: usize,
        settings: &PointSettings,
        record: &mut PointRecord,
    ) -> Result<()> {
        let g = self.config.groups.as_ref().expect("validated: groups present");
        let n = self.data.train.len();
        if size >= n {
            return Err(InfluenceError::InvalidInput(format!(
                "group size {size} must be below the {n} training points"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            g.seed ^ settings.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (size as u64).rotate_left(32),
        );
        let groups: Vec<Vec<usize>> = (0..g.num_groups)
            .map(|_| {
                let mut idx = sample(&mut rng, n, size).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        let t = report.test_point.index;
        let z_t = &self.data.test.examples[t];
        let protocol = self.config.ground_truth_protocol();
        let (retrained, failures) =
            groundtruth::retrain_groups(trained, &self.data.train, &groups, &protocol, &self.ctx)?;
        record.ground_truth_failures = failures.len();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in &retrained {
            let rec = groundtruth::record_for_test(trained, r, z_t, t)?;
            let predicted = influence::group_influence_from_report(report, &r.removed)?;
            xs.push(predicted);
            ys.push(rec.delta_loss_at_test);
            record.groups.push(GroupRow {
                group: r.removed.clone(),
                predicted_delta_loss: predicted,
                actual_delta_loss: rec.delta_loss_at_test,
            });
        }
        let (pearson, spearman, error) = match (metrics::pearson(&xs, &ys), metrics::spearman(&xs, &ys)) {
            (Ok(p), Ok(s)) => (Some(p), Some(s), None),
            (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
        };
        record.correlations.push(SolverCorrelation {
            solver: settings.ihvp.solver,
            pearson,
            spearman,
            n_pairs: xs.len(),
            excluded: failures.len(),
            damping_used: Some(report.solve.damping_used),
            error,
        });
        Ok(())
    }
}

fn correlation_entry(
    solver: SolverKind,
    damping_used: Option<f64>,
    reports: std::result::Result<&Vec<InfluenceReport>, &InfluenceError>,
    gts: &[GroundTruthSet],
) -> SolverCorrelation {
    let failed = |error: String| SolverCorrelation {
        solver,
        pearson: None,
        spearman: None,
        n_pairs: 0,
        excluded: gts.iter().map(|g| g.failures.len()).sum(),
        damping_used,
        error: Some(error),
    };
    let reports = match reports {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    let rs: Vec<&InfluenceReport> = reports.iter().collect();
    let gs: Vec<&GroundTruthSet> = gts.iter().collect();
    match metrics::correlate_influence(&rs, &gs) {
        Ok(c) => SolverCorrelation {
            solver,
            pearson: Some(c.pearson),
            spearman: Some(c.spearman),
            n_pairs: c.n_pairs,
            excluded: c.excluded,
            damping_used,
            error: None,
        },
        Err(e) => failed(e.to_string()),
    }
}

fn summarize(config: &ExperimentConfig, records: &[PointRecord]) -> Vec<SummaryRow> {
    let solvers: Vec<SolverKind> = match &config.sweep.solver {
        Some(_) => vec![],
        None => std::iter::once(config.ihvp.solver)
            .chain(config.compare_solvers.iter().copied())
            .collect(),
    };
    let mut out = Vec::new();
    for value in config.sweep.values() {
        let at: Vec<&PointRecord> = records
            .iter()
            .filter(|r| r.sweep_value == value && r.status == PointStatus::Ok)
            .collect();
        let point_solvers = match value {
            Some(SweepValue::Solver(s)) => vec![s],
            _ => solvers.clone(),
        };
        for solver in point_solvers {
            let corr: Vec<&SolverCorrelation> =
                at.iter().filter_map(|r| r.correlation_for(solver)).collect();
            let collect = |f: &dyn Fn(&SolverCorrelation) -> Option<f64>| -> Vec<f64> {
                corr.iter().filter_map(|c| f(c)).collect()
            };
            let eig: Vec<f64> = at.iter().filter_map(|r| r.top_eigenvalue).collect();
            let gap: Vec<f64> = at.iter().filter_map(|r| r.taylor_gap_spearman).collect();
            out.push(SummaryRow {
                sweep_value: value,
                solver,
                n_ok: at.len(),
                median_pearson: median(&collect(&|c| c.pearson)),
                median_spearman: median(&collect(&|c| c.spearman)),
                median_top_eigenvalue: median(&eig),
                median_taylor_gap_spearman: median(&gap),
            });
        }
    }
    out
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn sweep_cell(v: Option<SweepValue>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Main results table: one row per (sweep point, seed, solver).
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "experiment_id,sweep_axis,sweep_value,seed,status,solver,test_rules,candidate_rule,pearson,spearman,n_pairs,excluded,damping_used,top_eigenvalue,taylor_gap_spearman,final_grad_norm,model_checkpoint\n",
    );
    let tests = report.test_rules.join(" ");
    for r in &report.records {
        let base = |solver: String, c: Option<&SolverCorrelation>| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                report.experiment_id,
                report.sweep_axis,
                sweep_cell(r.sweep_value),
                r.seed,
                match r.status {
                    PointStatus::Ok => "ok",
                    PointStatus::Failed => "failed",
                },
                solver,
                tests,
                report.candidate_rule,
                num(c.and_then(|c| c.pearson)),
                num(c.and_then(|c| c.spearman)),
                c.map(|c| c.n_pairs).unwrap_or(0),
                c.map(|c| c.excluded).unwrap_or(0),
                num(c.and_then(|c| c.damping_used)),
                num(r.top_eigenvalue),
                num(r.taylor_gap_spearman),
                num(r.final_grad_norm),
                r.model_checkpoint.clone().unwrap_or_default()
            )
        };
        if r.correlations.is_empty() {
            out.push_str(&base(String::new(), None));
        }
        for c in &r.correlations {
            out.push_str(&base(c.solver.to_string(), Some(c)));
        }
    }
    out
}

fn correlation_rows(config_id: &str, report: &ExperimentReport) -> Vec<CorrelationRow> {
    let mut rows = Vec::new();
    for r in &report.records {
        let id = match r.sweep_value {
            Some(v) => format!("{config_id}/{}={}/seed={}", report.sweep_axis, v, r.seed),
            None => format!("{config_id}/seed={}", r.seed),
        };
        for c in &r.correlations {
            rows.push(CorrelationRow {
                experiment_id: id.clone(),
                test_rule: report.test_rules.join(" "),
                candidate_rule: report.candidate_rule.clone(),
                solver: c.solver.to_string(),
                pearson: c.pearson,
                spearman: c.spearman,
                n_pairs: c.n_pairs,
                excluded: c.excluded,
            });
        }
    }
    rows
}

/// Plot-data tables, keyed by file name.
pub fn plot_tables(report: &ExperimentReport) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    let axis = &report.sweep_axis;
    let ok = || report.records.iter().filter(|r| r.status == PointStatus::Ok);

    let mut spearman = String::from("x,y,seed,solver\n");
    let mut pearson = String::from("x,y,seed,solver\n");
    for r in ok() {
        for c in &r.correlations {
            if let Some(s) = c.spearman {
                let _ = writeln!(spearman, "{},{s},{},{}", sweep_cell(r.sweep_value), r.seed, c.solver);
            }
            if let Some(p) = c.pearson {
                let _ = writeln!(pearson, "{},{p},{},{}", sweep_cell(r.sweep_value), r.seed, c.solver);
            }
        }
    }
    files.insert(format!("plot_spearman_vs_{axis}.csv"), spearman);
    files.insert(format!("plot_pearson_vs_{axis}.csv"), pearson);

    let mut eig = String::from("x,y,seed\n");
    let mut gap = String::from("x,y,seed\n");
    let mut norms = String::from("x,y,seed,sweep_value,train_index\n");
    for r in ok() {
        if let Some(e) = r.top_eigenvalue {
            let _ = writeln!(eig, "{},{e},{}", sweep_cell(r.sweep_value), r.seed);
        }
        if let Some(g) = r.taylor_gap_spearman {
            let _ = writeln!(gap, "{},{g},{}", sweep_cell(r.sweep_value), r.seed);
        }
        for row in &r.taylor_gap {
            let _ = writeln!(
                norms,
                "{},{},{},{},{}",
                row.predicted_norm,
                row.retrained_norm,
                r.seed,
                sweep_cell(r.sweep_value),
                row.train_index
            );
        }
    }
    files.insert(format!("plot_top_eigenvalue_vs_{axis}.csv"), eig);
    files.insert(format!("plot_taylor_gap_spearman_vs_{axis}.csv"), gap);
    files.insert("plot_param_change_norms.csv".into(), norms);

    if ok().any(|r| r.scratch.is_some()) {
        let mut losses = String::from("x,y,seed,sweep_value,train_index\n");
        let mut diffs = String::from("x,y,seed,sweep_value\n");
        for r in ok() {
            for row in r.scratch.iter().flat_map(|s| &s.rows) {
                let _ = writeln!(
                    losses,
                    "{},{},{},{},{}",
                    row.warm_delta_loss,
                    row.scratch_delta_loss,
                    r.seed,
                    sweep_cell(r.sweep_value),
                    row.train_index
                );
                let _ = writeln!(
                    diffs,
                    "{},{},{},{}",
                    row.train_index,
                    row.param_difference,
                    r.seed,
                    sweep_cell(r.sweep_value)
                );
            }
        }
        files.insert("plot_scratch_vs_warm_delta_loss.csv".into(), losses);
        files.insert("plot_scratch_vs_warm_param_difference.csv".into(), diffs);
    }
    if ok().any(|r| !r.groups.is_empty()) {
        let mut groups = String::from("x,y,seed,group_size\n");
        for r in ok() {
            for g in &r.groups {
                let _ = writeln!(
                    groups,
                    "{},{},{},{}",
                    g.predicted_delta_loss,
                    g.actual_delta_loss,
                    r.seed,
                    g.group.len()
                );
            }
        }
        files.insert("plot_group_influence.csv".into(), groups);
    }
    files
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| InfluenceError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| InfluenceError::io(path, e))
}

/// Writes `report.json`, `report.csv`, `correlations.csv` and the plot tables.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| InfluenceError::io(dir, e))?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("report.csv"), &report_csv(report))?;
    write_file(
        &dir.join("correlations.csv"),
        &metrics::correlation_csv(&correlation_rows(&report.experiment_id, report)),
    )?;
    for (name, body) in plot_tables(report) {
        write_file(&dir.join(name), &body)?;
    }
    Ok(())
}

/// Re-renders the CSV and plot tables from an existing `report.json`.
pub fn rerender(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| InfluenceError::io(&path, e))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    if report.format_version != FORMAT_VERSION {
        return Err(InfluenceError::InvalidConfig(vec![format!(
            "report format_version {} is not {FORMAT_VERSION}",
            report.format_version
        )]));
    }
    write_report(&report, dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ok: bool,
    pub problems: Vec<String>,
    pub points: usize,
    pub trainings: usize,
    pub retrainings: usize,
    pub train_size: Option<usize>,
}

impl std::fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.ok {
            writeln!(f, "ok")?;
            write!(
                f,
                "{} jobs: {} trainings, at most {} retrainings",
                self.points, self.trainings, self.retrainings
            )
        } else {
            for p in &self.problems {
                writeln!(f, "error: {p}")?;
            }
            Ok(())
        }
    }
}

fn candidate_count(rule: &SelectionRule, n: usize) -> usize {
    match *rule {
        SelectionRule::TopK { k } => k,
        SelectionRule::TopFraction { f } => metrics::nearest_rank(f, n),
        SelectionRule::PercentileBand { width, .. } => width,
        _ => 0,
    }
}

/// Static checks plus a job-count estimate. Loads the dataset (to learn its
/// size) but trains nothing and writes nothing.
pub fn validate_config(config: &ExperimentConfig) -> Diagnostics {
    let mut problems = config.problems();
    let mut train_size = None;
    if problems.is_empty() {
        match config.load_data() {
            Ok((train, _)) => train_size = Some(train.len()),
            Err(e) => problems.push(format!("dataset: {e}")),
        }
    }
    let points = config.points().len();
    let axis_trains_models = !matches!(config.sweep.axis(), "group_size" | "solver");
    let trainings = if axis_trains_models {
        points
    } else {
        config.seeds.len()
    };
    let retrainings = match (train_size, &config.groups) {
        (Some(_), Some(g)) if config.sweep.group_size.is_some() => points * g.num_groups,
        (Some(n), _) => {
            let per_test = candidate_count(&config.candidate_rule, n);
            let tests = 1 + config.extra_test_rules.len();
            let scratch = if config.scratch.is_some() { per_test } else { 0 };
            points * (per_test * tests + scratch)
        }
        _ => 0,
    };
    Diagnostics {
        ok: problems.is_empty(),
        problems,
        points,
        trainings,
        retrainings,
        train_size,
    }
}

pub fn validate(config_path: impl AsRef<Path>) -> Diagnostics {
    match ExperimentConfig::load(config_path) {
        Ok(c) => validate_config(&c),
        Err(InfluenceError::InvalidConfig(problems)) => Diagnostics {
            ok: false,
            problems,
            points: 0,
            trainings: 0,
            retrainings: 0,
            train_size: None,
        },
        Err(e) => Diagnostics {
            ok: false,
            problems: vec![e.to_string()],
            points: 0,
            trainings: 0,
            retrainings: 0,
            train_size: None,
        },
    }
}

/// Runs every job of `config` and writes the reports. Numerical failures of
/// individual jobs are recorded in the report (and counted in the summary);
/// invalid configs, I/O errors and cache corruption abort the run.
pub fn run_config(config: &ExperimentConfig, options: &RunOptions) -> Result<(ExperimentReport, RunSummary)> {
    let config = options.apply(config);
    config.validate()?;
    let (train, test) = config.load_data()?;
    let data = Data {
        num_classes: train.num_classes.max(test.num_classes),
        train,
        test,
    };
    let cache = options.cache();
    let ctx = JobContext::new(&cache, options.workers());
    let runner = PointRunner {
        config: &config,
        data: &data,
        ctx,
    };
    let mut log = format!(
        "experiment {} config {} train {} test {} workers {}\n",
        config.experiment_id,
        config.fingerprint(),
        data.train.len(),
        data.test.len(),
        runner.ctx.workers
    );
    let started = Instant::now();
    let mut records = Vec::new();
    for settings in config.points() {
        let t0 = Instant::now();
        let record = match runner.run(&settings) {
            Ok(r) => r,
            Err(e) if e.is_numerical() || matches!(e.root(), InfluenceError::InvalidInput(_)) => {
                log::warn!("{}: {e}", sweep_cell(settings.sweep_value));
                PointRecord::failed(&settings, &e)
            }
            Err(e) => return Err(e.context(format!("sweep value {} seed {}", sweep_cell(settings.sweep_value), settings.seed))),
        };
        let id = experiment_point_id(&config, &record);
        let _ = writeln!(
            log,
            "{id} status {:?} spearman {} seconds {:.3}",
            record.status,
            num(record.primary().and_then(|c| c.spearman)),
            t0.elapsed().as_secs_f64()
        );
        log::info!("{id} done in {:.1}s", t0.elapsed().as_secs_f64());
        records.push(record);
    }
    let failed_points = records.iter().filter(|r| r.status == PointStatus::Failed).count();
    let report = ExperimentReport {
        format_version: FORMAT_VERSION,
        experiment_id: config.experiment_id.clone(),
        config_fingerprint: config.fingerprint(),
        sweep_axis: config.sweep.axis().to_string(),
        test_rules: std::iter::once(&config.test_rule)
            .chain(&config.extra_test_rules)
            .map(|r| r.label())
            .collect(),
        candidate_rule: config.candidate_rule.label(),
        init_scheme: "uniform(+-1/sqrt(fan_in)) weights, zero biases".into(),
        failed_points,
        ground_truth_failures: records.iter().map(|r| r.ground_truth_failures).sum(),
        summary: summarize(&config, &records),
        records,
    };
    write_report(&report, &config.output_dir)?;
    let model = cache.stats_for("model");
    let retrain = cache.stats_for("retrain");
    let summary = RunSummary {
        trainings_run: model.misses,
        trainings_cached: model.hits,
        retrainings_run: retrain.misses,
        retrainings_cached: retrain.hits,
        failed_points,
        output_dir: config.output_dir.clone(),
    };
    let _ = writeln!(
        log,
        "total seconds {:.3} trainings run {} cached {} retrainings run {} cached {}",
        started.elapsed().as_secs_f64(),
        summary.trainings_run,
        summary.trainings_cached,
        summary.retrainings_run,
        summary.retrainings_cached
    );
    write_file(&config.output_dir.join("run.log"), &log)?;
    Ok((report, summary))
}

pub fn run(config_path: impl AsRef<Path>, options: &RunOptions) -> Result<(ExperimentReport, RunSummary)> {
    run_config(&ExperimentConfig::load(config_path)?, options)
}
