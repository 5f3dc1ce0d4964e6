//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{InfluenceError, Result};
use crate::fingerprint;
use crate::groundtruth::RetrainProtocol;
use crate::ihvp::{IhvpConfig, SolverKind};
use crate::metrics::SelectionRule;
use crate::nn::{Activation, ModelSpec};
use crate::training::{RetrainMode, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Iris,
    Blobs {
        num_per_class: usize,
        num_classes: usize,
        feature_dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image/label pair. With `test_images`/`test_labels` the split is
    /// given by the files and `test_fraction` is ignored.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        max_items: usize,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        max_test_items: Option<usize>,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "yes")]
    pub stratified: bool,
    /// Standardize features with training-set statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub steps: usize,
    pub weight_decay: f64,
}

/// Scratch-versus-warm retraining comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScratchSettings {
    pub scratch_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSettings {
    pub num_groups: usize,
    #[serde(default)]
    pub seed: u64,
}

/// At most one field may be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<Vec<SolverKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Int(usize),
    Real(f64),
    Solver(SolverKind),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Int(v) => write!(f, "{v}"),
            SweepValue::Real(v) => write!(f, "{v}"),
            SweepValue::Solver(s) => write!(f, "{s}"),
        }
    }
}

impl SweepValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            SweepValue::Int(v) => Some(v as f64),
            SweepValue::Real(v) => Some(v),
            SweepValue::Solver(_) => None,
        }
    }
}

impl Sweep {
    fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.depth.is_some() {
            out.push("sweep.depth");
        }
        if self.width.is_some() {
            out.push("sweep.width");
        }
        if self.weight_decay.is_some() {
            out.push("sweep.weight_decay");
        }
        if self.solver.is_some() {
            out.push("sweep.solver");
        }
        if self.group_size.is_some() {
            out.push("sweep.group_size");
        }
        out
    }

    /// Axis name, or `"none"`.
    pub fn axis(&self) -> &'static str {
        match self.set_fields().first() {
            Some(f) => f.trim_start_matches("sweep."),
            None => "none",
        }
    }

    pub fn values(&self) -> Vec<Option<SweepValue>> {
        if let Some(v) = &self.depth {
            return v.iter().map(|&x| Some(SweepValue::Int(x))).collect();
        }
        if let Some(v) = &self.width {
            return v.iter().map(|&x| Some(SweepValue::Int(x))).collect();
        }
        if let Some(v) = &self.weight_decay {
            return v.iter().map(|&x| Some(SweepValue::Real(x))).collect();
        }
        if let Some(v) = &self.solver {
            return v.iter().map(|&x| Some(SweepValue::Solver(x))).collect();
        }
        if let Some(v) = &self.group_size {
            return v.iter().map(|&x| Some(SweepValue::Int(x))).collect();
        }
        vec![None]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub experiment_id: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    #[serde(default)]
    pub ihvp: IhvpConfig,
    pub test_rule: SelectionRule,
    /// Further test points; correlations then pool all (train, test) pairs.
    #[serde(default)]
    pub extra_test_rules: Vec<SelectionRule>,
    pub candidate_rule: SelectionRule,
    /// Defaults to warm-start retraining for the dataset's usual budget.
    #[serde(default)]
    pub ground_truth: Option<RetrainProtocol>,
    #[serde(default)]
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Additional solvers scored against the same candidates and ground truth.
    #[serde(default)]
    pub compare_solvers: Vec<SolverKind>,
    #[serde(default)]
    pub scratch: Option<ScratchSettings>,
    #[serde(default)]
    pub groups: Option<GroupSettings>,
}

/// One fully resolved (sweep point, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSettings {
    pub sweep_value: Option<SweepValue>,
    pub seed: u64,
    /// Input and class counts are zero until filled in from the data.
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub ihvp: IhvpConfig,
    pub group_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| InfluenceError::InvalidConfig(vec![format!("cannot parse config: {e}")]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| InfluenceError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::short_hash(self)
    }

    /// Every problem found, each naming the offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.format_version != FORMAT_VERSION {
            p.push(format!(
                "format_version: expected {FORMAT_VERSION}, got {}",
                self.format_version
            ));
        }
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
        {
            p.push(format!(
                "experiment_id: must be non-empty [A-Za-z0-9_.-], got {:?}",
                self.experiment_id
            ));
        }
        let axes = self.sweep.set_fields();
        if axes.len() > 1 {
            p.push(format!(
                "{} are set; choose exactly one sweep axis",
                axes.join(" and ")
            ));
        }
        let sweep_lists_empty = [
            self.sweep.depth.as_ref().map(Vec::len),
            self.sweep.width.as_ref().map(Vec::len),
            self.sweep.weight_decay.as_ref().map(Vec::len),
            self.sweep.solver.as_ref().map(Vec::len),
            self.sweep.group_size.as_ref().map(Vec::len),
        ]
        .contains(&Some(0));
        if sweep_lists_empty {
            p.push(format!("sweep.{}: list must not be empty", self.sweep.axis()));
        }
        if self.seeds.is_empty() {
            p.push("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            p.push("seeds: duplicate seeds".into());
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            p.push(format!(
                "dataset.test_fraction: must be in (0, 1), got {}",
                self.dataset.test_fraction
            ));
        }
        if let DatasetSource::Idx {
            images,
            labels,
            max_items,
            test_images,
            test_labels,
            ..
        } = &self.dataset.source
        {
            for (field, path) in [("dataset.source.images", Some(images)), ("dataset.source.labels", Some(labels))]
                .into_iter()
                .chain([
                    ("dataset.source.test_images", test_images.as_ref()),
                    ("dataset.source.test_labels", test_labels.as_ref()),
                ])
            {
                if let Some(path) = path {
                    if !path.is_file() {
                        p.push(format!("{field}: file not found: {}", path.display()));
                    }
                }
            }
            if test_images.is_some() != test_labels.is_some() {
                p.push("dataset.source: test_images and test_labels must be given together".into());
            }
            if *max_items == 0 {
                p.push("dataset.source.max_items: must be positive".into());
            }
        }
        if self.train.learning_rate <= 0.0 || !self.train.learning_rate.is_finite() {
            p.push(format!("train.learning_rate: must be positive, got {}", self.train.learning_rate));
        }
        if self.train.weight_decay < 0.0 || !self.train.weight_decay.is_finite() {
            p.push(format!("train.weight_decay: must be non-negative, got {}", self.train.weight_decay));
        }
        if let Some(decays) = &self.sweep.weight_decay {
            if decays.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
                p.push("sweep.weight_decay: values must be non-negative".into());
            }
        }
        if self.sweep.depth.iter().flatten().chain(self.sweep.width.iter().flatten()).any(|&v| v > 64) {
            p.push("sweep: depth and width values above 64 are not supported".into());
        }
        if self.model.width == 0 && self.model.depth > 0 {
            p.push("model.width: must be positive when depth > 0".into());
        }
        if self.sweep.width.iter().flatten().any(|&w| w == 0) {
            p.push("sweep.width: values must be positive".into());
        }
        if let Err(InfluenceError::InvalidConfig(errs)) = self.ihvp.validate() {
            p.extend(errs.into_iter().map(|e| format!("ihvp: {e}")));
        }
        for solver in self.sweep.solver.iter().flatten().chain(&self.compare_solvers) {
            let cfg = IhvpConfig {
                solver: *solver,
                ..self.ihvp.clone()
            };
            if let Err(InfluenceError::InvalidConfig(errs)) = cfg.validate() {
                p.extend(errs.into_iter().map(|e| format!("ihvp ({solver}): {e}")));
            }
        }
        for (field, rule) in std::iter::once(("test_rule", &self.test_rule))
            .chain(self.extra_test_rules.iter().map(|r| ("extra_test_rules", r)))
        {
            if let Err(e) = rule.validate() {
                p.push(format!("{field}: {e}"));
            } else if !rule.is_test_rule() {
                p.push(format!("{field}: {} does not select test points", rule.label()));
            }
        }
        if let Err(e) = self.candidate_rule.validate() {
            p.push(format!("candidate_rule: {e}"));
        } else if self.candidate_rule.is_test_rule() {
            p.push(format!(
                "candidate_rule: {} does not select training points",
                self.candidate_rule.label()
            ));
        }
        if let Some(tol) = self.ground_truth.and_then(|g| g.converge_tol) {
            if !(tol > 0.0) {
                p.push(format!("ground_truth.converge_tol: must be positive, got {tol}"));
            }
        }
        if self.sweep.group_size.is_some() {
            match &self.groups {
                None => p.push("groups: required when sweep.group_size is set".into()),
                Some(g) if g.num_groups < 2 => p.push("groups.num_groups: need at least 2 groups".into()),
                _ => {}
            }
            if self.sweep.group_size.iter().flatten().any(|&g| g == 0) {
                p.push("sweep.group_size: values must be positive".into());
            }
        } else if self.groups.is_some() {
            p.push("groups: only used with sweep.group_size".into());
        }
        if let Some(s) = &self.scratch {
            if s.scratch_steps == 0 {
                p.push("scratch.scratch_steps: must be positive".into());
            }
        }
        if self.compare_solvers.contains(&self.ihvp.solver) {
            p.push("compare_solvers: must not repeat ihvp.solver".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(InfluenceError::InvalidConfig(problems))
        }
    }

    pub fn points(&self) -> Vec<PointSettings> {
        let mut out = Vec::new();
        for value in self.sweep.values() {
            for &seed in &self.seeds {
                let mut depth = self.model.depth;
                let mut width = self.model.width;
                let mut decay = self.train.weight_decay;
                let mut ihvp = self.ihvp.clone();
                let mut group_size = None;
                match (self.sweep.axis(), value) {
                    ("depth", Some(SweepValue::Int(d))) => depth = d,
                    ("width", Some(SweepValue::Int(w))) => width = w,
                    ("weight_decay", Some(SweepValue::Real(d))) => decay = d,
                    ("solver", Some(SweepValue::Solver(s))) => ihvp.solver = s,
                    ("group_size", Some(SweepValue::Int(g))) => group_size = Some(g),
                    _ => {}
                }
                ihvp.lissa_seed = ihvp.lissa_seed.wrapping_add(seed);
                out.push(PointSettings {
                    sweep_value: value,
                    seed,
                    spec: ModelSpec {
                        input_dim: 0,
                        hidden_widths: vec![width; depth],
                        num_classes: 0,
                        activation: self.model.activation,
                    },
                    train: TrainConfig {
                        learning_rate: self.train.learning_rate,
                        steps: self.train.steps,
                        weight_decay: decay,
                        seed,
                        record_grad_norm_every: 0,
                    },
                    ihvp,
                    group_size,
                });
            }
        }
        out
    }

    /// Loads and splits the dataset; returns (train, test).
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let (train, test) = match &d.source {
            DatasetSource::Iris => {
                let s = data::split(&data::load_iris(), d.test_fraction, d.split_seed, d.stratified)?;
                (s.train, s.test)
            }
            DatasetSource::Blobs {
                num_per_class,
                num_classes,
                feature_dim,
                separation,
                seed,
            } => {
                let ds = data::gen_blobs(*num_per_class, *num_classes, *feature_dim, *separation, *seed)?;
                let s = data::split(&ds, d.test_fraction, d.split_seed, d.stratified)?;
                (s.train, s.test)
            }
            DatasetSource::Idx {
                images,
                labels,
                max_items,
                test_images: Some(ti),
                test_labels: Some(tl),
                max_test_items,
            } => {
                let train = data::load_idx(images, labels, *max_items)?;
                let test = data::load_idx(ti, tl, max_test_items.unwrap_or(*max_items))?;
                (train, test)
            }
            DatasetSource::Idx {
                images,
                labels,
                max_items,
                ..
            } => {
                let ds = data::load_idx(images, labels, *max_items)?;
                let s = data::split(&ds, d.test_fraction, d.split_seed, d.stratified)?;
                (s.train, s.test)
            }
        };
        if d.normalize {
            let (train, test, _) = data::normalize(&train, &test)?;
            Ok((train, test))
        } else {
            Ok((train, test))
        }
    }

    pub fn ground_truth_protocol(&self) -> RetrainProtocol {
        self.ground_truth
            .unwrap_or_else(|| default_retrain_steps(&self.dataset.source, self.train.steps))
    }
}

/// Default warm-start budget: one eighth of the training steps for Iris
/// (7.5k after 60k), 6% of them otherwise.
pub fn default_retrain_steps(source: &DatasetSource, train_steps: usize) -> RetrainProtocol {
    let steps = match source {
        DatasetSource::Iris => train_steps / 8,
        _ => (train_steps as f64 * 0.06).round() as usize,
    };
    RetrainProtocol::fixed(steps, RetrainMode::WarmStart)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "format_version": 1,
            "experiment_id": "t",
            "dataset": {"source": {"name": "iris"}},
            "model": {"depth": 1, "width": 5, "activation": "tanh"},
            "train": {"learning_rate": 0.1, "steps": 100, "weight_decay": 0.01},
            "test_rule": {"kind": "max_loss"},
            "candidate_rule": {"kind": "top_fraction", "f": 0.166},
            "ground_truth": {"steps": 10, "mode": "warm_start"},
            "seeds": [0, 1],
            "output_dir": "out"
        })
    }

    fn parse(v: serde_json::Value) -> ExperimentConfig {
        ExperimentConfig::from_json(&v.to_string()).unwrap()
    }

    #[test]
    fn minimal_config_is_valid() {
        let cfg = parse(base());
        assert_eq!(cfg.problems(), Vec::<String>::new());
        assert_eq!(cfg.sweep.axis(), "none");
        assert_eq!(cfg.points().len(), 2);
        assert_eq!(cfg.dataset.test_fraction, 0.2);
    }

    #[test]
    fn two_sweep_axes_name_both_fields() {
        let mut v = base();
        v["sweep"] = serde_json::json!({"depth": [1, 2], "width": [5, 8]});
        let problems = parse(v).problems();
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("sweep.depth") && problems[0].contains("sweep.width"));
    }

    #[test]
    fn depth_sweep_expands_points() {
        let mut v = base();
        v["sweep"] = serde_json::json!({"depth": [1, 2, 3, 5, 8]});
        v["seeds"] = serde_json::json!([0, 1, 2, 3, 4]);
        let cfg = parse(v);
        let points = cfg.points();
        assert_eq!(points.len(), 25);
        assert_eq!(points[24].spec.hidden_widths, vec![5; 8]);
        assert_eq!(points[24].seed, 4);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_reported() {
        let mut v = base();
        v["bogus"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

        let mut v = base();
        v["format_version"] = serde_json::json!(7);
        v["seeds"] = serde_json::json!([]);
        v["candidate_rule"] = serde_json::json!({"kind": "max_loss"});
        let problems = parse(v).problems();
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn missing_idx_file_names_the_path() {
        let mut v = base();
        v["dataset"]["source"] = serde_json::json!({
            "name": "idx", "images": "/no/such/images", "labels": "/no/such/labels", "max_items": 10
        });
        let problems = parse(v).problems();
        assert!(problems.iter().any(|p| p.contains("/no/such/images")));
    }

    #[test]
    fn default_protocols() {
        assert_eq!(default_retrain_steps(&DatasetSource::Iris, 60_000).steps, 7_500);
        let blobs = DatasetSource::Blobs {
            num_per_class: 1,
            num_classes: 2,
            feature_dim: 1,
            separation: 1.0,
            seed: 0,
        };
        assert_eq!(default_retrain_steps(&blobs, 10_000).steps, 600);
    }
}
