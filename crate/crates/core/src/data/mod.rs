//! Datasets: the embedded Iris table, synthetic Gaussian blobs and IDX
//! (MNIST-style) files, plus seeded splitting and standardization.
//!
//! Example order is fixed at construction. Throughout the crate a training
//! point is identified by its index into [`Dataset::examples`].

mod idx;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{InfluenceError, Result};
use crate::fingerprint;
use crate::nn::Example;

pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

const IRIS_CSV: &str = include_str!("iris.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        feature_dim: usize,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            num_classes,
            feature_dim,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(InfluenceError::InvalidInput(format!(
                "dataset {} is empty",
                self.name
            )));
        }
        for (i, z) in self.examples.iter().enumerate() {
            if z.features.len() != self.feature_dim {
                return Err(InfluenceError::InvalidInput(format!(
                    "example {i} of {} has {} features, expected {}",
                    self.name,
                    z.features.len(),
                    self.feature_dim
                )));
            }
            if z.label >= self.num_classes {
                return Err(InfluenceError::InvalidInput(format!(
                    "example {i} of {} has label {} outside [0, {})",
                    self.name, z.label, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for z in &self.examples {
            counts[z.label] += 1;
        }
        counts
    }

    /// Sub-dataset made of the given source indices, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// SHA-256 over feature bits and labels (not the name).
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.len() * (self.feature_dim * 8 + 8) + 16);
        bytes.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        for z in &self.examples {
            for x in &z.features {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&(z.label as u64).to_le_bytes());
        }
        fingerprint::sha256_hex(&bytes)
    }
}

/// Fisher's Iris table (150 examples, 4 features, 3 classes in the order
/// setosa, versicolor, virginica).
pub fn load_iris() -> Dataset {
    let mut lines = IRIS_CSV.lines();
    lines.next(); // header: "150,4,setosa,versicolor,virginica"
    let examples = lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let features = fields[..4]
                .iter()
                .map(|f| f.parse::<f64>().expect("embedded iris table"))
                .collect();
            let label = fields[4].parse::<usize>().expect("embedded iris table");
            Example::new(features, label)
        })
        .collect();
    Dataset {
        name: "iris".into(),
        num_classes: 3,
        feature_dim: 4,
        examples,
    }
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Class centers are placed on a circle in the first two coordinates with
/// adjacent centers exactly `separation` apart (on a line when
/// `feature_dim == 1`). Examples are emitted class by class.
pub fn gen_blobs(
    num_per_class: usize,
    num_classes: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_per_class == 0 || num_classes < 2 || feature_dim == 0 {
        return Err(InfluenceError::InvalidInput(format!(
            "blobs need positive sizes and at least two classes \
             (got {num_per_class} per class, {num_classes} classes, dim {feature_dim})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(InfluenceError::InvalidInput(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut center = vec![0.0; feature_dim];
            if feature_dim == 1 {
                center[0] = c as f64 * separation;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_per_class * num_classes);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..num_per_class {
            let features = center
                .iter()
                .map(|m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + noise
                })
                .collect();
            examples.push(Example::new(features, label));
        }
    }
    Dataset::new(
        format!("blobs-{num_classes}x{num_per_class}-d{feature_dim}-s{separation}"),
        num_classes,
        feature_dim,
        examples,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Dataset,
    pub test: Dataset,
    /// Source indices of the training examples, ascending.
    pub train_indices: Vec<usize>,
    /// Source indices of the test examples, ascending.
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub fraction: f64,
}

/// Seeded train/test split. Both halves keep the source order.
///
/// Stratified mode puts `round(fraction * count)` examples of each class in
/// the test half (at least one, and at least one left for training).
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64, stratified: bool) -> Result<SplitResult> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(InfluenceError::InvalidInput(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_indices = Vec::new();
    if stratified {
        for class in 0..dataset.num_classes {
            let mut members: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.examples[i].label == class)
                .collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < 2 {
                return Err(InfluenceError::InvalidInput(format!(
                    "class {class} has {} member(s); stratified splitting needs at least 2",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let take = ((test_fraction * members.len() as f64).round() as usize)
                .clamp(1, members.len() - 1);
            test_indices.extend_from_slice(&members[..take]);
        }
    } else {
        if dataset.len() < 2 {
            return Err(InfluenceError::InvalidInput(
                "splitting needs at least two examples".into(),
            ));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let take = ((test_fraction * dataset.len() as f64).round() as usize)
            .clamp(1, dataset.len() - 1);
        test_indices.extend_from_slice(&order[..take]);
    }
    test_indices.sort_unstable();
    let mut is_test = vec![false; dataset.len()];
    for &i in &test_indices {
        is_test[i] = true;
    }
    let train_indices: Vec<usize> = (0..dataset.len()).filter(|&i| !is_test[i]).collect();
    Ok(SplitResult {
        train: dataset.subset(&train_indices, format!("{}-train", dataset.name)),
        test: dataset.subset(&test_indices, format!("{}-test", dataset.name)),
        train_indices,
        test_indices,
        seed,
        fraction: test_fraction,
    })
}

/// Per-feature mean and (population) standard deviation of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len() as f64;
        let d = data.feature_dim;
        let mut mean = vec![0.0; d];
        for z in &data.examples {
            for (m, x) in mean.iter_mut().zip(&z.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for z in &data.examples {
            for j in 0..d {
                let c = z.features[j] - mean[j];
                var[j] += c * c;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        FeatureStats { mean, std }
    }

    /// Standardizes every feature; zero-variance features map to 0.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let examples = data
            .examples
            .iter()
            .map(|z| {
                let features = z
                    .features
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        if self.std[j] > 0.0 {
                            (x - self.mean[j]) / self.std[j]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Example::new(features, z.label)
            })
            .collect();
        Dataset {
            examples,
            ..data.clone()
        }
    }
}

/// Standardizes `train` with its own statistics and `test` with the same
/// statistics. Not idempotent on data that is not already standardized.
pub fn normalize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, FeatureStats)> {
    if train.is_empty() {
        return Err(InfluenceError::InvalidInput(
            "cannot normalize with an empty training set".into(),
        ));
    }
    let stats = FeatureStats::fit(train);
    Ok((stats.apply(train), stats.apply(test), stats))
}
