//! Task data: synthetic non-i.i.d. generation, Dirichlet label partitioning
//! across clients, CSV ingestion, split management and accuracy evaluation.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelParams};
use crate::rng;

/// A pool of labeled examples.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Examples per class, indexed by class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy the given rows into a standalone dataset.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Array2::zeros((indices.len(), self.input_dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        LabeledDataset {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Copy the given rows into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.subset(indices);
        Batch {
            features: sub.features,
            labels: sub.labels,
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// One client's slice of the task, already cut into splits.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    /// Class proportions of the training split; sums to 1 when the split is
    /// non-empty, all zeros otherwise.
    pub class_ratios: Vec<f64>,
}

/// How a pool is divided across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    /// (train, validation, test) fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    /// When set, per-client test splits may be empty and evaluation runs on
    /// a shared test pool weighted by each client's training class ratios.
    pub shared_test: bool,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::InvalidArgument(
                "partition needs at least 2 clients".into(),
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidArgument(
                "dirichlet_alpha must be positive and finite".into(),
            ));
        }
        if self.split_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidArgument(
                "split ratios must be non-negative".into(),
            ));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Index-level description of one client's allocation (row indices into the
/// source dataset). The three splits are disjoint and together exactly cover
/// the client's allocation.
#[derive(Debug, Clone)]
pub struct ClientAllocation {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientAllocation {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Deterministic unit-norm direction for a class: the coordinate signs are
/// the bits of the class id, so directions are pairwise distinct as long as
/// `num_classes <= 2^input_dim`.
fn class_direction(class: usize, input_dim: usize) -> Vec<f64> {
    let norm = (input_dim as f64).sqrt();
    (0..input_dim)
        .map(|bit| {
            let sign = if bit < usize::BITS as usize && (class >> bit) & 1 == 1 {
                1.0
            } else {
                -1.0
            };
            sign / norm
        })
        .collect()
}

/// Gaussian class blobs: class `c` is centered at a deterministic unit-norm
/// direction scaled by `class_separation`, with i.i.d. noise of standard
/// deviation `noise_sd`. Classes are balanced and generation is
/// deterministic in `seed`.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    examples_per_class: usize,
    class_separation: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 1 || input_dim < 1 || examples_per_class < 1 {
        return Err(Error::InvalidArgument(
            "num_classes, input_dim and examples_per_class must be positive".into(),
        ));
    }
    if !(noise_sd > 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise_sd must be positive and finite".into(),
        ));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(Error::InvalidArgument(
            "class_separation must be non-negative and finite".into(),
        ));
    }
    if input_dim < usize::BITS as usize && num_classes > (1usize << input_dim) {
        return Err(Error::InvalidArgument(format!(
            "cannot place {num_classes} distinct class directions in {input_dim} dimensions"
        )));
    }
    let mut rng = rng::stream(seed, "synthetic", &[]);
    let noise = Normal::new(0.0, noise_sd).expect("validated noise_sd");
    let n = num_classes * examples_per_class;
    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..num_classes {
        let direction = class_direction(class, input_dim);
        for _ in 0..examples_per_class {
            for (j, &d) in direction.iter().enumerate() {
                features[[row, j]] = class_separation * d + noise.sample(&mut rng);
            }
            labels.push(class);
            row += 1;
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Dirichlet proportions via normalized Gamma draws. Degenerate draws (all
/// zero, possible at extreme concentrations) collapse to a one-hot vector on
/// the largest draw.
fn dirichlet_proportions(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|&d| d / sum).collect()
    } else {
        let best = draws
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (0..k).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

/// Convert fractional proportions into integer counts summing exactly to
/// `total`, assigning leftovers by descending fractional remainder (ties to
/// the lowest index).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|&p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = proportions[a] * total as f64 - counts[a] as f64;
        let fb = proportions[b] * total as f64 - counts[b] as f64;
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Allocate every example to exactly one client by drawing, per class, a
/// Dirichlet proportion vector over clients and rounding it to counts by
/// largest remainder. Per-client splits are then cut by `split_ratios` after
/// a seeded shuffle.
pub fn dirichlet_partition_manifest(
    ds: &LabeledDataset,
    cfg: &PartitionConfig,
    seed: u64,
) -> Result<Vec<ClientAllocation>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("cannot partition an empty dataset".into()));
    }
    let m = cfg.num_clients;
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); m];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (idx, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(idx);
    }

    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng::stream(seed, "class_shuffle", &[class as u64]));
        let mut prop_rng = rng::stream(seed, "class_proportions", &[class as u64]);
        let proportions = dirichlet_proportions(&mut prop_rng, cfg.dirichlet_alpha, m);
        let counts = largest_remainder(&proportions, indices.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            per_client[client].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    let mut allocations = Vec::with_capacity(m);
    for (client_id, mut indices) in per_client.into_iter().enumerate() {
        indices.shuffle(&mut rng::stream(seed, "client_shuffle", &[client_id as u64]));
        let counts = largest_remainder(&cfg.split_ratios, indices.len());
        let train = indices[..counts[0]].to_vec();
        let validation = indices[counts[0]..counts[0] + counts[1]].to_vec();
        let test = indices[counts[0] + counts[1]..].to_vec();
        allocations.push(ClientAllocation {
            client_id,
            train,
            validation,
            test,
        });
    }
    Ok(allocations)
}

/// Materialize client datasets from an allocation manifest.
pub fn materialize_clients(
    ds: &LabeledDataset,
    allocations: &[ClientAllocation],
) -> Vec<ClientDataset> {
    allocations
        .iter()
        .map(|alloc| {
            let train = ds.subset(&alloc.train);
            let validation = ds.subset(&alloc.validation);
            let test = ds.subset(&alloc.test);
            let class_ratios = train_class_ratios(&train);
            ClientDataset {
                client_id: alloc.client_id,
                train,
                validation,
                test,
                class_ratios,
            }
        })
        .collect()
}

fn train_class_ratios(train: &LabeledDataset) -> Vec<f64> {
    let counts = train.class_counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; train.num_classes];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Partition a dataset across clients (see [`dirichlet_partition_manifest`]).
/// A client may legitimately receive zero examples under extreme skew.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    cfg: &PartitionConfig,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let manifest = dirichlet_partition_manifest(ds, cfg, seed)?;
    Ok(materialize_clients(ds, &manifest))
}

/// Render an allocation manifest as `client_id,split,row_index` CSV.
pub fn manifest_to_csv(allocations: &[ClientAllocation]) -> String {
    let mut out = String::from("client_id,split,row_index\n");
    for alloc in allocations {
        for (split, indices) in [
            ("train", &alloc.train),
            ("validation", &alloc.validation),
            ("test", &alloc.test),
        ] {
            for &idx in indices {
                out.push_str(&format!("{},{},{}\n", alloc.client_id, split, idx));
            }
        }
    }
    out
}

/// Load a labeled dataset from a headered CSV file. All columns except
/// `label_column` are parsed as numeric features; labels are factorized to
/// `0..C-1` in first-appearance order. With `standardize`, each feature
/// column is scaled to zero mean and unit (population) variance; constant
/// columns are left at zero.
pub fn load_csv(path: &Path, label_column: &str, standardize: bool) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Config(format!("cannot read header row: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column `{label_column}` not found")))?;
    let feature_names: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(i, name)| (i, name.clone()))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| Error::CsvParse {
            row,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        let mut values = Vec::with_capacity(feature_names.len());
        for (col, name) in &feature_names {
            let cell = record.get(*col).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::CsvParse {
                row,
                column: name.clone(),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::CsvParse {
                    row,
                    column: name.clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(value);
        }
        raw_labels.push(record.get(label_idx).unwrap_or("").trim().to_owned());
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} contains no data rows",
            path.display()
        )));
    }

    // factorize labels in first-appearance order
    let mut label_order: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(raw_labels.len());
    for raw in &raw_labels {
        let id = match label_order.iter().position(|l| l == raw) {
            Some(id) => id,
            None => {
                label_order.push(raw.clone());
                label_order.len() - 1
            }
        };
        labels.push(id);
    }

    let n = rows.len();
    let d = feature_names.len();
    let mut features = Array2::zeros((n, d));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            features[[r, c]] = v;
        }
    }
    if standardize {
        for c in 0..d {
            let mut col = features.column_mut(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 0.0 {
                col.mapv_inplace(|v| (v - mean) / sd);
            } else {
                col.fill(0.0);
            }
        }
    }
    LabeledDataset::new(features, labels, label_order.len())
}

/// Argmax predictions for every feature row, ties resolved toward the lowest
/// class index.
pub fn predict(model: &ModelParams, features: &Array2<f64>) -> Result<Vec<usize>> {
    let logits = model.forward(features)?;
    Ok(logits.rows().into_iter().map(|row| argmax(row.iter())).collect())
}

pub(crate) fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in values.enumerate() {
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    best
}

pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Top-1 accuracy of a model on a dataset.
pub fn evaluate_accuracy(model: &ModelParams, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("cannot evaluate on an empty dataset".into()));
    }
    let predictions = predict(model, &ds.features)?;
    Ok(accuracy_from_predictions(&predictions, &ds.labels))
}

/// Weighted shared-test accuracy from precomputed predictions: per-class
/// accuracy on the shared pool, weighted by the client's training class
/// ratios. Every class with a nonzero ratio must appear in the shared pool.
pub fn weighted_accuracy_from_predictions(
    predictions: &[usize],
    shared_test: &LabeledDataset,
    class_ratios: &[f64],
) -> Result<f64> {
    if class_ratios.len() != shared_test.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} class ratios for {} classes",
            class_ratios.len(),
            shared_test.num_classes
        )));
    }
    let mut counts = vec![0usize; shared_test.num_classes];
    let mut correct = vec![0usize; shared_test.num_classes];
    for (&pred, &label) in predictions.iter().zip(&shared_test.labels) {
        counts[label] += 1;
        if pred == label {
            correct[label] += 1;
        }
    }
    let mut total = 0.0;
    for (class, &ratio) in class_ratios.iter().enumerate() {
        if ratio == 0.0 {
            continue;
        }
        if counts[class] == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has nonzero ratio but no shared-test examples"
            )));
        }
        total += ratio * correct[class] as f64 / counts[class] as f64;
    }
    Ok(total)
}

/// Weighted shared-test accuracy of a model (see
/// [`weighted_accuracy_from_predictions`]).
pub fn weighted_shared_test_accuracy(
    model: &ModelParams,
    shared_test: &LabeledDataset,
    class_ratios: &[f64],
) -> Result<f64> {
    if shared_test.is_empty() {
        return Err(Error::EmptyInput("shared test pool is empty".into()));
    }
    let predictions = predict(model, &shared_test.features)?;
    weighted_accuracy_from_predictions(&predictions, shared_test, class_ratios)
}
