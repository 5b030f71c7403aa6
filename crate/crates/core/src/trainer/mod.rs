//! Subject-level splitting, Siamese pair formation, the training loop and
//! held-out evaluation.

mod bench;
mod metrics;

pub use bench::{bench, mean_std, BenchError, BenchReport, ClusterTiming, MethodTiming};
pub use metrics::{nmse, pearson_r, MeasureMetrics, MetricsError, MetricsReport};

use crate::autodiff::{adam_step, scheduler_lr, AdamConfig, AdamState, AutodiffError};
use crate::geometry::{FiberCluster, ShapeVector};
use crate::model::{
    pair_gradients, predict, Checkpoint, LossConfig, LossValues, Model, ModelError, SiamesePair,
    SubnetworkConfig, TargetStandardizer,
};
use crate::sampler::{random_sample, DEFAULT_N_POINTS};
use crate::seeding::{self, tag};
use crate::tract_io::{DatasetManifest, TractIoError};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("no ground-truth shape vector for {subject_id}/{cluster_id}")]
    MissingGroundTruth { subject_id: String, cluster_id: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no clusters to {0}")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] TractIoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub alpha: f64,
    pub n_points: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub subnetwork: SubnetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-width network on the reference schedule: batch 128, 200 epochs.
    pub fn full() -> Self {
        Self {
            batch_size: 128,
            epochs: 200,
            lr: 0.0005,
            weight_decay: 0.005,
            gamma: 0.1,
            step_size: 200,
            alpha: 3.0,
            n_points: DEFAULT_N_POINTS,
            train_fraction: 0.8,
            seed: 42,
            subnetwork: SubnetworkConfig::default(),
        }
    }

    /// Single-machine schedule: 50 epochs at a higher rate without weight
    /// decay, one tenfold decay at epoch 40.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            epochs: 50,
            lr: 3e-3,
            weight_decay: 0.0,
            step_size: 40,
            subnetwork: SubnetworkConfig::desk(),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.epochs == 0 || self.n_points == 0 || self.step_size == 0 {
            return bad("batch_size, epochs, n_points and step_size must be positive");
        }
        if !(self.lr > 0.0 && self.gamma > 0.0 && self.weight_decay >= 0.0 && self.alpha >= 0.0) {
            return bad("lr and gamma must be positive; weight_decay and alpha non-negative");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        self.subnetwork.validate()?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles subjects with a seeded stream and cuts at
/// `round(fraction * n)`, keeping at least one subject on each side.
/// Each side lists subjects in manifest order.
pub fn split_dataset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<Split, TrainError> {
    let ids = manifest.subject_ids();
    let n = ids.len();
    if n < 2 {
        return Err(TrainError::TooFewSubjects(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_for(seed, &[tag::SPLIT]));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train: HashSet<usize> = order[..n_train].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = ids.into_iter().enumerate().partition(|(i, _)| train.contains(i));
    Ok(Split {
        train: train.into_iter().map(|(_, s)| s).collect(),
        test: test.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Disjoint random pairing of `0..n` for one epoch; with odd `n` the
/// leftover item pairs with the first of the shuffled order.
pub fn make_pairs(n: usize, epoch: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_for(seed, &[tag::PAIRS, epoch as u64]));
    let mut pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if n % 2 == 1 {
        let last = order[n - 1];
        pairs.push((last, if n == 1 { last } else { order[0] }));
    }
    pairs
}

/// A cluster with its physical-unit target.
#[derive(Debug, Clone)]
pub struct LabeledCluster {
    pub cluster: FiberCluster,
    pub target: ShapeVector,
}

/// Oracle shapes keyed by `(subject_id, cluster_id)`.
pub type ShapeTable = BTreeMap<(String, String), ShapeVector>;

/// Loads the clusters of `subjects` in manifest order, labeled from
/// `shapes` when given and from the manifest's ground truth otherwise.
pub fn load_labeled(
    manifest: &DatasetManifest,
    subjects: &[String],
    shapes: Option<&ShapeTable>,
) -> Result<Vec<LabeledCluster>, TrainError> {
    let wanted: HashSet<&str> = subjects.iter().map(String::as_str).collect();
    let entries: Vec<_> = manifest.entries().filter(|(s, _)| wanted.contains(s)).collect();
    entries
        .par_iter()
        .map(|&(subject_id, entry)| {
            let key = (subject_id.to_string(), entry.cluster_id.clone());
            let target = shapes
                .and_then(|t| t.get(&key).copied())
                .or(entry.ground_truth)
                .ok_or_else(|| TrainError::MissingGroundTruth {
                    subject_id: key.0.clone(),
                    cluster_id: key.1.clone(),
                })?;
            let cluster = manifest.load_cluster(subject_id, entry)?;
            Ok(LabeledCluster { cluster, target })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub sf: f64,
    pub total: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,l1,l2,l_sf,l_total";

/// `#`-prefixed `comments`, then one row per epoch (1-based).
pub fn history_csv(history: &[EpochRecord], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    writeln!(out, "{HISTORY_CSV_HEADER}").unwrap();
    for r in history {
        writeln!(out, "{},{:e},{:.9},{:.9},{:.9},{:.9}", r.epoch + 1, r.lr, r.l1, r.l2, r.sf, r.total).unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Seed of the point sample drawn for training item `index` in `epoch`.
fn train_sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seeding::derive_seed(seed, &[tag::SAMPLE, epoch as u64, index as u64])
}

/// Seed of the evaluation sample of a cluster, independent of which
/// split or order it is evaluated in.
pub fn eval_sample_seed(seed: u64, cluster: &FiberCluster) -> u64 {
    seeding::derive_seed_str(seed, tag::EVAL_SAMPLE, &format!("{}/{}", cluster.subject_id, cluster.id))
}

fn non_finite(epoch: usize, batch: usize, detail: impl Into<String>) -> TrainError {
    TrainError::NonFiniteLoss {
        epoch,
        batch,
        detail: detail.into(),
    }
}

/// Runs the full loop on `data`. Pair gradients of a batch are computed
/// concurrently and summed in pair order, so results do not depend on the
/// thread count.
pub fn train(config: &TrainConfig, data: &[LabeledCluster]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("train on"));
    }
    let targets: Vec<ShapeVector> = data.iter().map(|d| d.target).collect();
    let standardizer = TargetStandardizer::fit(&targets)?;
    let z: Vec<[f64; 5]> = targets.iter().map(|t| standardizer.standardize(t)).collect();

    let mut model = Model::init(config.subnetwork.clone(), config.seed)?;
    let adam = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, &model.params);
    let loss_cfg = config.loss();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = scheduler_lr(config.lr, epoch as u64, config.gamma, config.step_size as u64);
        let clouds: Vec<Vec<f32>> = data
            .par_iter()
            .enumerate()
            .map(|(i, d)| random_sample(&d.cluster, config.n_points, train_sample_seed(config.seed, epoch, i)).to_f32_rows())
            .collect();
        let pairs = make_pairs(data.len(), epoch, config.seed);
        let mut sums = LossValues::default();

        for (batch, chunk) in pairs.chunks(config.batch_size).enumerate() {
            let results: Vec<(LossValues, Vec<Vec<f32>>)> = chunk
                .par_iter()
                .map(|&(a, b)| {
                    let pair = SiamesePair {
                        a: &clouds[a],
                        b: &clouds[b],
                        gt_a: z[a],
                        gt_b: z[b],
                    };
                    pair_gradients(&model, &pair, loss_cfg)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| match e {
                    ModelError::Autodiff(AutodiffError::NonFiniteValue { op }) => {
                        non_finite(epoch, batch, format!("forward pass produced a non-finite value in {op}"))
                    }
                    other => other.into(),
                })?;

            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for (values, pair_grads) in &results {
                if !values.total.is_finite() {
                    return Err(non_finite(epoch, batch, format!("loss terms {values:?}")));
                }
                sums.l1 += values.l1;
                sums.l2 += values.l2;
                sums.sf += values.sf;
                sums.total += values.total;
                for (acc, g) in grads.iter_mut().zip(pair_grads) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += *v as f64);
                }
            }
            let scale = 1.0 / results.len() as f64;
            let grads: Vec<Vec<f32>> = grads
                .into_iter()
                .map(|g| g.into_iter().map(|v| (v * scale) as f32).collect())
                .collect();
            if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite(epoch, batch, format!("gradient of parameter tensor {i}")));
            }
            adam_step(&mut model.params, &grads, &mut state, lr);
            if let Some(i) = model.params.iter().position(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(non_finite(epoch, batch, format!("parameter tensor {i} after the update")));
            }
        }

        let n = pairs.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            l1: sums.l1 / n,
            l2: sums.l2 / n,
            sf: sums.sf / n,
            total: sums.total / n,
        };
        log::info!(
            "epoch {}/{}: lr {:e}, L1 {:.4}, L2 {:.4}, L_SF {:.4}, total {:.4}",
            epoch + 1,
            config.epochs,
            lr,
            record.l1,
            record.l2,
            record.sf,
            record.total
        );
        history.push(record);
    }

    let checkpoint = Checkpoint {
        model,
        standardizer,
        n_points: config.n_points,
        seed: config.seed,
        train_config: serde_json::to_value(config).expect("config serializes"),
    };
    Ok(TrainOutcome { checkpoint, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub subject_id: String,
    pub cluster_id: String,
    pub predicted: ShapeVector,
    pub target: ShapeVector,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRow>,
}

/// Predicts every cluster (one seeded sample each) and scores the
/// predictions against the targets.
pub fn evaluate(checkpoint: &Checkpoint, data: &[LabeledCluster], seed: u64) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("evaluate"));
    }
    let predictions = data
        .par_iter()
        .map(|d| {
            let sample = random_sample(&d.cluster, checkpoint.n_points, eval_sample_seed(seed, &d.cluster));
            Ok(PredictionRow {
                subject_id: d.cluster.subject_id.clone(),
                cluster_id: d.cluster.id.clone(),
                predicted: predict(&sample, checkpoint)?,
                target: d.target,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let pred: Vec<ShapeVector> = predictions.iter().map(|p| p.predicted).collect();
    let gt: Vec<ShapeVector> = predictions.iter().map(|p| p.target).collect();
    Ok(Evaluation {
        report: MetricsReport::from_predictions(&pred, &gt)?,
        predictions,
    })
}

#[cfg(test)]
mod tests;
