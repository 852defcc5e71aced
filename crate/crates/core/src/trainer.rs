//! Mini-batch training: seeded 75/25 train/validation split, cross-entropy
//! with Adam, early stopping on validation accuracy.
//!
//! A single RNG stream drives everything, in a fixed draw order (split
//! shuffle first, then one reshuffle per epoch), so training is a pure
//! function of the initial model, the sample list and the config.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{backward, forward, forward_trace, Batch, ModelParams};
use crate::sampling::{Sample, PATCH_SIZE};
use crate::tensor::ops::{softmax_cross_entropy, softmax_cross_entropy_backward};
use crate::tensor::{adam_step, AdamConfig, Tensor, TensorError};
use crate::volume::CLASS_COUNT;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    /// Stop once this many epochs pass without a validation improvement.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 200,
            batch_size: 128,
            patience: 20,
            val_fraction: 0.25,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs_max < 1
            || self.batch_size < 1
            || self.patience < 1
            || !(self.val_fraction > 0.0 && self.val_fraction < 1.0)
        {
            return Err(TrainError::InvalidConfig(format!("{self:?}")));
        }
        self.adam
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// One JSON object per line: `{"epoch":..,"loss":..,"val_acc":..}`.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Seeded shuffle, then the first `ceil((1 - val_fraction) * N)` samples
/// become the training set and the rest the validation set.
pub fn split_train_val(
    samples: Vec<Sample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with_rng(samples, val_fraction, &mut rng)
}

fn split_with_rng(
    mut samples: Vec<Sample>,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let n = samples.len();
    if n < 2 {
        return Err(TrainError::TooFewSamples(n));
    }
    samples.shuffle(rng);
    let train_count = ((1.0 - val_fraction) * n as f64).ceil() as usize;
    let val = samples.split_off(train_count.min(n));
    Ok((samples, val))
}

/// Tracks the best validation accuracy seen so far and decides when the
/// patience window has run out.
struct BestTracker {
    patience: usize,
    best_epoch: usize,
    best_acc: f64,
}

impl BestTracker {
    fn new(patience: usize) -> Self {
        BestTracker {
            patience,
            best_epoch: 0,
            best_acc: f64::NEG_INFINITY,
        }
    }

    /// True if `acc` strictly improves on the best (ties keep the earlier
    /// epoch).
    fn observe(&mut self, epoch: usize, acc: f64) -> bool {
        if acc > self.best_acc {
            self.best_acc = acc;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    fn should_stop(&self, epoch: usize) -> bool {
        epoch - self.best_epoch >= self.patience
    }
}

/// Copies the listed samples into a forward batch plus their targets.
pub fn gather_batch(samples: &[Sample], indices: &[usize]) -> (Batch<f32>, Vec<usize>) {
    let b = indices.len();
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut patches = Tensor::zeros(&[b, 3, PATCH_SIZE, PATCH_SIZE]);
    let mut priors = Tensor::zeros(&[b, CLASS_COUNT]);
    let mut targets = Vec::with_capacity(b);
    for (slot, &i) in indices.iter().enumerate() {
        let sample = &samples[i];
        for view in 0..3 {
            let dst = &mut patches.values_mut()[(slot * 3 + view) * plane..][..plane];
            for (row, chunk) in sample.patches[view].iter().zip(dst.chunks_mut(PATCH_SIZE)) {
                chunk.copy_from_slice(row);
            }
        }
        priors.values_mut()[slot * CLASS_COUNT..(slot + 1) * CLASS_COUNT]
            .copy_from_slice(&sample.prior);
        targets.push(sample.label as usize);
    }
    let batch = Batch::new(patches, priors).expect("shapes are consistent by construction");
    (batch, targets)
}

/// Fraction of samples whose argmax class (lowest index on ties) matches
/// the label. An empty set scores 0.
pub fn validation_accuracy(
    model: &ModelParams<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, targets) = gather_batch(samples, chunk);
        let probs = forward(model, &batch)?;
        for (row, &target) in targets.iter().enumerate() {
            let row_vals = &probs.values()[row * CLASS_COUNT..(row + 1) * CLASS_COUNT];
            let mut arg = 0usize;
            for (c, &p) in row_vals.iter().enumerate() {
                if p > row_vals[arg] {
                    arg = c;
                }
            }
            if arg == target {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains the model and returns the parameters of the best validation
/// epoch together with the per-epoch history.
///
/// Each epoch reshuffles the training set, walks it in batches (the final
/// partial batch is trained on too) with one Adam step per batch, then
/// scores validation accuracy. Training stops at `epochs_max` or once
/// `patience` epochs pass without improvement.
pub fn train(
    model: ModelParams<f32>,
    samples: Vec<Sample>,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory), TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_set, val_set) = split_with_rng(samples, config.val_fraction, &mut rng)?;

    let mut model = model;
    let mut best_params = model.clone();
    let mut tracker = BestTracker::new(config.patience);
    let mut records = Vec::new();
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs_max {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, targets) = gather_batch(&train_set, chunk);
            let (logits, trace) = forward_trace(&model, &batch)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grad_logits = softmax_cross_entropy_backward(&probs, &targets);
            backward(&mut model, &trace, &grad_logits)?;
            for layer in &mut model.layers {
                adam_step(layer, &config.adam)?;
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        let val_acc = validation_accuracy(&model, &val_set, config.batch_size)?;
        records.push(EpochRecord {
            epoch,
            loss: mean_loss,
            val_acc,
        });
        if tracker.observe(epoch, val_acc) {
            best_params = model.clone();
        }
        if tracker.should_stop(epoch) {
            stopped_early = true;
            break;
        }
    }

    Ok((
        best_params,
        TrainHistory {
            records,
            best_epoch: tracker.best_epoch,
            best_val_accuracy: tracker.best_acc,
            stopped_early,
        },
    ))
}
