//! Source-domain training and prototype extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Tape};
use crate::child_seed;
use crate::datastream::LabeledDataset;
use crate::error::{CttaError, Result};

use super::{
    argmax_rows, update_norm_stats, Adam, AdamConfig, CheckpointMeta, ForwardContext, NormMode,
    SourceCheckpoint, SplitModel,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 40, lr: 3e-3, batch_size: 64, seed: 7 }
    }
}

/// Train on labeled source data, then bake class prototypes and the domain
/// prototype into a checkpoint. The domain prototype is the unweighted mean
/// of the class prototypes, making it invariant to class imbalance.
pub fn pretrain_source(
    mut model: SplitModel,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<SourceCheckpoint> {
    if data.num_classes != model.arch.num_classes {
        return Err(CttaError::invalid("pretrain", "class count mismatch with architecture"));
    }
    if data.input_dim != model.arch.input_dim {
        return Err(CttaError::invalid("pretrain", "input dimension mismatch"));
    }
    for c in 0..data.num_classes {
        if !data.labels.contains(&c) {
            return Err(CttaError::invalid("pretrain", format!("class {c} has no samples")));
        }
    }
    if cfg.batch_size < 2 {
        return Err(CttaError::invalid("pretrain", "batch size must be at least 2"));
    }

    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &model.params.sizes(),
    );
    let mut order: Vec<usize> = (0..data.num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, "pretrain-shuffle"));

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // Partial trailing chunks are skipped: batch statistics on one
            // sample are degenerate, and shuffling covers the data anyway.
            if chunk.len() < cfg.batch_size {
                continue;
            }
            train_step(&mut model, &mut adam, data, chunk)?;
        }
    }

    let accuracy = source_accuracy(&model, data)?;
    let (class_prototypes, domain_prototype) = compute_prototypes(&model, data)?;
    let metadata = CheckpointMeta {
        model_seed: model.seed,
        pretrain_seed: cfg.seed,
        epochs: cfg.epochs,
        lr: cfg.lr,
        source_accuracy: accuracy,
    };
    Ok(SourceCheckpoint { model, class_prototypes, domain_prototype, metadata })
}

fn train_step(
    model: &mut SplitModel,
    adam: &mut Adam,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<()> {
    let b = batch.len();
    let d = data.input_dim;
    let c = data.num_classes;
    let mut inputs = Vec::with_capacity(b * d);
    let mut onehot = vec![0.0; b * c];
    for (row, &idx) in batch.iter().enumerate() {
        inputs.extend_from_slice(data.row(idx));
        onehot[row * c + data.labels[idx]] = 1.0;
    }

    let mut tape = Tape::new();
    let x = DiffTensor::constant(inputs, &[b, d])?;
    let targets = DiffTensor::constant(onehot, &[b, c])?;
    let leaves = model.params.leaves(&mut tape)?;
    let ctx = ForwardContext::new(&model.arch, &leaves, &model.norm_stats);
    let (features, observed) = ctx.features(&mut tape, &x, NormMode::Batch)?;
    let logits = ctx.logits(&mut tape, &features)?;
    let probs = tape.softmax_rows(&logits)?;
    let log_probs = tape.ln_clamped(&probs)?;
    let picked = tape.mul(&targets, &log_probs)?;
    let total = tape.sum_all(&picked)?;
    let loss = tape.scale(&total, -1.0 / b as f64)?;

    let grads = tape.backward(&loss)?;
    let grad_list: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();
    adam.step(&mut model.params, &grad_list)?;
    update_norm_stats(&mut model.norm_stats, &observed);
    Ok(())
}

/// Eval-mode accuracy over a labeled dataset.
pub fn source_accuracy(model: &SplitModel, data: &LabeledDataset) -> Result<f64> {
    let (_, logits) = model.forward_const(&data.inputs, data.num_samples, NormMode::Running)?;
    let predictions = argmax_rows(&logits);
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.num_samples as f64)
}

/// Eval-mode class prototypes (per-class feature means) and the domain
/// prototype (unweighted mean of class prototypes).
pub fn compute_prototypes(
    model: &SplitModel,
    data: &LabeledDataset,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (features, _) = model.forward_const(&data.inputs, data.num_samples, NormMode::Running)?;
    let d = model.arch.feature_dim;
    let c = model.arch.num_classes;
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (i, &label) in data.labels.iter().enumerate() {
        counts[label] += 1;
        for j in 0..d {
            sums[label][j] += features.values()[i * d + j];
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        if count == 0 {
            return Err(CttaError::invalid("prototypes", "class without samples"));
        }
        for v in sum.iter_mut() {
            *v /= count as f64;
        }
    }
    let mut domain = vec![0.0; d];
    for proto in &sums {
        for j in 0..d {
            domain[j] += proto[j];
        }
    }
    for v in &mut domain {
        *v /= c as f64;
    }
    Ok((sums, domain))
}
