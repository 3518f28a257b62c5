//! Combined denoising + next-token training, and the matched next-token-only
//! baseline.

pub mod objective;
pub mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use objective::{batch_loss, evaluate, loss_ar, loss_mdm, BatchItem, Flags, LossBreakdown, Objective, Regime};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};

use crate::corruption::{sample_level, NoiseLevel, DEFAULT_LEVELS};
use crate::data::world::stream_rng;
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{grad, Checkpoint, ModelConfig, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Number of noise levels `K`.
    pub levels: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            objective: Objective::default(),
            epochs: 5,
            batch_size: 4,
            lr_start: 2e-3,
            lr_end: 0.0,
            optimizer: OptimizerKind::adam(),
            grad_clip: 1.0,
            levels: DEFAULT_LEVELS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.levels == 0 || self.objective.block_len == 0 {
            return Err(Error::Config(
                "epochs, batch_size, levels and block_len must be positive".into(),
            ));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end >= 0.0) {
            return Err(Error::Config("learning rate must decay from lr_start to lr_end >= 0".into()));
        }
        if !self.objective.lambda.is_finite() || self.objective.lambda < 0.0 {
            return Err(Error::Config("lambda must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_mdm: f64,
    pub l_ar: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Digest of the example order and noise draws.
    pub stream_hash: String,
}

/// The per-step sequence of `(example index, level, corruption seed)`.
///
/// Depends only on the seed, data size, batch size, epochs and `K`, so the
/// two regimes see the same stream.
pub fn example_stream(config: &TrainConfig, examples: usize) -> Result<Vec<Vec<(usize, NoiseLevel, u64)>>> {
    let mut out = Vec::new();
    let mut drawn = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples).collect();
        order.shuffle(&mut stream_rng(config.seed, 10, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = stream_rng(config.seed, 11, drawn);
                drawn += 1;
                let level = sample_level(config.levels, rng.next_u64())?;
                batch.push((i, level, rng.next_u64()));
            }
            out.push(batch);
        }
    }
    Ok(out)
}

pub fn stream_hash(stream: &[Vec<(usize, NoiseLevel, u64)>]) -> String {
    let mut h = Sha256::new();
    for (step, batch) in stream.iter().enumerate() {
        h.update((step as u64).to_le_bytes());
        for (i, level, seed) in batch {
            h.update((*i as u64).to_le_bytes());
            h.update((level.k() as u64).to_le_bytes());
            h.update(seed.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn numeric_to_diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFiniteActivation { .. } | Error::NonFiniteGradient { .. } => Error::Diverged { step },
        other => other,
    }
}

/// Trains from a fresh initialization. `on_step` sees every step's log.
pub fn train(
    config: &TrainConfig,
    data: &[TrainingExample],
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let mut params = Parameters::<f32>::init(ModelConfig {
        seed: config.seed,
        ..config.model
    })?;
    let mut opt = Optimizer::new(config.optimizer, &params);
    let stream = example_stream(config, data.len())?;
    let total_steps = stream.len();
    let per_epoch = config.steps_per_epoch(data.len());
    let obj = config.objective;
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut acc = LossBreakdown::default();
    for (step, batch) in stream.iter().enumerate() {
        let epoch = step / per_epoch;
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .map(|&(i, level, seed)| BatchItem {
                example: &data[i],
                level,
                seed,
            })
            .collect();
        let mut parts = None;
        let grads = grad(&params, |g, nodes| {
            let loss = batch_loss(g, nodes, &params.config, &obj, &items)?;
            parts = Some(loss.breakdown(g, &obj));
            Ok(loss.total)
        })
        .map_err(|e| numeric_to_diverged(e, step))?;
        let parts = parts.expect("loss recorded");
        if !parts.l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = cosine_lr(config.lr_start, config.lr_end, step, total_steps);
        opt.step(&mut params, &grads, lr, config.grad_clip);
        if params.first_non_finite().is_some() {
            return Err(Error::Diverged { step });
        }
        let log = StepLog {
            step,
            epoch,
            l_mdm: parts.l_mdm,
            l_ar: parts.l_ar,
            l_total: parts.l_total,
            lr,
        };
        on_step(&log);
        steps.push(log);
        acc.l_mdm += parts.l_mdm;
        acc.l_ar += parts.l_ar;
        acc.l_total += parts.l_total;
        acc.n_loss_tokens += parts.n_loss_tokens;
        acc.lambda = parts.lambda;
        if (step + 1) % per_epoch == 0 || step + 1 == total_steps {
            let n = ((step % per_epoch) + 1) as f64;
            epochs.push(EpochLog {
                epoch,
                mean: LossBreakdown {
                    l_mdm: acc.l_mdm / n,
                    l_ar: acc.l_ar / n,
                    l_total: acc.l_total / n,
                    ..acc
                },
            });
            acc = LossBreakdown::default();
        }
    }
    let mut checkpoint = Checkpoint::new(params, total_steps as u64);
    checkpoint.meta = serde_json::json!({
        "regime": obj.regime,
        "train_config": config,
    });
    Ok(TrainOutcome {
        checkpoint,
        steps,
        epochs,
        stream_hash: stream_hash(&stream),
    })
}

/// Mean held-out denoising loss under context-clean corruption and the
/// span-aware mask. Every example is scored at each level in `levels` with a
/// seed derived from `seed`, so two checkpoints can be compared on identical
/// noise.
pub fn heldout_mdm(
    params: &Parameters<f32>,
    data: &[TrainingExample],
    levels: &[NoiseLevel],
    block_len: usize,
    seed: u64,
) -> Result<f64> {
    let obj = Objective {
        regime: Regime::Diffusion,
        lambda: 0.0,
        flags: Flags::default(),
        block_len,
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, ex) in data.iter().enumerate() {
        for (j, level) in levels.iter().enumerate() {
            let s = stream_rng(seed, 12, (i * levels.len() + j) as u64).next_u64();
            let b = evaluate(params, &obj, &[BatchItem { example: ex, level: *level, seed: s }])?;
            if b.n_loss_tokens > 0 {
                sum += b.l_mdm;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::arg("no masked positions in the held-out set"));
    }
    Ok(sum / n as f64)
}

/// Relative error used by gradient checks. Magnitudes below the floor are
/// compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn write_loss_csv(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in steps {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::arg(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests;
