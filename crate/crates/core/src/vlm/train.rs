// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::backward::loss_and_backward;
use super::checkpoint::{ModelCheckpoint, TrainingMeta};
use super::config::ModelConfig;
use super::data::{SyntheticSample, Task};
use super::model::{argmax, Model, ModelWeights};
use crate::error::{CloomError, Result};
use crate::numeric::{adamw_step, OptimizerConfig, OptimizerState, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f32,
    /// Cosine decay of the base rate down to `min_lr_frac` of it.
    pub min_lr_frac: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8,
                weight_decay: 0.01,
                warmup_steps: 100,
            },
            grad_clip: 1.0,
            min_lr_frac: 0.05,
            seed: 0,
            log_every: 100,
        }
    }
}

/// Accuracy of argmax prediction, per task and overall (`"all"`).
pub fn evaluate(model: &Model, samples: &[SyntheticSample]) -> Result<BTreeMap<String, f32>> {
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let pred = model.predict(&s.image, &s.prompt)?;
        let ok = (pred == s.answer) as usize;
        for key in [s.task.as_str(), "all"] {
            let e = hits.entry(key.to_string()).or_default();
            e.0 += ok;
            e.1 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, (h, n))| (k, h as f32 / n as f32))
        .collect())
}

/// Chance accuracy if the model guessed uniformly within each task's answer set.
pub fn chance_accuracy(task: Task) -> f32 {
    1.0 / task.answer_set().len() as f32
}

/// Trains from scratch on `train`, reporting held-out accuracy in the
/// checkpoint metadata.
pub fn train_model(config: ModelConfig, train: &[SyntheticSample], heldout: &[SyntheticSample], tc: &TrainConfig) -> Result<ModelCheckpoint> {
    if train.is_empty() {
        return Err(CloomError::InvalidArgument("training set is empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(CloomError::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = Model::new(config, tc.seed)?;
    let mut state = {
        let params = model.weights.tensors();
        OptimizerState::new(tc.optimizer, &params)
    };
    let mut rng = SeededRng::stream(tc.seed, 7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut final_loss = f32::NAN;
    let mut running = 0.0f32;

    for step in 0..tc.steps {
        let mut grads = ModelWeights::zeros(&model.config);
        let mut loss_sum = 0.0f32;
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            let st = model.forward_state(&s.image, &s.prompt, None)?;
            loss_sum += loss_and_backward(&model, &st, &s.image.data, s.answer, &mut grads);
        }
        let loss = loss_sum / tc.batch_size as f32;
        if !loss.is_finite() {
            return Err(CloomError::Diverged { step });
        }
        grads.scale(1.0 / tc.batch_size as f32);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(CloomError::Diverged { step });
        }
        if tc.grad_clip > 0.0 && norm > tc.grad_clip {
            grads.scale(tc.grad_clip / norm);
        }
        let progress = step as f32 / tc.steps.max(1) as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        state.config.lr = tc.optimizer.lr * (tc.min_lr_frac + (1.0 - tc.min_lr_frac) * cos);
        {
            let mut params = model.weights.tensors_mut();
            let g = grads.tensors();
            adamw_step(&mut params, &g, &mut state)?;
        }
        running = if step == 0 { loss } else { 0.95 * running + 0.05 * loss };
        final_loss = running;
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            info!(step = step + 1, loss = running, "train");
        }
    }

    let accuracy = if heldout.is_empty() {
        BTreeMap::new()
    } else {
        evaluate(&model, heldout)?
    };
    Ok(ModelCheckpoint {
        model,
        meta: TrainingMeta {
            steps: tc.steps,
            seed: tc.seed,
            final_loss,
            accuracy,
        },
    })
}

/// Index of the most likely token among `candidates`.
pub fn restricted_argmax(logits: &[f32], candidates: &[usize]) -> usize {
    let vals: Vec<f32> = candidates.iter().map(|&c| logits[c]).collect();
    candidates[argmax(&vals)]
}
