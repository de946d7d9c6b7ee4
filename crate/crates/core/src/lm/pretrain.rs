//! Full-precision pretraining of the base model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::TokenDataset;
use super::model::{batch_loss_and_grad, forward_nll, Trainable};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::qaft::{adamw_step, clip_grad_norm, AdamConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip_grad_norm: Option<f64>,
    pub eval_every: usize,
    /// Validation blocks per evaluation (`None` for the whole split).
    pub eval_blocks: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 60,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            clip_grad_norm: Some(1.0),
            eval_every: 100,
            eval_blocks: Some(64),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let frac = (step - self.warmup_steps) as f64 / span as f64;
        self.lr * (1.0 - (1.0 - self.min_lr_ratio) * frac.min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_train_nll: f64,
    pub final_train_nll: f64,
    pub best_val_nll: f64,
    pub best_step: usize,
    /// `(step, mean train loss since the previous evaluation, validation NLL)`.
    pub history: Vec<(usize, f64, f64)>,
}

/// Trains fresh parameters seeded from `config` on the pretraining split and
/// returns the snapshot with the lowest validation NLL.
pub fn pretrain_base(
    config: &ModelConfig,
    cfg: &PretrainConfig,
    dataset: &TokenDataset,
) -> Result<(Parameters, PretrainReport)> {
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "pretrain steps, batch_size and eval_every must be positive".into(),
        ));
    }
    let mut params = Parameters::init(config)?;
    let pool = dataset.pretrain.blocks();
    let val: Vec<&[u16]> = match cfg.eval_blocks {
        Some(n) => dataset.val.blocks().into_iter().take(n).collect(),
        None => dataset.val.blocks(),
    };
    let train = dataset.train.blocks();
    let initial_train_nll = forward_nll(&params, None, &train)?;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (forward_nll(&params, None, &val)?, 0, params.clone());
    let mut history = Vec::new();
    let mut running = 0.0;
    let mut since = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&[u16]> = (0..cfg.batch_size)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let (loss, mut grads) = batch_loss_and_grad(&params, None, &batch, Trainable::All)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        if let Some(max) = cfg.clip_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        adamw_step(&mut params, &grads, &mut state, cfg.lr_at(step), &adam)?;
        running += loss;
        since += 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let v = forward_nll(&params, None, &val).map_err(|e| Error::Training(format!("step {step}: {e}")))?;
            log::info!(
                "pretrain step {}: train {:.4} val {v:.4}",
                step + 1,
                running / since as f64
            );
            history.push((step + 1, running / since as f64, v));
            running = 0.0;
            since = 0;
            if v < best.0 {
                best = (v, step + 1, params.clone());
            }
        }
    }
    let (best_val_nll, best_step, params) = best;
    let final_train_nll = forward_nll(&params, None, &train)?;
    Ok((
        params,
        PretrainReport {
            initial_train_nll,
            final_train_nll,
            best_val_nll,
            best_step,
            history,
        },
    ))
}
