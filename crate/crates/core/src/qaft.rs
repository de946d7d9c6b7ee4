//! Quantization-aware fine-tuning.
//!
//! Weights are updated with AdamW (no weight decay) under a linear schedule
//! that ends one order of magnitude below the initial rate. The forward pass
//! always sees `Q(W)`; gradients reach `W` through the straight-through
//! estimator. Quantizer scales are calibrated once on the pretrained weights
//! and stay frozen. Each learning rate of the grid restarts from the
//! pretrained weights; the snapshot with the lowest validation NLL over all
//! rates and epochs wins.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{batch_loss_and_grad, forward_nll, Parameters, TokenDataset, Trainable};
use crate::par;
use crate::quant::ModelQuantizers;
use crate::tensor::{Scalar, Tensor};

/// The straight-through rule: the upstream gradient passes unchanged.
pub fn ste_gradient<T: Scalar>(upstream: &Tensor<T>) -> Tensor<T> {
    upstream.clone()
}

/// `lr0 · (1 − 0.9 · step / total_steps)`: decays to `lr0 / 10` at the last step.
pub fn linear_decay(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 - 0.9 * frac)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter tensor, created on first update.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            moments: vec![None; n_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected AdamW update of the parameters named in `grads`; every
/// other tensor is left untouched.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &[(usize, Tensor)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.moments.len() != params.len() {
        return Err(Error::contract("adamw_step", "optimizer state sized for another model"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (id, g) in grads {
        let p = &mut params.tensors_mut()[*id];
        if p.shape() != g.shape() {
            return Err(Error::contract(
                "adamw_step",
                format!("gradient shape mismatch for tensor {id}"),
            ));
        }
        let (m, v) = state.moments[*id].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            let wf = *w as f64;
            let update = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * wf;
            *w = (wf - lr * update) as f32;
        }
        p.check_finite("adamw_step")
            .map_err(|_| Error::Training(format!("non-finite update of tensor {id}")))?;
    }
    Ok(())
}

/// Rescales gradients so their joint l2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(usize, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(c);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Off unless set; the run record carries the value.
    pub clip_grad_norm: Option<f64>,
    /// Cap on validation/test blocks per evaluation; `None` evaluates whole splits.
    pub eval_blocks: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![1e-6, 1e-5, 1e-4, 1e-3],
            epochs: 8,
            batch_size: 1,
            adam: AdamConfig::default(),
            clip_grad_norm: None,
            eval_blocks: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_grid must hold positive learning rates".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub lr: f64,
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub test_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSummary {
    pub lr: f64,
    /// `None` when the run diverged.
    pub best_val_nll: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub struct QaftOutcome {
    /// Raw weights; always evaluate through the frozen quantizers.
    pub best: Parameters,
    pub best_lr: f64,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub trace: Vec<TraceRow>,
    pub per_lr: Vec<LrSummary>,
}

struct EvalSets<'a> {
    train: Vec<&'a [u16]>,
    val: Vec<&'a [u16]>,
    test: Vec<&'a [u16]>,
}

impl<'a> EvalSets<'a> {
    fn new(ds: &'a TokenDataset, cap: Option<usize>) -> Self {
        let take = |blocks: Vec<&'a [u16]>| match cap {
            Some(n) => blocks.into_iter().take(n).collect(),
            None => blocks,
        };
        Self {
            train: ds.train.blocks(),
            val: take(ds.val.blocks()),
            test: take(ds.test.blocks()),
        }
    }

    fn eval(&self, params: &Parameters, q: &ModelQuantizers) -> Result<(f64, f64, f64)> {
        Ok((
            forward_nll(params, Some(q), &self.train)?,
            forward_nll(params, Some(q), &self.val)?,
            forward_nll(params, Some(q), &self.test)?,
        ))
    }
}

struct LrRun {
    rows: Vec<TraceRow>,
    snapshots: Vec<Parameters>,
    failed: bool,
}

fn run_one_lr(
    pretrained: &Parameters,
    quantizers: &ModelQuantizers,
    sets: &EvalSets<'_>,
    epoch0: (f64, f64, f64),
    lr0: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> LrRun {
    let mut rows = vec![TraceRow {
        lr: lr0,
        epoch: 0,
        train_nll: epoch0.0,
        val_nll: epoch0.1,
        test_nll: epoch0.2,
    }];
    let mut snapshots = vec![pretrained.clone()];
    let mut w = pretrained.clone();
    let mut state = OptimizerState::new(w.len());
    let n = sets.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = linear_decay(lr0, step, total);
            let batch: Vec<&[u16]> = chunk.iter().map(|&i| sets.train[i]).collect();
            let updated = batch_loss_and_grad(&w, Some(quantizers), &batch, Trainable::QuantizedWeights).and_then(
                |(_, mut grads)| {
                    if let Some(max) = cfg.clip_grad_norm {
                        clip_grad_norm(&mut grads, max);
                    }
                    adamw_step(&mut w, &grads, &mut state, lr, &cfg.adam)
                },
            );
            if let Err(e) = updated {
                log::warn!("qaft lr {lr0:e} diverged at epoch {epoch}: {e}");
                return LrRun {
                    rows,
                    snapshots,
                    failed: true,
                };
            }
            step += 1;
        }
        match sets.eval(&w, quantizers) {
            Ok((train_nll, val_nll, test_nll)) => {
                log::debug!("qaft lr {lr0:e} epoch {epoch}: train {train_nll:.4} val {val_nll:.4}");
                rows.push(TraceRow {
                    lr: lr0,
                    epoch,
                    train_nll,
                    val_nll,
                    test_nll,
                });
                snapshots.push(w.clone());
            }
            Err(e) => {
                log::warn!("qaft lr {lr0:e} produced non-finite loss at epoch {epoch}: {e}");
                return LrRun {
                    rows,
                    snapshots,
                    failed: true,
                };
            }
        }
    }
    LrRun {
        rows,
        snapshots,
        failed: false,
    }
}

/// Grid search over initial learning rates, each run restarting from the
/// pretrained weights. Distinct rates run concurrently; each run is sequential.
pub fn qaft_train(
    pretrained: &Parameters,
    quantizers: &ModelQuantizers,
    dataset: &TokenDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<QaftOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let sets = EvalSets::new(dataset, cfg.eval_blocks);
    let epoch0 = sets.eval(pretrained, quantizers)?;
    let runs = par::map(&cfg.lr_grid, |&lr| {
        run_one_lr(pretrained, quantizers, &sets, epoch0, lr, cfg, seed)
    });

    let mut trace = Vec::new();
    let mut per_lr = Vec::new();
    let mut best: Option<(f64, f64, usize, &Parameters)> = None;
    for (run, &lr) in runs.iter().zip(&cfg.lr_grid) {
        trace.extend(run.rows.iter().cloned());
        // epoch 0 is the shared RTN starting point, always a valid candidate
        let mut lr_best: Option<(f64, usize)> = None;
        for (row, snap) in run.rows.iter().zip(&run.snapshots) {
            if lr_best.is_none_or(|(v, _)| row.val_nll < v) {
                lr_best = Some((row.val_nll, row.epoch));
            }
            if best.is_none_or(|(v, ..)| row.val_nll < v) {
                best = Some((row.val_nll, lr, row.epoch, snap));
            }
        }
        per_lr.push(LrSummary {
            lr,
            best_val_nll: (!run.failed || run.rows.len() > 1)
                .then(|| lr_best.map(|b| b.0))
                .flatten(),
            best_epoch: (!run.failed || run.rows.len() > 1)
                .then(|| lr_best.map(|b| b.1))
                .flatten(),
        });
    }
    if runs.iter().all(|r| r.failed) {
        return Err(Error::Training("every learning rate in the grid diverged".into()));
    }
    let (best_val_nll, best_lr, best_epoch, snap) = best.expect("epoch-0 rows exist");
    Ok(QaftOutcome {
        best: snap.clone(),
        best_lr,
        best_epoch,
        best_val_nll,
        trace,
        per_lr,
    })
}
