//! Mini-batch training with AdamW, cosine annealing and early stopping on
//! validation AUC.

mod optim;

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{cosine_lr, global_norm, optimizer_step, AdamWSettings, OptimizerState};

use crate::autograd::{Graph, Var};
use crate::data::{mixup, one_hot, MixupSampler, SubjectRecord};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, predict_scores};
use crate::losses::{beta_schedule, total_loss_graph, LossBreakdown, LossWeights, Target};
use crate::model::{bind, forward_graph, ModelConfig, ModelParams, Mode};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub grad_clip_norm: Option<f64>,
    pub mixup: bool,
    /// Beta(alpha, alpha) concentration for the Mixup coefficient.
    pub mixup_alpha: f64,
    /// Set from the run-level seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_min: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 30,
            early_stop_metric: EarlyStopMetric::ValAuc,
            grad_clip_norm: None,
            mixup: true,
            mixup_alpha: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: format!("train.{key}"),
                msg: msg.into(),
            })
        };
        if !(self.lr_min > 0.0 && self.lr > self.lr_min && self.lr.is_finite()) {
            return bad("lr", "require lr > lr_min > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "moment decay rates must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps", "eps must be positive and weight_decay non-negative");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad("grad_clip_norm", "must be positive");
            }
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha", "must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub val_metric: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub epochs_run: usize,
    pub skipped_batches: usize,
    pub history: Vec<EpochRecord>,
    pub checkpoint_path: Option<String>,
}

pub struct FitOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub report: TrainReport,
    pub log: Vec<StepLog>,
}

/// One training example: network input rows plus (possibly soft) target.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub input: Array2<f64>,
    pub target: Target,
    pub dropout_seed: u64,
}

/// Reverse sweep from `loss`, collected per parameter tensor.
pub fn backward(g: &Graph, loss: Var, vars: &ModelParams<Var>) -> Result<ModelParams> {
    let grads = g.backward(loss)?;
    Ok(vars.map(|_, v| grads.get(*v)))
}

/// Loss and parameter gradients for one example.
pub fn sample_gradients(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    input: ArrayView2<'_, f64>,
    target: &Target,
    beta_t: f64,
    weights: &LossWeights,
    mode: Mode,
) -> Result<(ModelParams, LossBreakdown)> {
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let out = forward_graph(&mut g, &vars, model_cfg, input, mode)?;
    let (loss, breakdown) = total_loss_graph(&mut g, &out, target, beta_t, weights, None)?;
    Ok((backward(&g, loss, &vars)?, breakdown))
}

fn mean_breakdown(rows: &[LossBreakdown]) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for r in rows {
        m.cls += r.cls / n;
        m.aux += r.aux / n;
        m.oc += r.oc / n;
        m.hc += r.hc / n;
        m.beta_t += r.beta_t / n;
        m.total += r.total / n;
    }
    m
}

/// Batch-mean gradients. Examples run in parallel; the reduction is
/// sequential in item order, so the result does not depend on thread count.
pub fn batch_gradients(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    items: &[BatchItem],
    beta_t: f64,
    weights: &LossWeights,
    train_mode: bool,
) -> Result<(ModelParams, LossBreakdown)> {
    let results: Vec<Result<(ModelParams, LossBreakdown)>> = items
        .par_iter()
        .map(|item| {
            let mode = if train_mode {
                Mode::Train {
                    dropout_seed: item.dropout_seed,
                }
            } else {
                Mode::Eval
            };
            sample_gradients(
                params,
                model_cfg,
                item.input.view(),
                &item.target,
                beta_t,
                weights,
                mode,
            )
        })
        .collect();

    let scale = 1.0 / items.len() as f64;
    let mut sum = params.zeros_like();
    let mut breakdowns = Vec::with_capacity(items.len());
    for r in results {
        let (grads, b) = r?;
        let mut gi = grads.refs().into_iter();
        sum.for_each_mut(|_, s| s.scaled_add(scale, gi.next().unwrap()));
        breakdowns.push(b);
    }
    Ok((sum, mean_breakdown(&breakdowns)))
}

fn clip(grads: &mut ModelParams, max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = max_norm / norm;
        grads.for_each_mut(|_, g| g.mapv_inplace(|v| v * f));
    }
}

/// Validation score used for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    /// AUC, or accuracy when the validation set holds a single class.
    pub metric: f64,
    /// Mean cross-entropy of the positive-class probabilities.
    pub loss: f64,
}

impl ValidationScore {
    /// Higher metric wins; equal metrics fall back to lower loss.
    pub fn beats(&self, other: &ValidationScore) -> bool {
        self.metric > other.metric || (self.metric == other.metric && self.loss < other.loss)
    }
}

pub fn validation_score(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    val: &[&SubjectRecord],
) -> Result<ValidationScore> {
    let scores = predict_scores(params, model_cfg, val)?;
    let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let loss = scores
        .iter()
        .zip(&labels)
        .map(|(&p, &l)| -(if l == 1 { p } else { 1.0 - p }).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;
    let metric = match compute_metrics(&scores, &labels) {
        Ok(m) => m.auc,
        Err(Error::SingleClassPresent) => {
            log::warn!("validation set has one class; early stopping on accuracy");
            let correct = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| usize::from(**s >= 0.5) == **l)
                .count();
            correct as f64 / labels.len() as f64
        }
        Err(e) => return Err(e),
    };
    Ok(ValidationScore { metric, loss })
}

/// Trains `params` on `train`, early-stopping on `val`.
///
/// Deterministic in `cfg.seed`: shuffling, Mixup draws and dropout masks all
/// come from seeds derived from (epoch, batch, item).
pub fn fit(
    train: &[&SubjectRecord],
    val: &[&SubjectRecord],
    mut params: ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    weights.validate()?;
    model_cfg.validate()?;
    for s in train.iter().chain(val) {
        if s.matrix.n() != model_cfg.n {
            return Err(Error::ShapeMismatch(format!(
                "subject {} has n={}, model expects {}",
                s.id,
                s.matrix.n(),
                model_cfg.n
            )));
        }
    }

    let classes = model_cfg.class_count;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let sampler = MixupSampler::new(cfg.mixup_alpha)?;
    let adamw = cfg.adamw();
    let mut state = OptimizerState::new(&params);

    let mut best_params = params.clone();
    let mut best = ValidationScore {
        metric: f64::NEG_INFINITY,
        loss: f64::INFINITY,
    };
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut skipped = 0;
    let mut history = Vec::new();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[epoch as u64],
        )));

        let mut epoch_losses = Vec::with_capacity(batches_per_epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let items: Vec<BatchItem> = if cfg.mixup && chunk.len() > 1 {
                let lambda = sampler.sample(&mut rng);
                let mut partner: Vec<usize> = chunk.to_vec();
                partner.shuffle(&mut rng);
                chunk
                    .iter()
                    .zip(&partner)
                    .enumerate()
                    .map(|(i, (&a, &p))| {
                        let (x, y) = mixup(
                            train[a].matrix.values(),
                            train[p].matrix.values(),
                            &one_hot(train[a].label, classes),
                            &one_hot(train[p].label, classes),
                            lambda,
                        )?;
                        Ok(BatchItem {
                            input: x,
                            target: Target::Soft(normalize(y)),
                            dropout_seed: derive_seed(batch_seed, &[i as u64]),
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| BatchItem {
                        input: train[a].matrix.values().to_owned(),
                        target: Target::Class(train[a].label),
                        dropout_seed: derive_seed(batch_seed, &[i as u64]),
                    })
                    .collect()
            };

            let lr_t = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
            let beta_t = beta_schedule(step, total_steps, weights);
            let applied = batch_gradients(&params, model_cfg, &items, beta_t, weights, true)
                .and_then(|(mut grads, breakdown)| {
                    if let Some(c) = cfg.grad_clip_norm {
                        clip(&mut grads, c);
                    }
                    optimizer_step(&mut params, &grads, &mut state, lr_t, &adamw)?;
                    Ok(breakdown)
                });
            match applied {
                Ok(breakdown) => {
                    log.push(StepLog {
                        step,
                        loss: breakdown,
                        lr: lr_t,
                    });
                    epoch_losses.push(breakdown);
                }
                Err(e) if e.is_numerical() => {
                    log::warn!("step {step}: skipping batch ({e})");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }

        epochs_run = epoch + 1;
        let score = validation_score(&params, model_cfg, val)?;
        history.push(EpochRecord {
            epoch: epochs_run,
            mean_loss: mean_breakdown(&epoch_losses),
            val_metric: score.metric,
            val_loss: score.loss,
        });
        log::debug!(
            "epoch {epochs_run}: loss {:.4} val {:.4}",
            mean_breakdown(&epoch_losses).total,
            score.metric
        );
        if score.beats(&best) {
            best = score;
            best_epoch = epochs_run;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    Ok(FitOutcome {
        params: best_params,
        report: TrainReport {
            best_epoch,
            best_val_metric: best.metric,
            epochs_run,
            skipped_batches: skipped,
            history,
            checkpoint_path: None,
        },
        log,
    })
}

/// Removes rounding drift so a Mixup label sums to exactly 1.
fn normalize(mut y: Vec<f64>) -> Vec<f64> {
    let s: f64 = y.iter().sum();
    if s > 0.0 {
        y.iter_mut().for_each(|v| *v /= s);
    }
    y
}

pub const TRAINING_LOG_HEADER: &str = "step,cls,aux,oc,hc,beta,total,lr";

pub fn training_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.loss.cls, r.loss.aux, r.loss.oc, r.loss.hc, r.loss.beta_t, r.loss.total, r.lr
        ));
    }
    out
}

pub fn write_training_log(path: &Path, log: &[StepLog]) -> Result<()> {
    fs::write(path, training_log_csv(log)).map_err(|e| Error::io(path, e))
}
