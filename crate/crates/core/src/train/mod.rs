//! Hand-derived gradients, finite-difference validation and the
//! order-discrimination training experiment.

mod backprop;
mod experiment;
mod gradcheck;
mod task;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use backprop::{loss, loss_and_grads};
pub use experiment::{
    run_experiment, CellOutcome, CellReport, Expectation, ExperimentCell, ExperimentReport, ExperimentSpec, TaskSpec,
};
pub use gradcheck::{
    check_gradient, finite_diff_check, finite_diff_report, relative_error, GradCheckReport, MIN_COORDINATES,
};
pub use task::{gen_order_task, target_of, Example, OrderTask};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{attention_stats, forward, LayerAttentionStats, ModelConfig, ModelParams, TokenSequence};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Number of examples per step, rounded up to whole pairs.
    pub batch_size: usize,
    pub seed: u64,
    /// Heavy-ball coefficient in `[0, 1)`; 0 is plain gradient descent.
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            steps: 1000,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config: ConfigEcho,
    /// Mean batch loss before each update.
    pub loss_curve: Vec<f64>,
    /// Loss over the full training set after the last update.
    pub final_loss: f64,
    pub accuracy: f64,
    /// Per-example accuracy on the permutation-paired subset.
    pub paired_accuracy: f64,
    /// Fraction of pairs with both members correct.
    pub pair_both_correct: f64,
    /// Largest final-position logit distance between pair members seen at
    /// any step (batch pairs before each update, all pairs at the ends).
    pub max_paired_logit_gap: f64,
    /// Smallest such distance over all pairs after training.
    pub min_final_pair_gap: f64,
    pub attention: Vec<LayerAttentionStats>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

fn final_logits(params: &ModelParams, config: &ModelConfig, ex: &Example, index: usize) -> Result<Vec<f64>> {
    let tr = backprop::example_trace(params, config, ex, index)?;
    Ok(tr.logits.column(tr.logits.cols() - 1))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub paired_accuracy: f64,
    pub pair_both_correct: f64,
    pub max_pair_gap: f64,
    pub min_pair_gap: f64,
}

/// Loss, accuracies and pair logit gaps over a whole task.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, task: &OrderTask) -> Result<Evaluation> {
    if task.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty task"));
    }
    let mut logits = Vec::with_capacity(task.len());
    for (i, ex) in task.examples.iter().enumerate() {
        logits.push(final_logits(params, config, ex, i)?);
    }
    let mut loss = 0.0;
    let mut correct = vec![false; task.len()];
    for (i, (ex, l)) in task.examples.iter().zip(&logits).enumerate() {
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let li = lse - l[ex.target];
        if !li.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        loss += li;
        correct[i] = argmax(l) == ex.target;
    }
    let n = task.len() as f64;
    let hits = correct.iter().filter(|&&c| c).count() as f64;
    let n_pairs = task.len() / 2;
    let mut paired_hits = 0usize;
    let mut both = 0usize;
    let mut max_gap = 0.0f64;
    let mut min_gap = f64::INFINITY;
    for k in 0..n_pairs {
        let (a, b) = (2 * k, 2 * k + 1);
        paired_hits += correct[a] as usize + correct[b] as usize;
        both += (correct[a] && correct[b]) as usize;
        let g = distance(&logits[a], &logits[b]);
        max_gap = max_gap.max(g);
        min_gap = min_gap.min(g);
    }
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits / n,
        paired_accuracy: paired_hits as f64 / (2 * n_pairs).max(1) as f64,
        pair_both_correct: both as f64 / n_pairs.max(1) as f64,
        max_pair_gap: max_gap,
        min_pair_gap: if n_pairs == 0 { 0.0 } else { min_gap },
    })
}

fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, m)| m.frobenius_norm_sq())
        .sum::<f64>()
        .sqrt()
}

/// Mean attention statistics over the first few examples.
fn mean_attention_stats(
    params: &ModelParams,
    config: &ModelConfig,
    task: &OrderTask,
) -> Result<Vec<LayerAttentionStats>> {
    let sample = &task.examples[..task.len().min(64)];
    let mut acc: Vec<LayerAttentionStats> = Vec::new();
    for ex in sample {
        let out = forward(params, config, &TokenSequence::new(ex.tokens.clone(), config)?, true)?;
        let stats = attention_stats(&out)?;
        if acc.is_empty() {
            acc = stats;
        } else {
            for (a, s) in acc.iter_mut().zip(stats) {
                a.mean_entropy += s.mean_entropy;
                a.mean_normalized_entropy += s.mean_normalized_entropy;
                a.mean_diagonal_mass += s.mean_diagonal_mass;
            }
        }
    }
    let n = sample.len() as f64;
    for a in &mut acc {
        a.mean_entropy /= n;
        a.mean_normalized_entropy /= n;
        a.mean_diagonal_mass /= n;
    }
    Ok(acc)
}

/// Trains on whole pairs: each step draws `batch_size / 2` pairs (rounded
/// up) from a per-epoch shuffle of the pair indices.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, task: &OrderTask) -> Result<TrainOutcome> {
    train_from(ModelParams::init(model)?, model, cfg, task)
}

pub fn train_from(
    mut params: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    task: &OrderTask,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    model.validate()?;
    params.check(model)?;
    let n_pairs = task.len() / 2;
    if n_pairs == 0 {
        return Err(Error::invalid("training needs at least one example pair"));
    }
    let pairs_per_step = cfg.batch_size.div_ceil(2).min(n_pairs);
    let trainable: Vec<bool> = (0..params.tensors().len())
        .map(|i| params.is_trainable(model, i))
        .collect();
    let mut velocity = params.zeros_like();
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut max_gap = evaluate(&params, model, task)?.max_pair_gap;

    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(2 * pairs_per_step);
        for _ in 0..pairs_per_step {
            if cursor == order.len() {
                order = rng.permutation(n_pairs);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            batch.push(task.examples[2 * k].clone());
            batch.push(task.examples[2 * k + 1].clone());
        }
        let (l, mut grads, logits) = backprop::loss_grads_logits(&params, model, &batch)?;
        for pair in logits.chunks_exact(2) {
            max_gap = max_gap.max(distance(&pair[0], &pair[1]));
        }
        loss_curve.push(l);
        if let Some(clip) = cfg.clip_norm {
            let norm = global_norm(&grads);
            if norm > clip {
                let s = clip / norm;
                for g in grads.tensors_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let gs = grads.tensors();
        for (i, ((p, v), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(gs)
            .enumerate()
        {
            if !trainable[i] {
                continue;
            }
            update(p, v, g, cfg.lr, cfg.momentum);
        }
    }

    let eval = evaluate(&params, model, task)?;
    max_gap = max_gap.max(eval.max_pair_gap);
    let attention = mean_attention_stats(&params, model, task)?;
    Ok(TrainOutcome {
        report: TrainReport {
            config: ConfigEcho {
                model: model.clone(),
                train: *cfg,
            },
            loss_curve,
            final_loss: eval.loss,
            accuracy: eval.accuracy,
            paired_accuracy: eval.paired_accuracy,
            pair_both_correct: eval.pair_both_correct,
            max_paired_logit_gap: max_gap,
            min_final_pair_gap: eval.min_pair_gap,
            attention,
            wallclock_s: start.elapsed().as_secs_f64(),
        },
        params,
    })
}

// v <- momentum * v + g;  p <- p - lr * v
fn update(p: &mut Matrix, v: &mut Matrix, g: &Matrix, lr: f64, momentum: f64) {
    for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = momentum * *vi + gi;
        *pi -= lr * *vi;
    }
}
