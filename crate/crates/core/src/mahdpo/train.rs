use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batch::{epoch_batches, MiniBatch};
use super::loss::{combined_loss_var, dpo_pair_loss, PolicyHead};
use super::pair::{encode_pairs, EncodedPair, PreferencePair};
use super::TrainError;
use crate::numcore::{clip_global_norm, global_norm, Adam, Graph, Tensor};
use crate::policy::{check_simplex, PolicyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    /// Objective weights; empty means uniform over the model's heads.
    pub alpha: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub balanced_batching: bool,
    pub seed: u64,
    /// Head perturbation scale used by `init_heads`.
    pub perturb_scale: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: Vec::new(),
            lr: 1e-4,
            batch_size: 16,
            epochs: 1,
            balanced_batching: true,
            seed: 0,
            perturb_scale: 0.001,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// `alpha`, or uniform weights when unset.
    pub fn weights(&self, heads: usize) -> Vec<f64> {
        if self.alpha.is_empty() {
            vec![1.0 / heads as f64; heads]
        } else {
            self.alpha.clone()
        }
    }

    pub fn validate(&self, heads: usize) -> Result<(), TrainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TrainError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return Err(TrainError::Config(format!("perturb scale must be non-negative, got {}", self.perturb_scale)));
        }
        check_simplex(&self.weights(heads), heads)?;
        Ok(())
    }
}

/// Loss, margins, and gradients of one combined-loss evaluation.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    /// Per-pair `(loss, delta)`, grouped by objective.
    pub pairs: Vec<Vec<(f64, f64)>>,
    pub backbone: Vec<Tensor>,
    pub heads: Vec<Tensor>,
}

impl BatchGradients {
    pub fn all(&self) -> Vec<Tensor> {
        self.backbone.iter().chain(&self.heads).cloned().collect()
    }
}

/// One forward and one backward of the combined loss.
pub fn combined_gradients(
    model: &PolicyModel,
    batch: &MiniBatch<EncodedPair>,
    alpha: &[f64],
    beta: f64,
) -> Result<BatchGradients, TrainError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let terms = combined_loss_var(&mut g, model, &vars, batch, alpha, beta)?;
    let grads = g.backward(terms.loss)?;
    Ok(BatchGradients {
        loss: g.item(terms.loss),
        pairs: terms.pairs.iter().map(|grp| grp.iter().map(|(l, d)| (g.item(*l), g.item(*d))).collect()).collect(),
        backbone: vars.backbone.iter().map(|v| grads.get(*v)).collect(),
        heads: vars.heads.iter().map(|v| grads.get(*v)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub head_pairs: Vec<usize>,
    /// Mean pair loss per head; 0 for heads without pairs.
    pub head_loss: Vec<f64>,
    /// Fraction of the head's pairs with positive margin; 0 without pairs.
    pub head_accuracy: Vec<f64>,
    pub backbone_grad_norm: f64,
    pub head_grad_norm: Vec<f64>,
}

/// One optimizer update on the combined loss. Non-finite gradients abort the
/// step before any parameter changes.
pub fn train_step(
    model: &mut PolicyModel,
    opt: &mut Adam,
    batch: &MiniBatch<EncodedPair>,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let alpha = cfg.weights(model.num_heads());
    let bg = combined_gradients(model, batch, &alpha, cfg.beta)?;
    let mut grads = bg.all();
    let names = crate::policy::Backbone::names(model.dims());
    for (k, gr) in grads.iter().enumerate() {
        if !gr.all_finite() {
            let param = names.get(k).cloned().unwrap_or_else(|| format!("head.{}", k - names.len()));
            return Err(TrainError::NonFiniteGradient { param, step: opt.steps_taken() });
        }
    }
    let metrics = StepMetrics {
        loss: bg.loss,
        head_pairs: bg.pairs.iter().map(Vec::len).collect(),
        head_loss: bg.pairs.iter().map(|p| mean(p.iter().map(|x| x.0))).collect(),
        head_accuracy: bg.pairs.iter().map(|p| mean(p.iter().map(|x| f64::from(u8::from(x.1 > 0.0))))).collect(),
        backbone_grad_norm: global_norm(&bg.backbone),
        head_grad_norm: bg.heads.iter().map(|h| h.sum_squares().sqrt()).collect(),
    };
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.step(&mut model.trainable_mut(), &grads);
    Ok(metrics)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub metrics: StepMetrics,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<TrainLogRow>,
}

impl TrainReport {
    /// Comma-separated log: step, epoch, total loss, then per-head pair count,
    /// loss, accuracy and gradient norm, then the backbone gradient norm.
    pub fn write_csv(&self, path: &Path, heads: usize) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["step".to_string(), "epoch".into(), "loss".into()];
        for i in 0..heads {
            header.extend([format!("head{i}_pairs"), format!("head{i}_loss"), format!("head{i}_accuracy"), format!("head{i}_grad_norm")]);
        }
        header.push("backbone_grad_norm".into());
        writeln!(f, "{}", header.join(","))?;
        for row in &self.log {
            let m = &row.metrics;
            let mut cells = vec![row.step.to_string(), row.epoch.to_string(), format!("{:e}", m.loss)];
            for i in 0..heads {
                cells.extend([
                    m.head_pairs[i].to_string(),
                    format!("{:e}", m.head_loss[i]),
                    format!("{:e}", m.head_accuracy[i]),
                    format!("{:e}", m.head_grad_norm[i]),
                ]);
            }
            cells.push(format!("{:e}", m.backbone_grad_norm));
            writeln!(f, "{}", cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Routed mini-batch MAH-DPO over all pairs, starting from a model whose
/// heads and reference have been set up by `init_heads`.
pub fn train_mahdpo(model: &mut PolicyModel, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate(model.num_heads())?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encoded = encode_pairs(model, pairs)?;
    train_mahdpo_encoded(model, &encoded, cfg)
}

/// Same as [`train_mahdpo`] on pre-encoded pairs.
pub fn train_mahdpo_encoded(model: &mut PolicyModel, pairs: &[EncodedPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate(model.num_heads())?;
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(pairs, model.num_heads(), cfg.batch_size, cfg.balanced_batching, cfg.seed, epoch as u64)?;
        for batch in &batches {
            let metrics = train_step(model, &mut opt, batch, cfg)?;
            log::debug!("mahdpo epoch {epoch} step {} loss {:.5}", report.log.len(), metrics.loss);
            report.log.push(TrainLogRow { step: report.log.len(), epoch, metrics });
        }
    }
    Ok(report)
}

/// Held-out preference statistics under one policy head or ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEval {
    pub pairs: usize,
    /// Fraction of pairs with positive implicit margin.
    pub accuracy: f64,
    pub mean_delta: f64,
    pub mean_loss: f64,
}

pub fn evaluate_preferences(model: &PolicyModel, head: &PolicyHead, pairs: &[EncodedPair], beta: f64) -> Result<PreferenceEval, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut acc, mut delta, mut loss) = (0.0, 0.0, 0.0);
    for p in pairs {
        let pl = dpo_pair_loss(model, head, p, beta)?;
        acc += f64::from(u8::from(pl.delta > 0.0));
        delta += pl.delta;
        loss += pl.loss;
    }
    let n = pairs.len() as f64;
    Ok(PreferenceEval { pairs: pairs.len(), accuracy: acc / n, mean_delta: delta / n, mean_loss: loss / n })
}
