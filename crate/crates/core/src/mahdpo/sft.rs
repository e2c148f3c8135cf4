use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numcore::{clip_global_norm, Adam, Graph};
use crate::policy::{HeadSource, PolicyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// The learning rate follows a cosine from `lr` down to
    /// `lr * final_lr_fraction` over all steps; 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { lr: 3e-3, batch_size: 16, epochs: 1, seed: 0, grad_clip: 1.0, final_lr_fraction: 1.0 }
    }
}

impl SftConfig {
    /// Learning rate of optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Tokenized `(prompt, response)` example; the response ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

pub fn encode_sft(model: &PolicyModel, data: &[(String, String)]) -> Result<Vec<SftExample>, TrainError> {
    let tok = model.tokenizer();
    data.iter()
        .map(|(x, y)| {
            let mut response = tok.encode(y)?;
            response.push(tok.eos());
            Ok(SftExample { prompt: tok.encode_prompt(x)?, response })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Token-mean cross-entropy of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Token-mean next-token cross-entropy over response tokens under head 0.
pub fn sft_loss(model: &PolicyModel, data: &[SftExample]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for ex in data {
        nll -= model.sequence_logprob(&HeadSource::Head(0), &ex.prompt, &ex.response)?;
        count += ex.response.len();
    }
    Ok(nll / count as f64)
}

/// Fraction of response tokens that head 0 predicts by argmax.
pub fn token_accuracy(model: &PolicyModel, data: &[SftExample]) -> Result<f64, TrainError> {
    let (mut hit, mut count) = (0usize, 0usize);
    for ex in data {
        let tokens: Vec<usize> = ex.prompt.iter().chain(&ex.response).copied().collect();
        let hidden = model.backbone.hidden_states(&tokens)?;
        for (k, &tok) in ex.response.iter().enumerate() {
            let z = model.head_logits(hidden.row(ex.prompt.len() - 1 + k), 0)?;
            let best = (0..z.len()).fold(0, |b, j| if z[j] > z[b] { j } else { b });
            hit += usize::from(best == tok);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(hit as f64 / count as f64)
}

/// Supervised fine-tuning of backbone and head 0 on response tokens only.
/// Afterwards every head equals head 0 and the reference is re-snapshotted.
pub fn train_sft(model: &mut PolicyModel, data: &[SftExample], cfg: &SftConfig) -> Result<SftReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("SFT needs a positive batch size and learning rate".into()));
    }
    if !(cfg.final_lr_fraction > 0.0 && cfg.final_lr_fraction <= 1.0) {
        return Err(TrainError::Config("final_lr_fraction must lie in (0, 1]".into()));
    }
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.lr);
    let mut report = SftReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            opt.lr = cfg.lr_at(report.step_losses.len(), total_steps);
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let mut total = None;
            let mut tokens = 0usize;
            for &i in chunk {
                let ex = &data[i];
                let lp = model.head_logprob_var(&mut g, &vars, 0, &ex.prompt, &ex.response)?;
                tokens += ex.response.len();
                total = Some(match total {
                    Some(t) => g.add(t, lp)?,
                    None => lp,
                });
            }
            let loss = g.scale(total.expect("non-empty chunk"), -1.0 / tokens as f64);
            let grads = g.backward(loss)?;
            let mut gs: Vec<_> = vars.backbone.iter().chain(&vars.heads).map(|v| grads.get(*v)).collect();
            if gs.iter().any(|t| !t.all_finite()) {
                return Err(TrainError::NonFiniteGradient { param: "sft".into(), step: opt.steps_taken() });
            }
            clip_global_norm(&mut gs, cfg.grad_clip);
            opt.step(&mut model.trainable_mut(), &gs);
            report.step_losses.push(g.item(loss));
        }
        log::debug!("sft epoch {epoch} loss {:.4}", report.step_losses.last().copied().unwrap_or(f64::NAN));
    }
    let head0 = model.heads[0].clone();
    for h in model.heads.iter_mut().skip(1) {
        *h = head0.clone();
    }
    model.snapshot_reference();
    Ok(report)
}
