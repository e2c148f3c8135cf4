use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PrmError;
use crate::decode::StepScorer;
use crate::numcore::{clip_global_norm, log_sigmoid, sigmoid, Adam, Graph, Tensor, Var};
use crate::policy::{Backbone, Container, ModelDims, ModelError, TokenizerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    ValueRegression,
    BinaryClassifier,
    BradleyTerry,
}

impl RewardKind {
    fn tag(self) -> &'static str {
        match self {
            RewardKind::ValueRegression => "prm-value",
            RewardKind::BinaryClassifier => "prm-classifier",
            RewardKind::BradleyTerry => "reward-bt",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "prm-value" => Some(RewardKind::ValueRegression),
            "prm-classifier" => Some(RewardKind::BinaryClassifier),
            "reward-bt" => Some(RewardKind::BradleyTerry),
            _ => None,
        }
    }
}

/// Transformer backbone with a scalar head read at the last token.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub backbone: Backbone,
    /// `[d, 1]`.
    pub head: Tensor,
    /// `[1]`.
    pub bias: Tensor,
    tokenizer: TokenizerSpec,
}

/// Prompt plus a response prefix with one regression or class target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixExample {
    pub prompt: Vec<usize>,
    pub prefix: Vec<usize>,
    pub target: f64,
}

impl PrefixExample {
    fn tokens(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.prefix).copied().collect()
    }
}

/// Complete-response comparison for Bradley-Terry training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmTrainConfig {
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for PrmTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 16, epochs: 10, seed: 0, grad_clip: 1.0 }
    }
}

/// Final metrics of a reward-model training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrmReport {
    pub step_losses: Vec<f64>,
    /// MSE (value), accuracy (classifier) or ranking accuracy (BT) on the training set.
    pub train_metric: f64,
    /// Same metric on the held-out set; NaN without one.
    pub heldout_metric: f64,
}

/// Nested prefixes of one sequence, read off a single forward pass.
struct Group {
    tokens: Vec<usize>,
    ends: Vec<usize>,
    targets: Vec<f64>,
}

fn group_examples(data: &[PrefixExample]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    for ex in data {
        let toks = ex.tokens();
        let end = toks.len() - 1;
        if let Some(g) = groups.last_mut() {
            if toks.len() >= g.tokens.len() && toks.starts_with(&g.tokens) {
                g.tokens = toks;
                g.ends.push(end);
                g.targets.push(ex.target);
                continue;
            }
            if g.tokens.starts_with(&toks) {
                g.ends.push(end);
                g.targets.push(ex.target);
                continue;
            }
        }
        groups.push(Group { tokens: toks, ends: vec![end], targets: vec![ex.target] });
    }
    groups
}

impl RewardModel {
    /// Fresh scalar head on a copy of `backbone`.
    pub fn from_backbone(kind: RewardKind, backbone: Backbone, tokenizer: TokenizerSpec, seed: u64) -> Self {
        let d = backbone.dims().hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Tensor::randn(&[d, 1], 0.01, &mut rng);
        Self { kind, backbone, head, bias: Tensor::vector(vec![0.0]), tokenizer }
    }

    /// Randomly initialized backbone.
    pub fn new(kind: RewardKind, dims: &ModelDims, tokenizer: TokenizerSpec, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(dims, &mut rng);
        Ok(Self::from_backbone(kind, backbone, tokenizer, seed.wrapping_add(1)))
    }

    pub fn tokenizer(&self) -> &TokenizerSpec {
        &self.tokenizer
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len == 0 {
            return Err(ModelError::EmptySequence);
        }
        let limit = self.backbone.dims().max_positions;
        if len > limit {
            return Err(ModelError::SequenceTooLong { len, limit });
        }
        Ok(())
    }

    /// Raw scalar output (before any sigmoid) at the last token.
    pub fn raw_score(&self, tokens: &[usize]) -> Result<f64, ModelError> {
        self.check_len(tokens.len())?;
        let cache = self.backbone.encode(tokens)?;
        let h = cache.last_hidden();
        Ok(h.iter().zip(self.head.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias.data()[0])
    }

    /// Predicted value, positive-class probability, or BT score.
    pub fn score(&self, tokens: &[usize]) -> Result<f64, ModelError> {
        let s = self.raw_score(tokens)?;
        Ok(match self.kind {
            RewardKind::BinaryClassifier => sigmoid(s),
            _ => s,
        })
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.backbone.params_mut().iter_mut().collect();
        v.push(&mut self.head);
        v.push(&mut self.bias);
        v
    }

    /// Raw outputs at `ends` of `tokens`, as a `[ends.len(), 1]` node.
    fn raw_var(&self, g: &mut Graph, vars: &[Var], tokens: &[usize], ends: &[usize]) -> Result<Var, ModelError> {
        self.check_len(tokens.len())?;
        let n = vars.len();
        let h = self.backbone.forward(g, &vars[..n - 2], tokens)?;
        let picked = g.rows(h, ends)?;
        let s = g.matmul(picked, vars[n - 2])?;
        Ok(g.add_row(s, vars[n - 1])?)
    }

    /// Parameter tensors in binding order: backbone, head, bias.
    pub fn params(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.backbone.params().to_vec();
        v.push(self.head.clone());
        v.push(self.bias.clone());
        v
    }

    /// Graph form of the prefix loss over `data`, with `vars` bound in
    /// [`params`](Self::params) order.
    pub fn prefix_loss_var(&self, g: &mut Graph, vars: &[Var], data: &[PrefixExample]) -> Result<Var, PrmError> {
        let groups = group_examples(data);
        let refs: Vec<&Group> = groups.iter().collect();
        self.prefix_loss(g, vars, &refs)
    }

    /// Mean Bradley-Terry loss `-log sigmoid(s(chosen) - s(rejected))` as a graph node.
    pub fn bt_loss_var(&self, g: &mut Graph, vars: &[Var], pairs: &[&ScoredPair]) -> Result<Var, PrmError> {
        let mut acc: Option<Var> = None;
        for p in pairs {
            let tw: Vec<usize> = p.prompt.iter().chain(&p.chosen).copied().collect();
            let tl: Vec<usize> = p.prompt.iter().chain(&p.rejected).copied().collect();
            let sw = self.raw_var(g, vars, &tw, &[tw.len() - 1])?;
            let sl = self.raw_var(g, vars, &tl, &[tl.len() - 1])?;
            let diff = g.sub(sw, sl)?;
            let ls = g.log_sigmoid(diff);
            let s = g.sum(ls);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let sum = acc.ok_or(PrmError::EmptyDataset)?;
        Ok(g.scale(sum, -1.0 / pairs.len() as f64))
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        let mut vars = self.backbone.bind(g);
        vars.push(g.leaf(self.head.clone()));
        vars.push(g.leaf(self.bias.clone()));
        vars
    }

    fn apply(&mut self, opt: &mut Adam, g: &Graph, vars: &[Var], loss: Var, clip: f64) -> Result<(), PrmError> {
        let grads = g.backward(loss)?;
        let mut gs: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
        if gs.iter().any(|t| !t.all_finite()) {
            return Err(PrmError::NonFinite(format!("reward-model gradient at step {}", opt.steps_taken())));
        }
        clip_global_norm(&mut gs, clip);
        opt.step(&mut self.trainable_mut(), &gs);
        Ok(())
    }

    /// Graph loss of a batch of prefix groups: mean squared error or mean
    /// binary cross-entropy over every prefix in the batch.
    fn prefix_loss(&self, g: &mut Graph, vars: &[Var], groups: &[&Group]) -> Result<Var, PrmError> {
        let total: usize = groups.iter().map(|gr| gr.ends.len()).sum();
        let mut acc: Option<Var> = None;
        for gr in groups {
            let s = self.raw_var(g, vars, &gr.tokens, &gr.ends)?;
            let k = gr.ends.len();
            let term = match self.kind {
                RewardKind::ValueRegression => {
                    let m = g.mse(s, &Tensor::new(vec![k, 1], gr.targets.clone())?)?;
                    g.scale(m, k as f64 / total as f64)
                }
                RewardKind::BinaryClassifier => {
                    let signs: Vec<f64> = gr.targets.iter().map(|&y| if y >= 0.5 { 1.0 } else { -1.0 }).collect();
                    let sign = g.constant(Tensor::new(vec![k, 1], signs)?);
                    let signed = g.mul(s, sign)?;
                    let ls = g.log_sigmoid(signed);
                    let sum = g.sum(ls);
                    g.scale(sum, -1.0 / total as f64)
                }
                RewardKind::BradleyTerry => return Err(PrmError::Config("prefix targets need a value or classifier model".into())),
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or(PrmError::EmptyDataset)
    }

    /// Mean squared error of predictions against targets.
    pub fn mse(&self, data: &[PrefixExample]) -> Result<f64, PrmError> {
        if data.is_empty() {
            return Err(PrmError::EmptyDataset);
        }
        let mut s = 0.0;
        for ex in data {
            let d = self.score(&ex.tokens())? - ex.target;
            s += d * d;
        }
        Ok(s / data.len() as f64)
    }

    /// Fraction of examples whose thresholded prediction matches the label.
    pub fn accuracy(&self, data: &[PrefixExample]) -> Result<f64, PrmError> {
        if data.is_empty() {
            return Err(PrmError::EmptyDataset);
        }
        let mut hit = 0usize;
        for ex in data {
            hit += usize::from((self.score(&ex.tokens())? >= 0.5) == (ex.target >= 0.5));
        }
        Ok(hit as f64 / data.len() as f64)
    }

    /// Fraction of pairs where the chosen response outscores the rejected one.
    pub fn ranking_accuracy(&self, pairs: &[ScoredPair]) -> Result<f64, PrmError> {
        if pairs.is_empty() {
            return Err(PrmError::EmptyDataset);
        }
        let mut hit = 0usize;
        for p in pairs {
            let w = self.raw_score(&[p.prompt.as_slice(), &p.chosen].concat())?;
            let l = self.raw_score(&[p.prompt.as_slice(), &p.rejected].concat())?;
            hit += usize::from(w > l);
        }
        Ok(hit as f64 / pairs.len() as f64)
    }

    /// `mean -log sigmoid(R(x, y_w) - R(x, y_l))`.
    pub fn bt_loss(&self, pairs: &[ScoredPair]) -> Result<f64, PrmError> {
        if pairs.is_empty() {
            return Err(PrmError::EmptyDataset);
        }
        let mut s = 0.0;
        for p in pairs {
            let w = self.raw_score(&[p.prompt.as_slice(), &p.chosen].concat())?;
            let l = self.raw_score(&[p.prompt.as_slice(), &p.rejected].concat())?;
            s -= log_sigmoid(w - l);
        }
        Ok(s / pairs.len() as f64)
    }

    pub fn to_container(&self) -> Container {
        let names = Backbone::names(self.backbone.dims());
        let mut tensors: Vec<(String, Tensor)> =
            names.into_iter().zip(self.backbone.params().iter().cloned()).map(|(n, t)| (format!("backbone.{n}"), t)).collect();
        tensors.push(("head".into(), self.head.clone()));
        tensors.push(("bias".into(), self.bias.clone()));
        Container {
            kind: self.kind.tag().into(),
            dims: self.backbone.dims().clone(),
            tokenizer: self.tokenizer.clone(),
            meta: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn from_container(mut c: Container) -> Result<Self, ModelError> {
        let kind = RewardKind::from_tag(&c.kind).ok_or_else(|| ModelError::Checkpoint(format!("{:?} is not a reward model", c.kind)))?;
        let names = Backbone::names(&c.dims);
        let params = c.take_prefixed("backbone", &names)?;
        let backbone = Backbone::from_params(&c.dims, params)?;
        let head = c.take("head")?;
        let bias = c.take("bias")?;
        if head.shape() != [c.dims.hidden_dim, 1] || bias.shape() != [1] {
            return Err(ModelError::Checkpoint("reward head shape".into()));
        }
        Ok(Self { kind, backbone, head, bias, tokenizer: c.tokenizer })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_container(Container::load(path)?)
    }
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn check_cfg(cfg: &PrmTrainConfig) -> Result<(), PrmError> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(PrmError::Config("reward training needs a positive batch size and learning rate".into()));
    }
    Ok(())
}

fn train_prefix_model(model: &mut RewardModel, data: &[PrefixExample], cfg: &PrmTrainConfig) -> Result<Vec<f64>, PrmError> {
    check_cfg(cfg)?;
    let groups = group_examples(data);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = shuffled(groups.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Group> = chunk.iter().map(|&i| &groups[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let loss = model.prefix_loss(&mut g, &vars, &batch)?;
            losses.push(g.item(loss));
            model.apply(&mut opt, &g, &vars, loss, cfg.grad_clip)?;
        }
        log::debug!("prm epoch {epoch} loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    }
    Ok(losses)
}

/// Regresses predictions onto value targets by mean squared error. The bias
/// starts at the mean target.
pub fn train_value_prm(
    model: &mut RewardModel,
    data: &[PrefixExample],
    heldout: &[PrefixExample],
    cfg: &PrmTrainConfig,
) -> Result<PrmReport, PrmError> {
    if model.kind != RewardKind::ValueRegression {
        return Err(PrmError::Config("train_value_prm needs a value-regression model".into()));
    }
    if data.is_empty() {
        return Err(PrmError::EmptyDataset);
    }
    model.bias.data_mut()[0] = data.iter().map(|e| e.target).sum::<f64>() / data.len() as f64;
    let step_losses = train_prefix_model(model, data, cfg)?;
    let heldout_metric = if heldout.is_empty() { f64::NAN } else { model.mse(heldout)? };
    Ok(PrmReport { step_losses, train_metric: model.mse(data)?, heldout_metric })
}

/// Binary cross-entropy on `{0, 1}` labels. The bias starts at the logit of
/// the positive rate.
pub fn train_classifier_prm(
    model: &mut RewardModel,
    data: &[PrefixExample],
    heldout: &[PrefixExample],
    cfg: &PrmTrainConfig,
) -> Result<PrmReport, PrmError> {
    if model.kind != RewardKind::BinaryClassifier {
        return Err(PrmError::Config("train_classifier_prm needs a classifier model".into()));
    }
    if data.is_empty() {
        return Err(PrmError::EmptyDataset);
    }
    if data.iter().any(|e| e.target != 0.0 && e.target != 1.0) {
        return Err(PrmError::Config("classifier labels must be 0 or 1".into()));
    }
    let pos = data.iter().filter(|e| e.target == 1.0).count();
    if pos == 0 || pos == data.len() {
        return Err(PrmError::SingleClass);
    }
    let rate = pos as f64 / data.len() as f64;
    model.bias.data_mut()[0] = (rate / (1.0 - rate)).ln();
    let step_losses = train_prefix_model(model, data, cfg)?;
    let heldout_metric = if heldout.is_empty() { f64::NAN } else { model.accuracy(heldout)? };
    Ok(PrmReport { step_losses, train_metric: model.accuracy(data)?, heldout_metric })
}

/// Bradley-Terry training on complete responses. Pairs whose chosen and
/// rejected responses coincide are skipped with a warning.
pub fn train_bt_reward(
    model: &mut RewardModel,
    pairs: &[ScoredPair],
    heldout: &[ScoredPair],
    cfg: &PrmTrainConfig,
) -> Result<PrmReport, PrmError> {
    if model.kind != RewardKind::BradleyTerry {
        return Err(PrmError::Config("train_bt_reward needs a Bradley-Terry model".into()));
    }
    check_cfg(cfg)?;
    let usable: Vec<&ScoredPair> = pairs
        .iter()
        .filter(|p| {
            let same = p.chosen == p.rejected;
            if same {
                log::warn!("skipping preference pair whose chosen and rejected responses are identical");
            }
            !same
        })
        .collect();
    if usable.is_empty() {
        return Err(PrmError::EmptyDataset);
    }
    let mut opt = Adam::new(cfg.lr);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = shuffled(usable.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let batch: Vec<&ScoredPair> = chunk.iter().map(|&i| usable[i]).collect();
            let loss = model.bt_loss_var(&mut g, &vars, &batch)?;
            step_losses.push(g.item(loss));
            model.apply(&mut opt, &g, &vars, loss, cfg.grad_clip)?;
        }
    }
    let owned: Vec<ScoredPair> = usable.into_iter().cloned().collect();
    let heldout_metric = if heldout.is_empty() { f64::NAN } else { model.ranking_accuracy(heldout)? };
    Ok(PrmReport { step_losses, train_metric: model.ranking_accuracy(&owned)?, heldout_metric })
}

/// Prepends the objective tag `#<id>` after BOS so one reward model can serve
/// several objectives.
pub fn tag_prompt(tokenizer: &TokenizerSpec, prompt: &[usize], objective: usize) -> Result<Vec<usize>, ModelError> {
    let tag = tokenizer.encode(&format!("#{objective}"))?;
    let mut out = Vec::with_capacity(prompt.len() + tag.len());
    let (head, rest) = match prompt.first() {
        Some(&b) if b == tokenizer.bos() => (vec![b], &prompt[1..]),
        _ => (Vec::new(), prompt),
    };
    out.extend(head);
    out.extend(tag);
    out.extend_from_slice(rest);
    Ok(out)
}

/// Pools per-objective prefix datasets into one tagged dataset.
pub fn unified_dataset(tokenizer: &TokenizerSpec, datasets: &[Vec<PrefixExample>]) -> Result<Vec<PrefixExample>, ModelError> {
    let mut out = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        for ex in d {
            out.push(PrefixExample { prompt: tag_prompt(tokenizer, &ex.prompt, i)?, prefix: ex.prefix.clone(), target: ex.target });
        }
    }
    Ok(out)
}

/// A reward model used as a step scorer, optionally under an objective tag.
pub struct RewardScorer<'a> {
    pub model: &'a RewardModel,
    pub objective_tag: Option<usize>,
}

impl StepScorer for RewardScorer<'_> {
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError> {
        let prompt = match self.objective_tag {
            Some(i) => tag_prompt(&self.model.tokenizer, prompt, i)?,
            None => prompt.to_vec(),
        };
        let tokens: Vec<usize> = prompt.iter().chain(prefix).chain(candidate).copied().collect();
        self.model.score(&tokens)
    }
}

impl StepScorer for RewardModel {
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError> {
        RewardScorer { model: self, objective_tag: None }.score_step(prompt, prefix, candidate)
    }
}
