use super::batch::MiniBatch;
use super::pair::EncodedPair;
use super::TrainError;
use crate::numcore::{log_sigmoid, Graph, Var};
use crate::policy::{HeadSource, PolicyModel, PolicyVars};

/// Which policy distribution a loss is evaluated under.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyHead {
    Head(usize),
    Ensemble(Vec<f64>),
}

impl PolicyHead {
    pub fn source(&self) -> HeadSource {
        match self {
            PolicyHead::Head(i) => HeadSource::Head(*i),
            PolicyHead::Ensemble(w) => HeadSource::Ensemble(w.clone()),
        }
    }
}

/// Per-pair loss and implicit margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub delta: f64,
}

/// `delta = beta * ((log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l)))`,
/// `loss = -log sigmoid(delta)`.
pub fn dpo_pair_loss(model: &PolicyModel, head: &PolicyHead, pair: &EncodedPair, beta: f64) -> Result<PairLoss, TrainError> {
    let src = head.source();
    let lw = model.sequence_logprob(&src, &pair.prompt, &pair.chosen)?;
    let ll = model.sequence_logprob(&src, &pair.prompt, &pair.rejected)?;
    let delta = beta * ((lw - pair.ref_chosen) - (ll - pair.ref_rejected));
    let loss = -log_sigmoid(delta);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite(format!("DPO loss for prompt tokens {:?}", pair.prompt)));
    }
    Ok(PairLoss { loss, delta })
}

fn logprob_var(
    g: &mut Graph,
    model: &PolicyModel,
    vars: &PolicyVars,
    head: &PolicyHead,
    prompt: &[usize],
    response: &[usize],
) -> Result<Var, TrainError> {
    Ok(match head {
        PolicyHead::Head(i) => model.head_logprob_var(g, vars, *i, prompt, response)?,
        PolicyHead::Ensemble(w) => model.ensemble_logprob_var(g, vars, w, prompt, response)?,
    })
}

/// Graph version of [`dpo_pair_loss`]; returns `(loss, delta)` nodes.
pub fn dpo_pair_loss_var(
    g: &mut Graph,
    model: &PolicyModel,
    vars: &PolicyVars,
    head: &PolicyHead,
    pair: &EncodedPair,
    beta: f64,
) -> Result<(Var, Var), TrainError> {
    let lw = logprob_var(g, model, vars, head, &pair.prompt, &pair.chosen)?;
    let ll = logprob_var(g, model, vars, head, &pair.prompt, &pair.rejected)?;
    let diff = g.sub(lw, ll)?;
    let ref_diff = g.scalar(pair.ref_chosen - pair.ref_rejected);
    let margin = g.sub(diff, ref_diff)?;
    let delta = g.scale(margin, beta);
    let ls = g.log_sigmoid(delta);
    Ok((g.neg(ls), delta))
}

/// Graph nodes of one combined-loss evaluation.
pub struct CombinedTerms {
    pub loss: Var,
    /// `(loss, delta)` per pair, grouped like the batch.
    pub pairs: Vec<Vec<(Var, Var)>>,
}

/// `L = sum_i alpha_i * mean_{pair in B_i} loss(head i, pair)`; empty groups
/// contribute nothing and heads without pairs never enter the graph.
pub fn combined_loss_var(
    g: &mut Graph,
    model: &PolicyModel,
    vars: &PolicyVars,
    batch: &MiniBatch<EncodedPair>,
    alpha: &[f64],
    beta: f64,
) -> Result<CombinedTerms, TrainError> {
    if batch.groups.len() != model.num_heads() || alpha.len() != model.num_heads() {
        return Err(TrainError::Config(format!(
            "{} groups and {} weights for {} heads",
            batch.groups.len(),
            alpha.len(),
            model.num_heads()
        )));
    }
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    let mut pairs = Vec::with_capacity(batch.groups.len());
    for (i, group) in batch.groups.iter().enumerate() {
        let mut terms = Vec::with_capacity(group.len());
        let mut group_sum: Option<Var> = None;
        for pair in group {
            let (loss, delta) = dpo_pair_loss_var(g, model, vars, &PolicyHead::Head(i), pair, beta)?;
            group_sum = Some(match group_sum {
                Some(s) => g.add(s, loss)?,
                None => loss,
            });
            terms.push((loss, delta));
        }
        if let Some(s) = group_sum {
            let weighted = g.scale(s, alpha[i] / group.len() as f64);
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        pairs.push(terms);
    }
    Ok(CombinedTerms { loss: total.expect("non-empty batch"), pairs })
}

/// Value of the combined loss without building gradients.
pub fn combined_loss(model: &PolicyModel, batch: &MiniBatch<EncodedPair>, alpha: &[f64], beta: f64) -> Result<f64, TrainError> {
    if batch.groups.len() != model.num_heads() || alpha.len() != model.num_heads() {
        return Err(TrainError::Config("batch groups and weights must match the head count".into()));
    }
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, group) in batch.groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for pair in group {
            s += dpo_pair_loss(model, &PolicyHead::Head(i), pair, beta)?.loss;
        }
        total += s * (alpha[i] / group.len() as f64);
    }
    Ok(total)
}
