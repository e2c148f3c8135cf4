//! Finite-difference verification of every training loss and the
//! head-isolation table.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::mahdpo::{
    combined_gradients, combined_loss_var, dpo_pair_loss_var, route_batch, EncodedPair, PolicyHead, PreferencePair,
};
use crate::numcore::{grad_check, GradCheckReport, Graph, NumError, Tensor, Var};
use crate::policy::{ModelDims, PolicyModel, PolicyVars, TokenizerSpec};
use crate::prmlab::{PrefixExample, RewardKind, RewardModel, ScoredPair};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub objective_heads: usize,
    pub step: f64,
    pub tolerance: f64,
    pub beta: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, hidden_dim: 16, layers: 2, attn_heads: 2, objective_heads: 2, step: 1e-6, tolerance: 1e-4, beta: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct IsolationCell {
    pub head: usize,
    /// Objectives present in the batch.
    pub batch: Vec<usize>,
    /// Largest absolute entry of the head's gradient.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<(&'static str, GradCheckReport)>,
    pub isolation: Vec<IsolationCell>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, r)| r.passed()) && self.isolation.iter().all(|c| c.max_abs_grad == 0.0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>14} {:>12} {:>10}", "loss", "max rel err", "coords", "status");
        for (name, r) in &self.checks {
            let status = if r.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{name:<12} {:>14.3e} {:>12} {status:>10}", r.max_rel_error, r.coordinates);
        }
        let _ = writeln!(s, "\nhead isolation (max |grad W_j| on batches without objective j)");
        let _ = writeln!(s, "{:<6} {:<16} {:>12}", "head", "batch", "max |grad|");
        for c in &self.isolation {
            let batch = c.batch.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(s, "{:<6} {:<16} {:>12e}", c.head, format!("{{{batch}}}"), c.max_abs_grad);
        }
        s
    }
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const CHARS: &[u8] = b"0123456789+-=!\n";
    (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect()
}

fn num_err(e: impl std::fmt::Display) -> NumError {
    NumError::InvalidArgument(e.to_string())
}

fn split_vars(model: &PolicyModel, vars: &[Var]) -> PolicyVars {
    let nb = model.backbone.params().len();
    PolicyVars { backbone: vars[..nb].to_vec(), heads: vars[nb..].to_vec() }
}

/// Runs the four loss checks and the isolation table on a random tiny model.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, HarnessError> {
    let tok = TokenizerSpec::default();
    let heads = cfg.objective_heads;
    let dims = ModelDims {
        vocab_size: tok.vocab_size(),
        hidden_dim: cfg.hidden_dim,
        layers: cfg.layers,
        attn_heads: cfg.attn_heads,
        max_positions: 32,
        objective_heads: heads,
    };
    let model = PolicyModel::new(dims.clone(), tok.clone(), cfg.seed)?.init_heads(0.3, cfg.seed ^ 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs: Vec<PreferencePair> = (0..2 * heads)
        .map(|i| {
            let chosen = random_text(&mut rng, 3 + i % 3);
            let mut rejected = random_text(&mut rng, 4);
            if rejected == chosen {
                rejected.push('0');
            }
            PreferencePair { prompt: format!("{}+{}=?\n", i % 10, (i + 3) % 10), chosen, rejected, objective: i % heads }
        })
        .collect();
    let encoded: Vec<EncodedPair> = pairs.iter().map(|p| p.encode(&model)).collect::<Result<_, _>>()?;
    let params: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    let mut checks = Vec::new();

    let pair = &encoded[0];
    let r = grad_check(
        &params,
        |g: &mut Graph, vars: &[Var]| {
            let pv = split_vars(&model, vars);
            Ok(dpo_pair_loss_var(g, &model, &pv, &PolicyHead::Head(0), pair, cfg.beta).map_err(num_err)?.0)
        },
        cfg.step,
        cfg.tolerance,
    )?;
    checks.push(("dpo", r));

    let batch = route_batch(&encoded, heads)?;
    let alpha: Vec<f64> = (1..=heads).map(|i| i as f64).map(|x| x / (heads * (heads + 1) / 2) as f64).collect();
    let r = grad_check(
        &params,
        |g: &mut Graph, vars: &[Var]| {
            let pv = split_vars(&model, vars);
            Ok(combined_loss_var(g, &model, &pv, &batch, &alpha, cfg.beta).map_err(num_err)?.loss)
        },
        cfg.step,
        cfg.tolerance,
    )?;
    checks.push(("mahdpo", r));

    let prm = RewardModel::new(RewardKind::ValueRegression, &dims, tok.clone(), cfg.seed ^ 2)?;
    let prefixes: Vec<PrefixExample> = (0..3)
        .map(|i| {
            let prompt = tok.encode_prompt(&format!("{i}+1=?\n"))?;
            let prefix = tok.encode(&random_text(&mut rng, 4 + i))?;
            Ok(PrefixExample { prompt, prefix, target: rng.gen_range(0.0..2.0) })
        })
        .collect::<Result<_, HarnessError>>()?;
    let r = grad_check(
        &prm.params(),
        |g: &mut Graph, vars: &[Var]| prm.prefix_loss_var(g, vars, &prefixes).map_err(num_err),
        cfg.step,
        cfg.tolerance,
    )?;
    checks.push(("prm-mse", r));

    let bt = RewardModel::new(RewardKind::BradleyTerry, &dims, tok.clone(), cfg.seed ^ 3)?;
    let scored: Vec<ScoredPair> = encoded
        .iter()
        .take(3)
        .map(|p| ScoredPair { prompt: p.prompt.clone(), chosen: p.chosen.clone(), rejected: p.rejected.clone() })
        .collect();
    let refs: Vec<&ScoredPair> = scored.iter().collect();
    let r = grad_check(
        &bt.params(),
        |g: &mut Graph, vars: &[Var]| bt.bt_loss_var(g, vars, &refs).map_err(num_err),
        cfg.step,
        cfg.tolerance,
    )?;
    checks.push(("bt", r));

    let mut isolation = Vec::new();
    for mask in 1u32..(1 << heads) {
        let present: Vec<usize> = (0..heads).filter(|o| mask & (1 << o) != 0).collect();
        if present.len() == heads {
            continue;
        }
        let sub: Vec<EncodedPair> = encoded.iter().filter(|p| present.contains(&p.objective)).cloned().collect();
        let grads = combined_gradients(&model, &route_batch(&sub, heads)?, &alpha, cfg.beta)?;
        for j in (0..heads).filter(|j| !present.contains(j)) {
            let max_abs_grad = grads.heads[j].data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            isolation.push(IsolationCell { head: j, batch: present.clone(), max_abs_grad });
        }
    }
    Ok(GradcheckReport { checks, isolation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_gradcheck_passes() {
        let cfg = GradcheckConfig { hidden_dim: 8, layers: 1, ..Default::default() };
        let report = gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.isolation.len(), 2);
    }
}
