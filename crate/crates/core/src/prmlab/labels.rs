use serde::{Deserialize, Serialize};

use super::rollout::RolloutPolicy;
use super::trajectory::{split_token_steps, StepTrajectory, TaskOracle};
use super::PrmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Value,
    Majority,
    Direct,
    OutcomeBt,
}

impl std::str::FromStr for LabelMode {
    type Err = PrmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "value" => Ok(LabelMode::Value),
            "majority" => Ok(LabelMode::Majority),
            "direct" => Ok(LabelMode::Direct),
            "outcome-bt" => Ok(LabelMode::OutcomeBt),
            other => Err(PrmError::Config(format!("unknown label mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Value => "value",
            LabelMode::Majority => "majority",
            LabelMode::Direct => "direct",
            LabelMode::OutcomeBt => "outcome-bt",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmLabelConfig {
    pub gamma: f64,
    pub rollouts: usize,
    pub max_steps: usize,
    pub mode: LabelMode,
}

impl Default for PrmLabelConfig {
    fn default() -> Self {
        Self { gamma: 0.9, rollouts: 5, max_steps: 20, mode: LabelMode::Value }
    }
}

impl PrmLabelConfig {
    pub fn validate(&self) -> Result<(), PrmError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PrmError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.rollouts == 0 {
            return Err(PrmError::Config("at least one rollout per step".into()));
        }
        if self.max_steps == 0 {
            return Err(PrmError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Hindsight value target of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTarget {
    /// 1-based step index.
    pub step: usize,
    pub target: f64,
    pub rollouts: usize,
    /// `r_t + gamma^(n - t) * z` per rollout.
    pub blended: Vec<f64>,
    pub truncated: Vec<bool>,
}

/// `r + gamma^steps_ahead * z`.
pub fn blended_reward(r: f64, gamma: f64, steps_ahead: usize, z: u8) -> f64 {
    r + gamma.powi(steps_ahead as i32) * f64::from(z)
}

/// RNG stream of rollout `m` launched after step `t` (0-based).
pub fn rollout_stream(t: usize, m: usize) -> u64 {
    ((t as u64) << 32) | m as u64
}

/// Terminal outcome and final step index of one rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutOutcome {
    pub z: u8,
    /// 1-based index of the final step; meaningful only when not truncated.
    pub n: usize,
    pub truncated: bool,
}

/// Resolves a rollout launched after `prefix_steps`. No terminal step within
/// `max_steps` total steps means truncated with `z = 0`.
pub fn rollout_outcome(
    oracle: &dyn TaskOracle,
    prompt: &[usize],
    prefix_steps: &[Vec<usize>],
    completion: &[usize],
    separator: usize,
    eos: usize,
    max_steps: usize,
) -> Result<RolloutOutcome, PrmError> {
    let mut steps = prefix_steps.to_vec();
    let already_done = steps.last().is_some_and(|s| oracle.is_terminal(s));
    if !already_done {
        for step in split_token_steps(completion, separator, eos) {
            if steps.len() >= max_steps {
                break;
            }
            let terminal = oracle.is_terminal(&step);
            steps.push(step);
            if terminal {
                break;
            }
        }
    }
    let n = steps.len();
    let finished = steps.last().is_some_and(|s| oracle.is_terminal(s)) && n <= max_steps;
    match finished.then(|| oracle.outcome(prompt, &steps)).transpose()?.flatten() {
        Some(z) => Ok(RolloutOutcome { z, n, truncated: false }),
        None => Ok(RolloutOutcome { z: 0, n, truncated: true }),
    }
}

/// Hindsight-relabeled value targets for every step of `traj`.
///
/// Step rewards come from the trajectory when present, otherwise from the
/// oracle. From each step `t`, `M` rollouts are sampled with streams
/// `rollout_stream(t, m)`; each contributes `r_t + gamma^(n_m - t) * z_m`
/// with its own final step index `n_m`. A step that already completes the
/// response needs no sampling: every rollout is the response itself.
#[allow(clippy::too_many_arguments)]
pub fn hindsight_targets(
    traj: &StepTrajectory,
    policy: &dyn RolloutPolicy,
    oracle: &dyn TaskOracle,
    cfg: &PrmLabelConfig,
    seed: u64,
    separator: usize,
    eos: usize,
) -> Result<Vec<ValueTarget>, PrmError> {
    cfg.validate()?;
    let rewards = match &traj.rewards {
        Some(r) => r.clone(),
        None => oracle.step_rewards(&traj.prompt, &traj.steps)?,
    };
    let mut out = Vec::with_capacity(traj.len());
    for t in 1..=traj.len() {
        let prefix_steps = &traj.steps[..t];
        let terminal = oracle.is_terminal(&prefix_steps[t - 1]);
        let completions = if terminal {
            vec![Vec::new(); cfg.rollouts]
        } else {
            let streams: Vec<u64> = (0..cfg.rollouts).map(|m| rollout_stream(t - 1, m)).collect();
            policy.complete_many(&traj.prompt, &traj.prefix(t), seed, &streams)?
        };
        let mut blended = Vec::with_capacity(cfg.rollouts);
        let mut truncated = Vec::with_capacity(cfg.rollouts);
        for c in &completions {
            let o = rollout_outcome(oracle, &traj.prompt, prefix_steps, c, separator, eos, cfg.max_steps)?;
            blended.push(blended_reward(rewards[t - 1], cfg.gamma, o.n - t, o.z));
            truncated.push(o.truncated);
        }
        let target = blended.iter().sum::<f64>() / cfg.rollouts as f64;
        out.push(ValueTarget { step: t, target, rollouts: cfg.rollouts, blended, truncated });
    }
    Ok(out)
}

/// Deterministic evaluator of (partial) responses.
pub trait Judge {
    fn judge(&self, prompt: &[usize], response: &[usize]) -> u8;
}

impl<F: Fn(&[usize], &[usize]) -> u8> Judge for F {
    fn judge(&self, prompt: &[usize], response: &[usize]) -> u8 {
        self(prompt, response)
    }
}

/// 1 iff strictly more than half of the votes are positive.
pub fn majority_indicator(votes: &[bool]) -> Result<u8, PrmError> {
    if votes.is_empty() {
        return Err(PrmError::Config("majority vote needs at least one rollout".into()));
    }
    let positive = votes.iter().filter(|v| **v).count();
    Ok(u8::from(2 * positive > votes.len()))
}

/// Labels a prefix by judging `M` completed rollouts from it.
pub fn majority_vote_label(
    prompt: &[usize],
    prefix: &[usize],
    policy: &dyn RolloutPolicy,
    judge: &dyn Judge,
    m: usize,
    seed: u64,
    step_index: usize,
) -> Result<u8, PrmError> {
    if m == 0 {
        return Err(PrmError::Config("majority vote needs at least one rollout".into()));
    }
    let streams: Vec<u64> = (0..m).map(|k| rollout_stream(step_index, k)).collect();
    let votes: Vec<bool> = policy
        .complete_many(prompt, prefix, seed, &streams)?
        .into_iter()
        .map(|c| {
            let full: Vec<usize> = prefix.iter().chain(&c).copied().collect();
            judge.judge(prompt, &full) == 1
        })
        .collect();
    majority_indicator(&votes)
}

/// Labels a prefix by judging it directly.
pub fn direct_judge_label(prompt: &[usize], prefix: &[usize], judge: &dyn Judge) -> u8 {
    judge.judge(prompt, prefix)
}

/// One labeled prefix of a labeled-dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub prompt: String,
    pub prefix_steps: Vec<String>,
    pub label_kind: LabelMode,
    pub label: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blended_examples() {
        assert_eq!(blended_reward(1.0, 0.9, 0, 1), 2.0);
        let v = (blended_reward(0.5, 0.9, 2, 1) + blended_reward(0.5, 0.9, 5, 0)) / 2.0;
        assert!((v - 0.905).abs() < 1e-15);
    }

    #[test]
    fn majority_ties_fail() {
        assert_eq!(majority_indicator(&[true; 8]).unwrap(), 1);
        let four = [true, true, true, true, false, false, false, false];
        assert_eq!(majority_indicator(&four).unwrap(), 0);
        assert!(majority_indicator(&[]).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(PrmLabelConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(PrmLabelConfig { rollouts: 0, ..Default::default() }.validate().is_err());
        assert_eq!("outcome-bt".parse::<LabelMode>().unwrap(), LabelMode::OutcomeBt);
        assert_eq!(LabelMode::Majority.to_string(), "majority");
    }
}
