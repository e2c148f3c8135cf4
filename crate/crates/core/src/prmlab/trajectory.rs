use serde::{Deserialize, Serialize};

use super::PrmError;
use crate::policy::TokenizerSpec;
use crate::synthtasks::{parse_prompt, step_reward, verify, ArithmeticProblem};

/// A prompt and its response split into steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrajectory {
    pub prompt: Vec<usize>,
    pub steps: Vec<Vec<usize>>,
    /// Terminal outcome for verifiable tasks.
    pub z: Option<u8>,
    /// Per-step rewards in `[0, 1]`.
    pub rewards: Option<Vec<f64>>,
}

impl StepTrajectory {
    pub fn new(prompt: Vec<usize>, steps: Vec<Vec<usize>>) -> Result<Self, PrmError> {
        if steps.is_empty() || steps.iter().any(Vec::is_empty) {
            return Err(PrmError::Trajectory("a trajectory needs at least one non-empty step".into()));
        }
        Ok(Self { prompt, steps, z: None, rewards: None })
    }

    pub fn with_labels(mut self, z: Option<u8>, rewards: Option<Vec<f64>>) -> Result<Self, PrmError> {
        if let Some(r) = &rewards {
            if r.len() != self.steps.len() || r.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(PrmError::Trajectory(format!("{} step rewards in [0,1] expected, got {r:?}", self.steps.len())));
            }
        }
        if z.is_some_and(|z| z > 1) {
            return Err(PrmError::Trajectory("terminal outcome must be 0 or 1".into()));
        }
        self.z = z;
        self.rewards = rewards;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn response(&self) -> Vec<usize> {
        self.steps.concat()
    }

    /// Tokens of steps `0..t`.
    pub fn prefix(&self, t: usize) -> Vec<usize> {
        self.steps[..t].concat()
    }
}

/// Splits a response into steps that end at the separator or at EOS.
pub fn split_token_steps(response: &[usize], separator: usize, eos: usize) -> Vec<Vec<usize>> {
    let mut steps = Vec::new();
    let mut cur = Vec::new();
    for &t in response {
        cur.push(t);
        if t == separator || t == eos {
            steps.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        steps.push(cur);
    }
    steps
}

/// Verifiable task: exact per-step rewards and terminal outcomes.
pub trait TaskOracle {
    /// Whether `step` completes a response.
    fn is_terminal(&self, step: &[usize]) -> bool;
    /// Outcome of a response; `None` when it never reaches a terminal answer.
    fn outcome(&self, prompt: &[usize], steps: &[Vec<usize>]) -> Result<Option<u8>, PrmError>;
    /// Reward of every step in `[0, 1]`.
    fn step_rewards(&self, prompt: &[usize], steps: &[Vec<usize>]) -> Result<Vec<f64>, PrmError>;
}

/// Oracle for the arithmetic-chain task. Equation steps earn their chained
/// reward; the answer step earns the terminal outcome.
#[derive(Clone, Debug)]
pub struct ArithmeticOracle {
    tokenizer: TokenizerSpec,
}

impl ArithmeticOracle {
    pub fn new(tokenizer: TokenizerSpec) -> Self {
        Self { tokenizer }
    }

    fn problem(&self, prompt: &[usize]) -> Result<ArithmeticProblem, PrmError> {
        Ok(parse_prompt(&self.tokenizer.decode(prompt))?)
    }

    fn is_answer(&self, step: &[usize]) -> bool {
        self.tokenizer.decode(step).starts_with("ANS")
    }
}

impl TaskOracle for ArithmeticOracle {
    fn is_terminal(&self, step: &[usize]) -> bool {
        step.last() == Some(&self.tokenizer.eos()) || self.is_answer(step)
    }

    fn outcome(&self, prompt: &[usize], steps: &[Vec<usize>]) -> Result<Option<u8>, PrmError> {
        let problem = self.problem(prompt)?;
        let v = verify(&problem, &self.tokenizer.decode(&steps.concat()));
        Ok((!v.truncated).then_some(v.z))
    }

    fn step_rewards(&self, prompt: &[usize], steps: &[Vec<usize>]) -> Result<Vec<f64>, PrmError> {
        let problem = self.problem(prompt)?;
        let mut out = Vec::with_capacity(steps.len());
        let mut eq_index = 0;
        for (t, step) in steps.iter().enumerate() {
            if self.is_answer(step) {
                let z = verify(&problem, &self.tokenizer.decode(&steps[..=t].concat())).z;
                out.push(f64::from(z));
            } else {
                let text = self.tokenizer.decode(step);
                out.push(step_reward(&problem, eq_index, text.trim_end_matches('\n')));
                eq_index += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtasks::gen_problems;

    #[test]
    fn splitting_keeps_every_token() {
        let steps = split_token_steps(&[5, 6, 0, 7, 0, 8, 1], 0, 1);
        assert_eq!(steps, vec![vec![5, 6, 0], vec![7, 0], vec![8, 1]]);
        assert_eq!(split_token_steps(&[5, 6], 0, 1), vec![vec![5, 6]]);
    }

    #[test]
    fn oracle_labels_ground_truth() {
        let tok = TokenizerSpec::default();
        let o = ArithmeticOracle::new(tok.clone());
        let p = &gen_problems(1, 1)[0];
        let prompt = tok.encode_prompt(&p.prompt()).unwrap();
        let mut resp = tok.encode(&p.solution(None)).unwrap();
        resp.push(tok.eos());
        let steps = split_token_steps(&resp, tok.separator(), tok.eos());
        assert_eq!(steps.len(), p.num_steps() + 1);
        assert_eq!(o.outcome(&prompt, &steps).unwrap(), Some(1));
        assert_eq!(o.step_rewards(&prompt, &steps).unwrap(), vec![1.0; steps.len()]);
        assert!(o.is_terminal(steps.last().unwrap()));
        assert!(!o.is_terminal(&steps[0]));
        assert_eq!(o.outcome(&prompt, &steps[..1]).unwrap(), None);
    }

    #[test]
    fn trajectory_invariants() {
        assert!(StepTrajectory::new(vec![0], vec![]).is_err());
        let t = StepTrajectory::new(vec![0], vec![vec![3, 4], vec![5]]).unwrap();
        assert_eq!(t.response(), vec![3, 4, 5]);
        assert!(t.clone().with_labels(Some(1), Some(vec![1.0])).is_err());
        assert!(t.clone().with_labels(Some(1), Some(vec![1.0, 1.5])).is_err());
        assert!(t.with_labels(Some(0), Some(vec![0.0, 0.5])).is_ok());
    }
}
