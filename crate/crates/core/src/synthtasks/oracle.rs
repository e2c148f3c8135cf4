use super::verify::{parse_prompt, split_steps, step_reward, verify};
use crate::decode::StepScorer;
use crate::policy::{ModelError, TokenizerSpec};

/// Step scorer backed by the exact verifier. An equation candidate scores its
/// chained step reward; a candidate that completes the response scores the
/// terminal outcome.
#[derive(Clone, Debug)]
pub struct OracleScorer {
    tokenizer: TokenizerSpec,
}

impl OracleScorer {
    pub fn new(tokenizer: TokenizerSpec) -> Self {
        Self { tokenizer }
    }
}

impl StepScorer for OracleScorer {
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError> {
        let problem = parse_prompt(&self.tokenizer.decode(prompt)).map_err(|e| ModelError::Unsupported(e.to_string()))?;
        let prefix_text = self.tokenizer.decode(prefix);
        let cand_text = self.tokenizer.decode(candidate);
        let t = split_steps(&prefix_text).len();
        let line = cand_text.trim_end_matches('\n');
        if line.starts_with("ANS") || candidate.contains(&self.tokenizer.eos()) {
            return Ok(f64::from(verify(&problem, &format!("{prefix_text}{cand_text}")).z));
        }
        Ok(step_reward(&problem, t, line))
    }
}
