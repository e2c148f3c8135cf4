//! Step-level reward-guided decoding with a carried key-value cache, the
//! re-encode-per-step baseline, and exact token-forward accounting.

mod boundary;
mod guided;
mod ledger;
mod sampling;

pub use boundary::BoundaryCriteria;
pub use guided::{
    continue_plain, decode, guided_decode, propose_candidates, reencode_decode, sample_plain, Candidate, DecodeConfig,
    DecodeMode, DecodeOutput, StepRecord,
};
pub use ledger::{cost_estimate, CostEstimate, CostLedger};
pub use sampling::{sample_token, uniform_at, SamplingConfig};

use thiserror::Error;

use crate::policy::ModelError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("decode config: {0}")]
    Config(String),
    #[error("no token has positive probability after filtering")]
    EmptySupport,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scores a candidate step given the prompt and the committed prefix.
/// Higher is better.
pub trait StepScorer {
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError>;
}

/// Weighted sum of several scorers.
pub struct WeightedScorer<'a> {
    parts: Vec<(f64, &'a dyn StepScorer)>,
}

impl<'a> WeightedScorer<'a> {
    pub fn new(parts: Vec<(f64, &'a dyn StepScorer)>) -> Self {
        Self { parts }
    }
}

impl StepScorer for WeightedScorer<'_> {
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (w, s) in &self.parts {
            if *w != 0.0 {
                total += w * s.score_step(prompt, prefix, candidate)?;
            }
        }
        Ok(total)
    }
}

impl<F> StepScorer for F
where
    F: Fn(&[usize], &[usize], &[usize]) -> f64,
{
    fn score_step(&self, prompt: &[usize], prefix: &[usize], candidate: &[usize]) -> Result<f64, ModelError> {
        Ok(self(prompt, prefix, candidate))
    }
}
