use serde::{Deserialize, Serialize};

/// Exact token-forward accounting for one decode call.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    /// `|x|`.
    pub prompt_len: usize,
    /// `T`, committed response tokens.
    pub committed_tokens: usize,
    /// `N`, committed steps.
    pub steps: usize,
    /// Candidates proposed over all steps.
    pub candidates: usize,
    pub candidate_tokens_sampled: usize,
    /// Single-position backbone forwards, including prompt encoding and re-encodes.
    pub token_forwards: usize,
    /// Full re-encodes of prompt plus committed text.
    pub reencode_count: usize,
    pub reencoded_positions: usize,
    /// Candidate lengths per step.
    pub candidate_lengths: Vec<Vec<usize>>,
}

impl CostLedger {
    /// `L̄`, mean candidate length.
    pub fn mean_candidate_len(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.candidate_tokens_sampled as f64 / self.candidates as f64
        }
    }

    pub fn add(&mut self, other: &CostLedger) {
        self.prompt_len += other.prompt_len;
        self.committed_tokens += other.committed_tokens;
        self.steps += other.steps;
        self.candidates += other.candidates;
        self.candidate_tokens_sampled += other.candidate_tokens_sampled;
        self.token_forwards += other.token_forwards;
        self.reencode_count += other.reencode_count;
        self.reencoded_positions += other.reencoded_positions;
        self.candidate_lengths.extend(other.candidate_lengths.iter().cloned());
    }
}

/// Predicted token-forward counts for both decoding modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub cache_carry: f64,
    pub reencode: f64,
}

impl CostEstimate {
    pub fn ratio(&self) -> f64 {
        self.reencode / self.cache_carry
    }
}

/// Token forwards of the implemented model when every step has `mean_len` tokens:
/// cache-carry `|x| + K N L̄`; re-encode `sum_{t<N} K (|x| + t L̄ + L̄)`.
pub fn cost_estimate(prompt_len: usize, steps: usize, k: usize, mean_len: f64) -> CostEstimate {
    let x = prompt_len as f64;
    let n = steps as f64;
    let k = k as f64;
    let cache_carry = x + k * n * mean_len;
    let reencode = k * (n * x + mean_len * n * (n + 1.0) / 2.0);
    CostEstimate { cache_carry, reencode }
}
