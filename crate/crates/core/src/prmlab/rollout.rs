use super::PrmError;
use crate::decode::{continue_plain, SamplingConfig};
use crate::policy::{HeadSource, PolicyModel};

/// Samples continuations of a partial response.
pub trait RolloutPolicy {
    /// Continues `prompt ++ prefix` until EOS or the policy's token cap.
    /// Randomness is addressed by `(seed, stream)`.
    fn complete(&self, prompt: &[usize], prefix: &[usize], seed: u64, stream: u64) -> Result<Vec<usize>, PrmError>;

    /// One continuation per stream from the same prefix.
    fn complete_many(&self, prompt: &[usize], prefix: &[usize], seed: u64, streams: &[u64]) -> Result<Vec<Vec<usize>>, PrmError> {
        streams.iter().map(|&s| self.complete(prompt, prefix, seed, s)).collect()
    }
}

/// Rollouts sampled from a policy model with a carried cache.
pub struct PolicyRollout<'a> {
    pub model: &'a PolicyModel,
    pub source: HeadSource,
    pub sampling: SamplingConfig,
    pub max_tokens: usize,
}

impl<'a> PolicyRollout<'a> {
    pub fn new(model: &'a PolicyModel, source: HeadSource, sampling: SamplingConfig, max_tokens: usize) -> Self {
        Self { model, source, sampling, max_tokens }
    }

    fn context(&self, prompt: &[usize], prefix: &[usize]) -> Result<crate::policy::KvCache, PrmError> {
        let ctx: Vec<usize> = prompt.iter().chain(prefix).copied().collect();
        if ctx.len() >= self.model.dims().max_positions {
            return Err(PrmError::Model(crate::policy::ModelError::SequenceTooLong {
                len: ctx.len(),
                limit: self.model.dims().max_positions - 1,
            }));
        }
        Ok(self.model.backbone.encode(&ctx)?)
    }
}

impl RolloutPolicy for PolicyRollout<'_> {
    fn complete(&self, prompt: &[usize], prefix: &[usize], seed: u64, stream: u64) -> Result<Vec<usize>, PrmError> {
        Ok(self.complete_many(prompt, prefix, seed, &[stream])?.remove(0))
    }

    fn complete_many(&self, prompt: &[usize], prefix: &[usize], seed: u64, streams: &[u64]) -> Result<Vec<Vec<usize>>, PrmError> {
        let cache = self.context(prompt, prefix)?;
        streams
            .iter()
            .map(|&s| {
                Ok(continue_plain(self.model, &self.source, cache.clone(), prefix, &self.sampling, seed, s, self.max_tokens)?)
            })
            .collect()
    }
}
