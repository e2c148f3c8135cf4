use serde::{Deserialize, Serialize};

use super::sampling::{sample_token, uniform_at};
use super::{BoundaryCriteria, CostLedger, DecodeError, SamplingConfig, StepScorer};
use crate::policy::{HeadSource, KvCache, PolicyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Carry the running key-value cache across steps.
    CacheCarry,
    /// Re-encode prompt and committed text before every candidate.
    ReEncode,
}

impl std::str::FromStr for DecodeMode {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache-carry" => Ok(DecodeMode::CacheCarry),
            "re-encode" => Ok(DecodeMode::ReEncode),
            other => Err(DecodeError::Config(format!("unknown mode {other:?} (cache-carry | re-encode)"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::CacheCarry => "cache-carry",
            DecodeMode::ReEncode => "re-encode",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Candidates per step.
    pub k: usize,
    /// Total response token budget.
    pub t_max: usize,
    /// Hard cap on tokens per candidate.
    pub chunk_cap: usize,
    pub boundary: BoundaryCriteria,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub mode: DecodeMode,
    pub source: HeadSource,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.k == 0 {
            return Err(DecodeError::Config("K must be at least 1".into()));
        }
        if self.chunk_cap == 0 || self.chunk_cap > self.t_max {
            return Err(DecodeError::Config(format!("need T_max ({}) >= chunk cap ({}) >= 1", self.t_max, self.chunk_cap)));
        }
        if matches!(self.source, HeadSource::Reference) {
            return Err(DecodeError::Config("decoding samples from policy heads, not the reference".into()));
        }
        self.sampling.validate()
    }
}

/// One sampled step with the cache positioned after its last token.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub cache: KvCache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub candidates: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

impl StepRecord {
    pub fn committed(&self) -> &[usize] {
        &self.candidates[self.selected]
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub response: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub ledger: CostLedger,
}

/// Samples one candidate forward from `cache`. `position` is the response
/// offset of the first sampled token; stream `stream` addresses the RNG.
#[allow(clippy::too_many_arguments)]
fn sample_candidate(
    model: &PolicyModel,
    mut cache: KvCache,
    stream: u64,
    position: usize,
    cap: usize,
    cfg: &DecodeConfig,
    ledger: &mut CostLedger,
) -> Result<Candidate, DecodeError> {
    let eos = model.tokenizer().eos();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let probs = model.next_token_distribution(cache.last_hidden(), &cfg.source)?;
        let u = uniform_at(cfg.seed, stream, position + tokens.len());
        let tok = sample_token(&probs, &cfg.sampling, eos, u)?;
        logprobs.push(probs[tok].ln());
        tokens.push(tok);
        model.step_forward(&mut cache, tok)?;
        ledger.token_forwards += 1;
        ledger.candidate_tokens_sampled += 1;
        if tok == eos || cfg.boundary.triggered(&tokens) || tokens.len() >= cap {
            break;
        }
    }
    Ok(Candidate { tokens, logprobs, cache })
}

/// Samples `K` candidates, each from its own clone of `cache`.
pub fn propose_candidates(
    model: &PolicyModel,
    cache: &KvCache,
    position: usize,
    cap: usize,
    cfg: &DecodeConfig,
    ledger: &mut CostLedger,
) -> Result<Vec<Candidate>, DecodeError> {
    if cap == 0 {
        return Err(DecodeError::Config("no token budget left for candidates".into()));
    }
    (0..cfg.k).map(|k| sample_candidate(model, cache.clone(), k as u64, position, cap, cfg, ledger)).collect()
}

fn check_prompt(model: &PolicyModel, prompt: &[usize]) -> Result<(), DecodeError> {
    if prompt.is_empty() {
        return Err(DecodeError::Config("empty prompt".into()));
    }
    let limit = model.dims().max_positions;
    if prompt.len() >= limit {
        return Err(crate::policy::ModelError::PromptTooLong { len: prompt.len(), limit: limit - 1 }.into());
    }
    Ok(())
}

fn select(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

fn decode_loop(
    model: &PolicyModel,
    scorer: Option<&dyn StepScorer>,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    check_prompt(model, prompt)?;
    let eos = model.tokenizer().eos();
    let max_pos = model.dims().max_positions;
    let mut ledger = CostLedger { prompt_len: prompt.len(), ..Default::default() };
    let mut running = match cfg.mode {
        DecodeMode::CacheCarry => {
            let (cache, _) = model.encode_prompt(prompt)?;
            ledger.token_forwards += prompt.len();
            Some(cache)
        }
        DecodeMode::ReEncode => None,
    };
    let mut response: Vec<usize> = Vec::new();
    let mut steps = Vec::new();
    while response.len() < cfg.t_max && !response.contains(&eos) {
        let room = max_pos - prompt.len() - response.len();
        let cap = cfg.chunk_cap.min(cfg.t_max - response.len()).min(room);
        if cap == 0 {
            break;
        }
        let candidates = match &running {
            Some(cache) => propose_candidates(model, cache, response.len(), cap, cfg, &mut ledger)?,
            None => {
                let context: Vec<usize> = prompt.iter().chain(&response).copied().collect();
                let mut out = Vec::with_capacity(cfg.k);
                for k in 0..cfg.k {
                    let cache = model.backbone.encode(&context)?;
                    ledger.reencode_count += 1;
                    ledger.reencoded_positions += context.len();
                    ledger.token_forwards += context.len();
                    out.push(sample_candidate(model, cache, k as u64, response.len(), cap, cfg, &mut ledger)?);
                }
                out
            }
        };
        ledger.candidates += candidates.len();
        ledger.candidate_lengths.push(candidates.iter().map(|c| c.tokens.len()).collect());
        let scores = match scorer {
            Some(s) => candidates.iter().map(|c| s.score_step(prompt, &response, &c.tokens)).collect::<Result<Vec<_>, _>>()?,
            None => vec![0.0; candidates.len()],
        };
        let best = select(&scores);
        let mut tokens_per_candidate = Vec::with_capacity(candidates.len());
        let mut chosen_cache = None;
        for (k, c) in candidates.into_iter().enumerate() {
            if k == best {
                chosen_cache = Some(c.cache);
            }
            tokens_per_candidate.push(c.tokens);
        }
        response.extend_from_slice(&tokens_per_candidate[best]);
        if running.is_some() {
            running = chosen_cache;
        }
        steps.push(StepRecord { candidates: tokens_per_candidate, scores, selected: best });
    }
    ledger.committed_tokens = response.len();
    ledger.steps = steps.len();
    Ok(DecodeOutput { response, steps, ledger })
}

/// Step-level guided decoding that carries the key-value cache across steps.
///
/// Per step: `K` candidates sampled from clones of the running cache, each
/// scored (all zero without a scorer), the first maximum committed along with
/// its end-state cache.
pub fn guided_decode(
    model: &PolicyModel,
    scorer: Option<&dyn StepScorer>,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let cfg = DecodeConfig { mode: DecodeMode::CacheCarry, ..cfg.clone() };
    decode_loop(model, scorer, prompt, &cfg)
}

/// Same control flow as [`guided_decode`], but each candidate starts from a
/// fresh encode of prompt plus committed tokens.
pub fn reencode_decode(
    model: &PolicyModel,
    scorer: Option<&dyn StepScorer>,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let cfg = DecodeConfig { mode: DecodeMode::ReEncode, ..cfg.clone() };
    decode_loop(model, scorer, prompt, &cfg)
}

/// Dispatches on `cfg.mode`.
pub fn decode(
    model: &PolicyModel,
    scorer: Option<&dyn StepScorer>,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    decode_loop(model, scorer, prompt, cfg)
}

/// Plain incremental sampling with RNG stream 0, stopping at EOS, `max_tokens`,
/// or the position limit.
pub fn sample_plain(
    model: &PolicyModel,
    source: &HeadSource,
    prompt: &[usize],
    sampling: &SamplingConfig,
    seed: u64,
    max_tokens: usize,
) -> Result<Vec<usize>, DecodeError> {
    check_prompt(model, prompt)?;
    let (cache, _) = model.encode_prompt(prompt)?;
    continue_plain(model, source, cache, &[], sampling, seed, 0, max_tokens)
}

/// Continues sampling from `cache`, which already holds the prompt followed by
/// `prefix`. Draws are addressed by `(seed, stream, response position)`.
#[allow(clippy::too_many_arguments)]
pub fn continue_plain(
    model: &PolicyModel,
    source: &HeadSource,
    mut cache: KvCache,
    prefix: &[usize],
    sampling: &SamplingConfig,
    seed: u64,
    stream: u64,
    max_tokens: usize,
) -> Result<Vec<usize>, DecodeError> {
    let eos = model.tokenizer().eos();
    let max_pos = model.dims().max_positions;
    let mut out = Vec::new();
    while out.len() < max_tokens && cache.position_count() < max_pos {
        let probs = model.next_token_distribution(cache.last_hidden(), source)?;
        let tok = sample_token(&probs, sampling, eos, uniform_at(seed, stream, prefix.len() + out.len()))?;
        out.push(tok);
        if tok == eos {
            break;
        }
        model.step_forward(&mut cache, tok)?;
    }
    Ok(out)
}
