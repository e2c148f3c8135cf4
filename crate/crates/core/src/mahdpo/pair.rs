use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::policy::{HeadSource, PolicyModel};

/// Text-level preference pair routed to head `objective`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub objective: usize,
}

/// Anything that carries an objective id.
pub trait Routed {
    fn objective(&self) -> usize;
}

impl Routed for PreferencePair {
    fn objective(&self) -> usize {
        self.objective
    }
}

/// Tokenized pair with its frozen reference log-probabilities.
///
/// Response token sequences are the response text followed by EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub objective: usize,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl Routed for EncodedPair {
    fn objective(&self) -> usize {
        self.objective
    }
}

impl PreferencePair {
    pub fn validate(&self, heads: usize) -> Result<(), TrainError> {
        if self.chosen == self.rejected {
            return Err(TrainError::Data(format!("chosen equals rejected for prompt {:?}", self.prompt)));
        }
        if self.objective >= heads {
            return Err(TrainError::Objective { id: self.objective, heads });
        }
        Ok(())
    }

    pub fn encode(&self, model: &PolicyModel) -> Result<EncodedPair, TrainError> {
        self.validate(model.num_heads())?;
        let tok = model.tokenizer();
        let prompt = tok.encode_prompt(&self.prompt)?;
        let mut chosen = tok.encode(&self.chosen)?;
        chosen.push(tok.eos());
        let mut rejected = tok.encode(&self.rejected)?;
        rejected.push(tok.eos());
        let ref_chosen = model.sequence_logprob(&HeadSource::Reference, &prompt, &chosen)?;
        let ref_rejected = model.sequence_logprob(&HeadSource::Reference, &prompt, &rejected)?;
        Ok(EncodedPair { prompt, chosen, rejected, objective: self.objective, ref_chosen, ref_rejected })
    }
}

/// Encodes every pair against the model's current reference.
pub fn encode_pairs(model: &PolicyModel, pairs: &[PreferencePair]) -> Result<Vec<EncodedPair>, TrainError> {
    pairs.iter().map(|p| p.encode(model)).collect()
}
