//! Multi-head causal language model with incremental (cache-carrying) inference.

mod backbone;
pub mod checkpoint;
mod kvcache;
mod model;
mod tokenizer;

pub use backbone::Backbone;
pub use checkpoint::Container;
pub use kvcache::{KvCache, LayerKv};
pub use model::{check_simplex, HeadSource, ModelDims, PolicyModel, PolicyVars, ReferenceModel, SIMPLEX_TOL};
pub use tokenizer::{TokenizerSpec, BOS, DEFAULT_ALPHABET, EOS};

use std::path::Path;

use thiserror::Error;

use crate::numcore::{NumError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dims: {0}")]
    Dims(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("prompt of {len} tokens exceeds the limit of {limit}")]
    PromptTooLong { len: usize, limit: usize },
    #[error("sequence of {len} tokens exceeds max_positions {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("cache is full: max_positions {limit}")]
    PositionOverflow { limit: usize },
    #[error("head index {index} out of range for {heads} heads")]
    HeadIndex { index: usize, heads: usize },
    #[error("ensemble weights: {0}")]
    Weights(String),
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const POLICY_KIND: &str = "policy";

impl PolicyModel {
    pub fn to_container(&self) -> Container {
        let names = Backbone::names(self.dims());
        let mut tensors: Vec<(String, Tensor)> =
            names.iter().zip(self.backbone.params()).map(|(n, t)| (format!("backbone.{n}"), t.clone())).collect();
        tensors.extend(self.heads.iter().enumerate().map(|(i, h)| (format!("head.{i}"), h.clone())));
        tensors.extend(
            names.iter().zip(self.reference().backbone().params()).map(|(n, t)| (format!("reference.backbone.{n}"), t.clone())),
        );
        tensors.push(("reference.head".into(), self.reference().head().clone()));
        Container {
            kind: POLICY_KIND.into(),
            dims: self.dims().clone(),
            tokenizer: self.tokenizer().clone(),
            meta: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn from_container(mut c: Container) -> Result<Self, ModelError> {
        if c.kind != POLICY_KIND {
            return Err(ModelError::Checkpoint(format!("expected a {POLICY_KIND} checkpoint, found {}", c.kind)));
        }
        let dims = c.dims.clone();
        let names = Backbone::names(&dims);
        let backbone = Backbone::from_params(&dims, c.take_prefixed("backbone", &names)?)?;
        let heads = (0..dims.objective_heads).map(|i| c.take(&format!("head.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let ref_backbone = Backbone::from_params(&dims, c.take_prefixed("reference.backbone", &names)?)?;
        let ref_head = c.take("reference.head")?;
        PolicyModel::from_parts(dims, backbone, heads, ref_backbone, ref_head, c.tokenizer)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyModel {
        let dims = ModelDims { hidden_dim: 8, layers: 1, attn_heads: 2, max_positions: 16, objective_heads: 2, ..Default::default() };
        PolicyModel::new(dims, TokenizerSpec::default(), 1).unwrap().init_heads(0.01, 2)
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let bytes = m.to_container().to_bytes().unwrap();
        let back = PolicyModel::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let mut bytes = tiny().to_container().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(Container::from_bytes(&bytes), Err(ModelError::ChecksumMismatch)));
    }
}
