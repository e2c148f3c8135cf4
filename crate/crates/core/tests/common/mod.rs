#![allow(dead_code)]

pub mod hindsight;

use moalign::mahdpo::{EncodedPair, PreferencePair};
use moalign::policy::{ModelDims, PolicyModel, TokenizerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(seed: u64, heads: usize, perturb: f64) -> PolicyModel {
    let tok = TokenizerSpec::default();
    let dims = ModelDims {
        vocab_size: tok.vocab_size(),
        hidden_dim: 8,
        layers: 1,
        attn_heads: 2,
        max_positions: 64,
        objective_heads: heads,
    };
    PolicyModel::new(dims, tok, seed).unwrap().init_heads(perturb, seed ^ 0x5a)
}

pub fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const CHARS: &[u8] = b"0123456789+-=!\n";
    (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect()
}

/// `n` random pairs with objectives cycling over `heads`.
pub fn random_pairs(seed: u64, n: usize, heads: usize) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let chosen = random_text(&mut rng, 2 + i % 4);
            let mut rejected = random_text(&mut rng, 3);
            if rejected == chosen {
                rejected.push('7');
            }
            PreferencePair { prompt: format!("{}-{}=?\n", i % 10, (i * 7) % 10), chosen, rejected, objective: i % heads }
        })
        .collect()
}

pub fn encode(model: &PolicyModel, pairs: &[PreferencePair]) -> Vec<EncodedPair> {
    pairs.iter().map(|p| p.encode(model).unwrap()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
