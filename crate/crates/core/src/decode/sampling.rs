use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DecodeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    /// When false, EOS is removed from the support.
    pub allow_eos: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, top_k: 50, allow_eos: true }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(DecodeError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Uniform draw in `[0, 1)` addressed by `(seed, stream, position)`.
///
/// Counter-based: the value depends only on its address, so the order in
/// which candidates are generated cannot change any draw.
pub fn uniform_at(seed: u64, stream: u64, position: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * position as u128);
    rng.gen::<f64>()
}

/// Samples a token id from `probs` after temperature, top-k, and top-p
/// filtering, using the uniform draw `u`.
pub fn sample_token(probs: &[f64], cfg: &SamplingConfig, eos: usize, u: f64) -> Result<usize, DecodeError> {
    let mut weights: Vec<f64> = if cfg.temperature == 1.0 {
        probs.to_vec()
    } else {
        let inv = 1.0 / cfg.temperature;
        probs.iter().map(|p| if *p > 0.0 { (p.ln() * inv).exp() } else { 0.0 }).collect()
    };
    if !cfg.allow_eos && eos < weights.len() {
        weights[eos] = 0.0;
    }
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    // Descending weight; ties keep the lower id first.
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    if cfg.top_k > 0 && order.len() > cfg.top_k {
        order.truncate(cfg.top_k);
    }
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    if order.is_empty() || !(total > 0.0) || !total.is_finite() {
        return Err(DecodeError::EmptySupport);
    }
    if cfg.top_p < 1.0 {
        let mut acc = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            acc += weights[i] / total;
            if acc >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let target = u * total;
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if target < acc {
            return Ok(i);
        }
    }
    Ok(*order.last().expect("non-empty support"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_addressable() {
        let a = uniform_at(5, 2, 17);
        assert_eq!(a, uniform_at(5, 2, 17));
        assert_ne!(a, uniform_at(5, 3, 17));
        assert_ne!(a, uniform_at(5, 2, 18));
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn greedy_limits() {
        let p = [0.1, 0.6, 0.3];
        let cfg = SamplingConfig { top_k: 1, ..Default::default() };
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(sample_token(&p, &cfg, 99, u).unwrap(), 1);
        }
        let cfg = SamplingConfig { top_k: 0, top_p: 0.5, ..Default::default() };
        assert_eq!(sample_token(&p, &cfg, 99, 0.9).unwrap(), 1);
    }

    #[test]
    fn inverse_cdf_in_sorted_order() {
        let p = [0.1, 0.6, 0.3];
        let cfg = SamplingConfig::default();
        assert_eq!(sample_token(&p, &cfg, 99, 0.59).unwrap(), 1);
        assert_eq!(sample_token(&p, &cfg, 99, 0.61).unwrap(), 2);
        assert_eq!(sample_token(&p, &cfg, 99, 0.95).unwrap(), 0);
    }

    #[test]
    fn eos_can_be_banned() {
        let p = [0.0, 1.0, 0.0];
        let cfg = SamplingConfig { allow_eos: false, ..Default::default() };
        assert!(matches!(sample_token(&p, &cfg, 1, 0.3), Err(DecodeError::EmptySupport)));
        let p = [0.2, 0.8];
        assert_eq!(sample_token(&p, &cfg, 1, 0.99).unwrap(), 0);
    }

    #[test]
    fn low_temperature_sharpens() {
        let p = [0.4, 0.6];
        let cfg = SamplingConfig { temperature: 0.01, ..Default::default() };
        assert_eq!(sample_token(&p, &cfg, 99, 0.999).unwrap(), 1);
    }
}
