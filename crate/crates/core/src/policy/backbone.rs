//! Pre-norm causal transformer shared by the policy and the reward models.

use rand::Rng;

use super::{KvCache, ModelDims, ModelError};
use crate::numcore::{gelu, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 12;
const GLOBAL_BEFORE: usize = 2;

// Offsets inside one block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

const BLOCK_NAMES: [&str; PER_LAYER] =
    ["ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];

/// Backbone parameters in declared order:
/// token embedding, position embedding, `layers` blocks, final norm gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    dims: ModelDims,
    params: Vec<Tensor>,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let d = dims.hidden_dim;
        let ff = 4 * d;
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / ((2 * dims.layers) as f64).sqrt();
        let mut params = vec![
            Tensor::randn(&[dims.vocab_size, d], 0.1, rng),
            Tensor::randn(&[dims.max_positions, d], 0.1, rng),
        ];
        for _ in 0..dims.layers {
            params.push(Tensor::full(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::randn(&[d, d], proj_std, rng));
            params.push(Tensor::randn(&[d, d], proj_std, rng));
            params.push(Tensor::randn(&[d, d], proj_std, rng));
            params.push(Tensor::randn(&[d, d], resid_std, rng));
            params.push(Tensor::full(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::randn(&[d, ff], proj_std, rng));
            params.push(Tensor::zeros(&[ff]));
            params.push(Tensor::randn(&[ff, d], 1.0 / (ff as f64).sqrt() / ((2 * dims.layers) as f64).sqrt(), rng));
            params.push(Tensor::zeros(&[d]));
        }
        params.push(Tensor::full(&[d], 1.0));
        params.push(Tensor::zeros(&[d]));
        Self { dims: dims.clone(), params }
    }

    /// Rebuilds a backbone from tensors in declared order, checking every shape.
    pub fn from_params(dims: &ModelDims, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let expected = Self::shapes(dims);
        if params.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!("expected {} backbone tensors, found {}", expected.len(), params.len())));
        }
        for (i, (p, s)) in params.iter().zip(&expected).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(ModelError::Checkpoint(format!("backbone tensor {i}: shape {:?}, expected {s:?}", p.shape())));
            }
        }
        Ok(Self { dims: dims.clone(), params })
    }

    pub fn shapes(dims: &ModelDims) -> Vec<Vec<usize>> {
        let d = dims.hidden_dim;
        let mut s = vec![vec![dims.vocab_size, d], vec![dims.max_positions, d]];
        for _ in 0..dims.layers {
            s.extend([vec![d], vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d], vec![d, 4 * d], vec![4 * d], vec![4 * d, d], vec![d]]);
        }
        s.extend([vec![d], vec![d]]);
        s
    }

    pub fn names(dims: &ModelDims) -> Vec<String> {
        let mut n = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..dims.layers {
            n.extend(BLOCK_NAMES.iter().map(|b| format!("block{l}.{b}")));
        }
        n.extend(["ln_f.gain".to_string(), "ln_f.bias".to_string()]);
        n
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn block(&self, l: usize, which: usize) -> &Tensor {
        &self.params[GLOBAL_BEFORE + l * PER_LAYER + which]
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.dims.max_positions {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), limit: self.dims.max_positions });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(ModelError::TokenOutOfVocab { token: t, vocab: self.dims.vocab_size });
        }
        Ok(())
    }

    /// Full-sequence forward on a graph; returns hidden states `[T, d]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], tokens: &[usize]) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.rows(vars[0], tokens)?;
        let pos = g.rows(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..self.dims.layers {
            let p = |which: usize| vars[GLOBAL_BEFORE + l * PER_LAYER + which];
            let h = g.layer_norm(x, p(LN1_G), p(LN1_B), LN_EPS)?;
            let q = g.matmul(h, p(WQ))?;
            let k = g.matmul(h, p(WK))?;
            let v = g.matmul(h, p(WV))?;
            let a = g.causal_attention(q, k, v, self.dims.attn_heads)?;
            let o = g.matmul(a, p(WO))?;
            x = g.add(x, o)?;
            let h2 = g.layer_norm(x, p(LN2_G), p(LN2_B), LN_EPS)?;
            let f1 = g.matmul(h2, p(W1))?;
            let f1 = g.add_row(f1, p(B1))?;
            let f1 = g.gelu(f1);
            let f2 = g.matmul(f1, p(W2))?;
            let f2 = g.add_row(f2, p(B2))?;
            x = g.add(x, f2)?;
        }
        let n = self.params.len();
        Ok(g.layer_norm(x, vars[n - 2], vars[n - 1], LN_EPS)?)
    }

    /// Hidden states for a whole sequence without gradient bookkeeping.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let h = self.forward(&mut g, &vars, tokens)?;
        Ok(g.value(h).clone())
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.dims.layers, self.dims.hidden_dim)
    }

    /// Processes one token at the cache's next position and appends its keys
    /// and values. Returns the backbone output at that position.
    pub fn step(&self, cache: &mut KvCache, token: usize) -> Result<Vec<f64>, ModelError> {
        let pos = cache.position_count();
        if pos + 1 > self.dims.max_positions {
            return Err(ModelError::PositionOverflow { limit: self.dims.max_positions });
        }
        if token >= self.dims.vocab_size {
            return Err(ModelError::TokenOutOfVocab { token, vocab: self.dims.vocab_size });
        }
        let d = self.dims.hidden_dim;
        let heads = self.dims.attn_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = self.params[0].row(token).iter().zip(self.params[1].row(pos)).map(|(a, b)| a + b).collect();
        for l in 0..self.dims.layers {
            let h = layer_norm(&x, self.block(l, LN1_G).data(), self.block(l, LN1_B).data());
            let q = vec_mat(&h, self.block(l, WQ));
            let k = vec_mat(&h, self.block(l, WK));
            let v = vec_mat(&h, self.block(l, WV));
            let kv = cache.layer_mut(l);
            kv.keys.extend_from_slice(&k);
            kv.values.extend_from_slice(&v);
            let n = pos + 1;
            let mut a = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kv.keys[j * d + off..j * d + off + dh];
                    *s = scale * qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut a[off..off + dh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &kv.values[j * d + off..j * d + off + dh];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
            let o = vec_mat(&a, self.block(l, WO));
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            let h2 = layer_norm(&x, self.block(l, LN2_G).data(), self.block(l, LN2_B).data());
            let mut f1 = vec_mat(&h2, self.block(l, W1));
            f1.iter_mut().zip(self.block(l, B1).data()).for_each(|(f, b)| *f = gelu(*f + b));
            let f2 = vec_mat(&f1, self.block(l, W2));
            x.iter_mut().zip(f2.iter().zip(self.block(l, B2).data())).for_each(|(x, (f, b))| *x += f + b);
        }
        let n = self.params.len();
        let hidden = layer_norm(&x, self.params[n - 2].data(), self.params[n - 1].data());
        cache.finish_position(hidden.clone());
        Ok(hidden)
    }

    /// Encodes a sequence token by token into a fresh cache.
    pub fn encode(&self, tokens: &[usize]) -> Result<KvCache, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.dims.max_positions {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), limit: self.dims.max_positions });
        }
        let mut cache = self.new_cache();
        for &t in tokens {
            self.step(&mut cache, t)?;
        }
        Ok(cache)
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(gain.iter().zip(bias)).map(|(v, (g, b))| (v - mean) * r * g + b).collect()
}

/// Row vector times `[rows, cols]` matrix.
pub(crate) fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
    out
}
