//! Define-by-run reverse-mode graph.
//!
//! Every op evaluates eagerly and appends a node, so node order is already a
//! topological order; [`Graph::backward`] walks it in reverse. Nodes that do not
//! depend on any leaf created with [`Graph::leaf`] are constants and never
//! receive gradient.

use super::tensor::{gelu, gelu_grad, gemm, log_sigmoid, sigmoid, Tensor};
use super::NumError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    Rows { table: Var, index: Vec<usize> },
    SliceRows { x: Var, start: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    LogMixture { inputs: Vec<Var>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Computation graph rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; exact zeros when `var` is not on the loss path.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::shape(op, a, b));
    }
    Ok(())
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(NumError::Rank { op, expected: 2, shape: t.shape().to_vec() }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable input (a parameter or a probe point).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = match ta.shape() {
            [m, k] => (*m, *k),
            _ => return Err(NumError::shape("matmul", ta, tb)),
        };
        let n = match tb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(NumError::shape("matmul", ta, tb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (m, n) = rows_cols("add_row", ta)?;
        if tr.len() != n {
            return Err(NumError::shape("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(t, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, s), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, op, tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    fn rowwise(&mut self, op_name: &'static str, a: Var, f: impl Fn(&[f64]) -> Vec<f64>, op: Op) -> Result<Var, NumError> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = rows_cols(op_name, ta)?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(f(&ta.data()[i * n..(i + 1) * n]));
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, op, tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.rowwise("softmax", a, super::tensor::softmax_slice, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.rowwise("log_softmax", a, super::tensor::log_softmax_slice, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumError> {
        let tp = &self.nodes[pred.0].value;
        if tp.len() != target.len() {
            return Err(NumError::shape("mse", tp, target));
        }
        let n = tp.len() as f64;
        let s = tp.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let tracked = self.tracked(pred);
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target: target.data().to_vec() }, tracked))
    }

    /// Picks `x[i, index[i]]` from every row, giving a length-`m` vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, NumError> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = rows_cols("gather", tx)?;
        if index.len() != m {
            return Err(NumError::IndexLength { op: "gather", expected: m, got: index.len() });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &j) in index.iter().enumerate() {
            if j >= n {
                return Err(NumError::IndexOutOfRange { op: "gather", index: j, bound: n });
            }
            out.push(tx.data()[i * n + j]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::vector(out), Op::Gather { x, index: index.to_vec() }, tracked))
    }

    /// Row lookup `table[index[r], :]`, giving `[len, cols]` (embedding lookup).
    pub fn rows(&mut self, table: Var, index: &[usize]) -> Result<Var, NumError> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = rows_cols("rows", tt)?;
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in index {
            if r >= v {
                return Err(NumError::IndexOutOfRange { op: "rows", index: r, bound: v });
            }
            out.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(Tensor::matrix(index.len(), d, out)?, Op::Rows { table, index: index.to_vec() }, tracked))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = rows_cols("slice_rows", tx)?;
        if start > end || end > m {
            return Err(NumError::IndexOutOfRange { op: "slice_rows", index: end, bound: m });
        }
        let t = Tensor::matrix(end - start, n, tx.data()[start * n..end * n].to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::SliceRows { x, start }, tracked))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let (m, n) = rows_cols("layer_norm", tx)?;
        if tg.len() != n {
            return Err(NumError::shape("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(NumError::shape("layer_norm", tx, tb));
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, tracked))
    }

    /// Causal multi-head scaled dot-product attention over `[T, d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumError> {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        let (t, d) = rows_cols("attention", tq)?;
        if heads == 0 || d % heads != 0 {
            return Err(NumError::InvalidArgument(format!("{d} features not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                for j in 0..=i {
                    prow[j] = scores[j] / z;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(Tensor::matrix(t, d, out)?, Op::Attention { q, k, v, heads, probs }, tracked))
    }

    /// `log(sum_i w_i * exp(x_i))` elementwise over same-shaped inputs.
    ///
    /// Used to mix per-head log-probabilities into an ensemble log-probability.
    pub fn log_mixture(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var, NumError> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return Err(NumError::InvalidArgument(format!(
                "log_mixture needs one weight per input ({} inputs, {} weights)",
                inputs.len(),
                weights.len()
            )));
        }
        let first = &self.nodes[inputs[0].0].value;
        for v in &inputs[1..] {
            same_shape("log_mixture", first, &self.nodes[v.0].value)?;
        }
        let shape = first.shape().to_vec();
        let n = first.len();
        let mut out = vec![0.0; n];
        let mut terms = vec![0.0; inputs.len()];
        for (e, o) in out.iter_mut().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (slot, (v, &w)) in terms.iter_mut().zip(inputs.iter().zip(weights)) {
                *slot = if w > 0.0 { w.ln() + self.nodes[v.0].value.data()[e] } else { f64::NEG_INFINITY };
                max = max.max(*slot);
            }
            *o = max + terms.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        }
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        Ok(self.push(Tensor::new(shape, out)?, Op::LogMixture { inputs: inputs.to_vec(), weights: weights.to_vec() }, tracked))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |da| gemm(m, n, k, 1.0, g, false, val(*b).data(), true, 1.0, da));
                self.accumulate(grads, *b, |db| gemm(k, m, n, 1.0, val(*a).data(), true, g, false, 1.0, db));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                self.accumulate(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                self.accumulate(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                let n = val(*row).len();
                self.accumulate(grads, *row, |dr| {
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = rows_cols("softmax", &node.value).map(|(_, n)| n).unwrap_or(1);
                self.accumulate(grads, *a, |da| {
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = rows_cols("log_softmax", &node.value).map(|(_, n)| n).unwrap_or(1);
                self.accumulate(grads, *a, |da| {
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * sigmoid(-x[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let n = p.len() as f64;
                self.accumulate(grads, *pred, |dp| {
                    for i in 0..dp.len() {
                        dp[i] += g[0] * 2.0 * (p[i] - target[i]) / n;
                    }
                });
            }
            Op::Gather { x, index } => {
                let n = rows_cols("gather", val(*x)).map(|(_, n)| n).unwrap_or(1);
                self.accumulate(grads, *x, |dx| {
                    for (i, &j) in index.iter().enumerate() {
                        dx[i * n + j] += g[i];
                    }
                });
            }
            Op::Rows { table, index } => {
                let d = val(*table).shape()[1];
                self.accumulate(grads, *table, |dt| {
                    for (r, &row) in index.iter().enumerate() {
                        for j in 0..d {
                            dt[row * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = rows_cols("slice_rows", val(*x)).map(|(_, n)| n).unwrap_or(1);
                self.accumulate(grads, *x, |dx| {
                    for (d, s) in dx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dx[i * n + j] += rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(node, g, grads, *q, *k, *v, *heads, probs),
            Op::LogMixture { inputs, weights } => {
                let out = node.value.data();
                for (v, &w) in inputs.iter().zip(weights) {
                    if w <= 0.0 {
                        continue;
                    }
                    let x = val(*v).data();
                    self.accumulate(grads, *v, |dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * w * (x[i] - out[i]).exp();
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
    ) {
        let (t, d) = (node.value.shape()[0], node.value.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.nodes[q.0].value.data(), self.nodes[k.0].value.data(), self.nodes[v.0].value.data());
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let prow = &probs[(h * t + i) * t..(h * t + i) * t + t];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += prow[j] * dp[j];
                    for c in 0..dh {
                        dv[j * d + off + c] += prow[j] * gi[c];
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kd[j * d + off + c];
                        dk[j * d + off + c] += ds * qd[i * d + off + c];
                    }
                }
            }
        }
        self.accumulate(grads, q, |x| x.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
        self.accumulate(grads, k, |x| x.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
        self.accumulate(grads, v, |x| x.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.log_sigmoid(x);
        assert!((g.item(y) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::vector(vec![5.0, 6.0]));
        let y = g.sum(x);
        let grads = g.backward(y).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(NumError::ShapeMismatch { .. })));
    }

    #[test]
    fn hand_computed_two_by_two_cases() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[4.5, -0.5, 9.5, -2.0]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1.5, 1.0, 5.0, 4.25]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, -2.0, 6.0, 1.0]);
        let gath = g.gather(a, &[1, 0]).unwrap();
        assert_eq!(g.value(gath).data(), &[2.0, 3.0]);
        // layer norm of [1,2]: mean 1.5, var 0.25 -> [-1, 1] with eps 0
        let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let ln = g.layer_norm(a, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(ln).data(), &[-1.0, 1.0, -1.0, 1.0]);
        let mse = g.mse(a, &Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.item(mse), (0.0 + 1.0 + 4.0 + 9.0) / 4.0);
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = g.causal_attention(q, q, v, 1).unwrap();
        assert_eq!(g.value(out).row(0), &[3.0, 4.0]);
        // position 1 attends equally to scores (0, 1/sqrt 2)
        let w1 = (1.0f64 / 2f64.sqrt()).exp();
        let expected = (3.0 + 5.0 * w1) / (1.0 + w1);
        assert!((g.value(out).row(1)[0] - expected).abs() < 1e-14);
    }
}
