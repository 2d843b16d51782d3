use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        divisor: f64,
        probs: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order; creation order is a topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound parameter into the store's grad buffers.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &var) in &tape.bindings {
            if let Some(g) = self.get(var) {
                for (acc, v) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node,
    /// so every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone(), true);
        self.bindings.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))
            .ok_or_else(|| Error::shape("add_bias", self.shape(x), self.shape(bias)))?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (rows_cols(sa), rows_cols(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        debug_assert_eq!(k, k2);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a))
            .ok_or_else(|| Error::Contract(format!("transpose needs a matrix, got {:?}", self.shape(a))))?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Index {
                what: format!("axis of tensor with shape {shape:?}"),
                index: axis,
                bound: shape.len(),
            });
        }
        Ok(kernels::axis_split(shape, axis))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (o, l, i) = self.check_axis(x, axis)?;
        let vx = self.value(x);
        let data = kernels::softmax_axis(vx.data(), o, l, i);
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (o, l, i) = self.check_axis(x, axis)?;
        let vx = self.value(x);
        let data = kernels::log_softmax_axis(vx.data(), o, l, i);
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.value(gain).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(bias)));
        }
        let rows = self.value(x).numel() / d;
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` independent sequences.
    ///
    /// `q` is `[batch*lq, dim]`, `k` and `v` are `[batch*lk, dim]`. Returns the
    /// concatenated per-head outputs `[batch*lq, dim]` (no output projection).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let ((rq, dq), (rk, dk)) = match (rows_cols(sq), rows_cols(sk)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("attention", sq, sk)),
        };
        if dq != dk || sk != sv {
            return Err(Error::shape("attention", sq, if dq != dk { sk } else { sv }));
        }
        if heads == 0 || dq % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dq} not divisible by {heads} heads"
            )));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Error::shape("attention", sq, sk));
        }
        let (lq, lk) = (rq / batch, rk / batch);
        let dh = dq / heads;
        let probs = kernels::attention_probs(
            self.value(q).data(),
            self.value(k).data(),
            batch,
            lq,
            lk,
            dq,
            heads,
            causal,
        );
        let vv = self.value(v).data();
        let mut out = vec![0.0; rq * dq];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let prow = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let orow = &mut out[(b * lq + i) * dq + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vv[(b * lk + j) * dq + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rq, dq], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an attention node, laid out
    /// `[batch, heads, lq, lk]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Selects rows (with repetition allowed) from a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))
            .ok_or_else(|| Error::Contract(format!("gather_rows needs a matrix, got {:?}", self.shape(x))))?;
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "gather_rows row".into(),
                    index: i,
                    bound: m,
                });
            }
            data.extend_from_slice(&vx[i * n..(i + 1) * n]);
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = rows_cols(self.shape(first))
            .ok_or_else(|| Error::Contract("concat_rows needs matrices".into()))?
            .1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            match rows_cols(self.shape(p)) {
                Some((r, c)) if c == n => {
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                _ => return Err(Error::shape("concat_rows", self.shape(first), self.shape(p))),
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_sum(logits, targets, targets.len() as f64)
    }

    /// Summed cross-entropy divided by `divisor`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], divisor: f64) -> Result<Var> {
        let (m, v) = rows_cols(self.shape(logits))
            .ok_or_else(|| Error::Contract(format!("cross_entropy needs a matrix, got {:?}", self.shape(logits))))?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", &[m, v], &[targets.len()]));
        }
        if let Some((_, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target class".into(),
                index: t,
                bound: v,
            });
        }
        let logp = kernels::log_softmax_axis(self.value(logits).data(), m, v, 1);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp[r * v + t])
            .sum::<f64>()
            / divisor;
        let probs = logp.iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                divisor,
                probs,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))
            .ok_or_else(|| Error::Contract(format!("normalize_rows needs a matrix, got {:?}", self.shape(x))))?;
        let vx = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let norm = kernels::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate(format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            for c in 0..n {
                data[r * n + c] = row[c] / norm;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::NormalizeRows { x, norms }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: F) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                let n = self.value(*b).numel();
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a)).expect("matrix");
                let n = self.shape(*b)[1];
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(grads, *a, |ga| kernels::matmul_nt_acc(g, vb, ga, m, n, k));
                self.acc(grads, *b, |gb| kernels::matmul_tn_acc(va, g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(self.shape(*a)).expect("matrix");
                let gt = kernels::transpose(g, n, m);
                self.acc(grads, *a, |ga| ga.iter_mut().zip(&gt).for_each(|(x, y)| *x += y));
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(va[i]);
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (o, l, inner) = kernels::axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for oo in 0..o {
                        for ii in 0..inner {
                            let at = |j: usize| oo * l * inner + j * inner + ii;
                            let dot: f64 = (0..l).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..l {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (o, l, inner) = kernels::axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for oo in 0..o {
                        for ii in 0..inner {
                            let at = |j: usize| oo * l * inner + j * inner + ii;
                            let gsum: f64 = (0..l).map(|j| g[at(j)]).sum();
                            for j in 0..l {
                                gx[at(j)] += g[at(j)] - out[at(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = rstd.len();
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xr[c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *heads, probs, g, grads),
            Op::GatherRows { x, idx } => {
                let n = self.shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            gx[i * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let gs = &g[offset..offset + len];
                    self.acc(grads, p, |gp| gp.iter_mut().zip(gs).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                divisor,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / divisor;
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let yg = kernels::dot(y, gr);
                        for c in 0..n {
                            gx[r * n + c] += (gr[c] - y[c] * yg) / norm;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rq, dim) = rows_cols(self.shape(q)).expect("matrix");
        let rk = self.shape(k)[0];
        let (lq, lk) = (rq / batch, rk / batch);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let prow = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(b * lq + i) * dim + h * dh..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..lk {
                        let vrow = &vv[(b * lk + j) * dim + h * dh..][..dh];
                        dp[j] = kernels::dot(go, vrow);
                        weighted += prow[j] * dp[j];
                        if prow[j] != 0.0 {
                            let dvrow = &mut dv[(b * lk + j) * dim + h * dh..][..dh];
                            for (d, &x) in dvrow.iter_mut().zip(go) {
                                *d += prow[j] * x;
                            }
                        }
                    }
                    let qrow = &qv[(b * lq + i) * dim + h * dh..][..dh];
                    for j in 0..lk {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kv[(b * lk + j) * dim + h * dh..][..dh];
                        let dqrow = &mut dq[(b * lq + i) * dim + h * dh..][..dh];
                        for (d, &x) in dqrow.iter_mut().zip(krow) {
                            *d += ds * x;
                        }
                        let dkrow = &mut dk[(b * lk + j) * dim + h * dh..][..dh];
                        for (d, &x) in dkrow.iter_mut().zip(qrow) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            self.acc(grads, var, |gx| gx.iter_mut().zip(&d).for_each(|(a, b)| *a += b));
        }
    }
}
