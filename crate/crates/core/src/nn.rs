//! Transformer building blocks shared by the encoders and the fusion module.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Normal samples truncated to two standard deviations by rejection.
pub fn trunc_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = dist.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

pub fn normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in, out]` drawn with std `in^-1/2`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (in_dim as f64).powf(-0.5);
        let w = Tensor::new(vec![in_dim, out_dim], normal(rng, in_dim * out_dim, std))
            .expect("linear weight shape");
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of an attention layer together with the node holding its weights.
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, group, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, group, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, group, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, group, rng),
            heads,
        }
    }

    /// Queries from `x` (`[batch*lq, dim]`), keys and values from `context`
    /// (`[batch*lk, dim]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Var,
        batch: usize,
        causal: bool,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, context)?;
        let v = self.value.forward(tape, store, context)?;
        let attention = tape.attention(q, k, v, batch, self.heads, causal)?;
        let output = self.out.forward(tape, store, attention)?;
        Ok(AttentionOutput { output, attention })
    }
}

/// Two-layer GELU feed-forward with expansion 4.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup, rng: &mut impl Rng) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), dim, 4 * dim, true, group, rng),
            proj: Linear::new(store, &format!("{name}.proj"), 4 * dim, dim, true, group, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.proj.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, group),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, group, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim, group),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, group, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, causal: bool) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, batch, causal)?;
        let x = tape.add(x, a.output)?;
        let h = self.ln_mlp.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

/// Row indices that interleave per-sample segments from several stacked
/// sources: for each sample `b`, take `len_s` rows starting at
/// `offset_s + b*len_s` from every source `s` in order.
pub fn interleave_indices(batch: usize, segments: &[(usize, usize)]) -> Vec<usize> {
    let mut idx = Vec::new();
    for b in 0..batch {
        for &(offset, len) in segments {
            idx.extend(offset + b * len..offset + (b + 1) * len);
        }
    }
    idx
}
