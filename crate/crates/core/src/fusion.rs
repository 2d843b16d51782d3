//! Multimodal interaction encoder, its co-attention and merged-attention
//! alternatives, the masked-token prediction head and the relation-reasoning
//! (MLM) loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::data::MaskedPositions;
use crate::nn::{self, Block, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Layer-norm, one cross-attention layer (text queries, image keys/values), then transformer blocks.
    Ours,
    /// Parallel text and image streams, each block with self- and cross-attention.
    CoAttention,
    /// Text and image tokens concatenated and run through shared blocks.
    MergedAttention,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [FusionVariant::CoAttention, FusionVariant::MergedAttention, FusionVariant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Ours => "ours",
            FusionVariant::CoAttention => "co_attention",
            FusionVariant::MergedAttention => "merged_attention",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(FusionVariant::Ours),
            "co_attention" => Ok(FusionVariant::CoAttention),
            "merged_attention" => Ok(FusionVariant::MergedAttention),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl FusionConfig {
    pub fn toy() -> Self {
        Self {
            variant: FusionVariant::Ours,
            hidden_dim: 64,
            num_heads: 4,
            num_blocks: 2,
        }
    }

    pub fn production() -> Self {
        Self {
            variant: FusionVariant::Ours,
            hidden_dim: 512,
            num_heads: 8,
            num_blocks: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "fusion hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Fused masked-text states, `[batch*len, hidden_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct FusedStates {
    pub states: Var,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct CoStream {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_query: LayerNorm,
    ln_context: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl CoStream {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::NewModule;
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d, g),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, g, rng),
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), d, g),
            ln_context: LayerNorm::new(store, &format!("{name}.ln_context"), d, g),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, g, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d, g),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, g, rng),
        }
    }

    fn self_step(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let h = self.ln_self.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, batch, false)?;
        tape.add(x, a.output)
    }

    fn cross_step(&self, tape: &mut Tape, store: &ParamStore, x: Var, other: Var, batch: usize) -> Result<Var> {
        let q = self.ln_query.forward(tape, store, x)?;
        let kv = self.ln_context.forward(tape, store, other)?;
        let a = self.cross_attn.forward(tape, store, q, kv, batch, false)?;
        let x = tape.add(x, a.output)?;
        let h = self.ln_mlp.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Ours {
        ln_text: LayerNorm,
        ln_image: LayerNorm,
        cross: MultiHeadAttention,
        blocks: Vec<Block>,
    },
    CoAttention {
        text: Vec<CoStream>,
        image: Vec<CoStream>,
    },
    MergedAttention {
        blocks: Vec<Block>,
    },
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub config: FusionConfig,
    text_in: Linear,
    image_in: Linear,
    layers: Layers,
    ln_out: LayerNorm,
}

impl FusionEncoder {
    /// Parameters are registered under `name.` in the new-module group.
    pub fn new(
        config: FusionConfig,
        text_dim: usize,
        image_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::NewModule;
        let (d, h) = (config.hidden_dim, config.num_heads);
        let text_in = Linear::new(store, &format!("{name}.text_in"), text_dim, d, true, g, rng);
        let image_in = Linear::new(store, &format!("{name}.image_in"), image_dim, d, true, g, rng);
        let blocks = |store: &mut ParamStore, rng: &mut _| -> Vec<Block> {
            (0..config.num_blocks)
                .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), d, h, g, rng))
                .collect()
        };
        let layers = match config.variant {
            FusionVariant::Ours => Layers::Ours {
                ln_text: LayerNorm::new(store, &format!("{name}.ln_text"), d, g),
                ln_image: LayerNorm::new(store, &format!("{name}.ln_image"), d, g),
                cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, h, g, rng),
                blocks: blocks(store, rng),
            },
            FusionVariant::MergedAttention => Layers::MergedAttention {
                blocks: blocks(store, rng),
            },
            FusionVariant::CoAttention => {
                let mut text = Vec::new();
                let mut image = Vec::new();
                for i in 0..config.num_blocks {
                    text.push(CoStream::new(store, &format!("{name}.co.{i}.text"), d, h, rng));
                    image.push(CoStream::new(store, &format!("{name}.co.{i}.image"), d, h, rng));
                }
                Layers::CoAttention { text, image }
            }
        };
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d, g);
        Ok(Self {
            config,
            text_in,
            image_in,
            layers,
            ln_out,
        })
    }

    /// Fuses masked-text token states `[batch*l, text_dim]` with image token
    /// states `[batch*n, image_dim]`; returns `[batch*l, hidden_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text_tokens: Var,
        image_tokens: Var,
        batch: usize,
    ) -> Result<FusedStates> {
        let (rt, ri) = (tape.shape(text_tokens)[0], tape.shape(image_tokens)[0]);
        if batch == 0 || rt % batch != 0 || ri % batch != 0 {
            return Err(Error::shape("fusion", tape.shape(text_tokens), tape.shape(image_tokens)));
        }
        let (l, n) = (rt / batch, ri / batch);
        let t = self.text_in.forward(tape, store, text_tokens)?;
        let v = self.image_in.forward(tape, store, image_tokens)?;
        let x = match &self.layers {
            Layers::Ours {
                ln_text,
                ln_image,
                cross,
                blocks,
            } => {
                let q = ln_text.forward(tape, store, t)?;
                let kv = ln_image.forward(tape, store, v)?;
                let mut x = cross.forward(tape, store, q, kv, batch, false)?.output;
                for b in blocks {
                    x = b.forward(tape, store, x, batch, false)?;
                }
                x
            }
            Layers::MergedAttention { blocks } => {
                let stacked = tape.concat_rows(&[t, v])?;
                let order = nn::interleave_indices(batch, &[(0, l), (batch * l, n)]);
                let mut x = tape.gather_rows(stacked, &order)?;
                for b in blocks {
                    x = b.forward(tape, store, x, batch, false)?;
                }
                let text_rows: Vec<usize> = (0..batch).flat_map(|s| s * (l + n)..s * (l + n) + l).collect();
                tape.gather_rows(x, &text_rows)?
            }
            Layers::CoAttention { text, image } => {
                let (mut xt, mut xv) = (t, v);
                for (ts, is) in text.iter().zip(image) {
                    let st = ts.self_step(tape, store, xt, batch)?;
                    let sv = is.self_step(tape, store, xv, batch)?;
                    xt = ts.cross_step(tape, store, st, sv, batch)?;
                    xv = is.cross_step(tape, store, sv, st, batch)?;
                }
                xt
            }
        };
        let states = self.ln_out.forward(tape, store, x)?;
        Ok(FusedStates { states, batch, len: l })
    }
}

/// Masked-token classifier: dense → GELU → layer-norm → vocabulary logits.
#[derive(Clone, Debug)]
pub struct MlmHead {
    dense: Linear,
    ln: LayerNorm,
    decoder: Linear,
}

impl MlmHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::NewModule;
        Self {
            dense: Linear::new(store, &format!("{name}.dense"), hidden, hidden, true, g, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), hidden, g),
            decoder: Linear::new(store, &format!("{name}.decoder"), hidden, vocab_size, true, g, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.dense.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = self.ln.forward(tape, store, h)?;
        self.decoder.forward(tape, store, h)
    }
}

/// Masked-token prediction loss over the fused states.
///
/// `masked[b]` lists the masked positions of sample `b`. The loss is the mean
/// cross-entropy over all masked positions; with `literal_scaling` it is
/// further divided by the vocabulary size. No masked positions at all yields
/// a constant zero that carries no gradient.
pub fn irr_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &MlmHead,
    fused: &FusedStates,
    masked: &[MaskedPositions],
    literal_scaling: bool,
) -> Result<Var> {
    if masked.len() != fused.batch {
        return Err(Error::shape("irr_loss", &[fused.batch], &[masked.len()]));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in masked.iter().enumerate() {
        for (&p, &t) in m.positions.iter().zip(&m.original_ids) {
            if p >= fused.len {
                return Err(Error::Index {
                    what: "masked position".into(),
                    index: p,
                    bound: fused.len,
                });
            }
            rows.push(b * fused.len + p);
            targets.push(t);
        }
    }
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let selected = tape.gather_rows(fused.states, &rows)?;
    let logits = head.forward(tape, store, selected)?;
    let vocab = tape.shape(logits)[1];
    let divisor = if literal_scaling {
        (rows.len() * vocab) as f64
    } else {
        rows.len() as f64
    };
    tape.cross_entropy_sum(logits, &targets, divisor)
}
