//! Dual-stream encoders: a patch-based image transformer and a causal text
//! transformer, each projecting one global token into the joint space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{EOS, SOS};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{self, Block, LayerNorm};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub joint_dim: usize,
    /// Per-channel input normalization applied before patch embedding.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

/// CLIP preprocessing statistics.
pub const CLIP_PIXEL_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const CLIP_PIXEL_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ImageEncoderConfig {
    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 16,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            joint_dim: 64,
            pixel_mean: CLIP_PIXEL_MEAN.to_vec(),
            pixel_std: CLIP_PIXEL_STD.to_vec(),
        }
    }

    /// ViT-B/16 geometry at the 384×128 person-crop resolution.
    pub fn production() -> Self {
        Self {
            image_height: 384,
            image_width: 128,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            joint_dim: 512,
            pixel_mean: CLIP_PIXEL_MEAN.to_vec(),
            pixel_std: CLIP_PIXEL_STD.to_vec(),
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible into {p}×{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "image embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.pixel_mean.len() != self.channels || self.pixel_std.len() != self.channels {
            return Err(Error::Config(format!(
                "pixel_mean and pixel_std need one entry per channel ({})",
                self.channels
            )));
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub joint_dim: usize,
    pub causal: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self::toy(64)
    }
}

impl TextEncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 12,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            joint_dim: 64,
            causal: true,
        }
    }

    pub fn production(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 77,
            embed_dim: 512,
            num_layers: 12,
            num_heads: 8,
            joint_dim: 512,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config(format!("vocab_size must be at least 6, got {}", self.vocab_size)));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "text embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Splits an image into non-overlapping `p×p` patches in raster order; each
/// row is one patch flattened as (row, column, channel).
pub fn patchify(image: &Image, p: usize) -> Result<Tensor> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible into {p}×{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = image.idx(py * p + y, px * p, 0);
                data.extend_from_slice(&image.data[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], data)
}

pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, p: usize) -> Result<Image> {
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != [gh * gw, p * p * channels] || gh * p != height || gw * p != width {
        return Err(Error::shape("unpatchify", patches.shape(), &[height, width, channels]));
    }
    let mut img = Image::zeros(height, width, channels);
    for (i, row) in patches.data().chunks(p * p * channels).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..p {
            let start = img.idx(py * p + y, px * p, 0);
            img.data[start..start + p * channels].copy_from_slice(&row[y * p * channels..(y + 1) * p * channels]);
        }
    }
    Ok(img)
}

/// Batched encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// `[batch, joint_dim]`
    pub global: Var,
    /// `[batch*len, embed_dim]` final hidden states (image: class token excluded)
    pub tokens: Var,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub global_embed: Vec<f64>,
    pub token_states: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub global_embed: Vec<f64>,
    pub token_states: Tensor,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch_embed: ParamId,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    pub proj: ParamId,
}

impl ImageEncoder {
    pub fn new(config: ImageEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * config.channels;
        let n = config.num_patches();
        let patch_embed = store.add(
            format!("{name}.patch_embed"),
            Tensor::new(vec![patch_dim, d], nn::normal(rng, patch_dim * d, (patch_dim as f64).powf(-0.5)))?,
            g,
        );
        let class_token = store.add(
            format!("{name}.class_token"),
            Tensor::new(vec![1, d], nn::trunc_normal(rng, d, 0.02))?,
            g,
        );
        let pos_embed = store.add(
            format!("{name}.pos_embed"),
            Tensor::new(vec![n + 1, d], nn::trunc_normal(rng, (n + 1) * d, 0.02))?,
            g,
        );
        let ln_pre = LayerNorm::new(store, &format!("{name}.ln_pre"), d, g);
        let blocks = (0..config.num_layers)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), d, config.num_heads, g, rng))
            .collect();
        let ln_post = LayerNorm::new(store, &format!("{name}.ln_post"), d, g);
        let proj = store.add(
            format!("{name}.proj"),
            Tensor::new(vec![d, config.joint_dim], nn::normal(rng, d * config.joint_dim, (d as f64).powf(-0.5)))?,
            g,
        );
        Ok(Self {
            config,
            patch_embed,
            class_token,
            pos_embed,
            ln_pre,
            blocks,
            ln_post,
            proj,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: &[&Image]) -> Result<EncodedBatch> {
        let cfg = &self.config;
        let b = images.len();
        if b == 0 {
            return Err(Error::Contract("empty image batch".into()));
        }
        let n = cfg.num_patches();
        let mut patches = Vec::new();
        for img in images {
            let expected = [cfg.image_height, cfg.image_width, cfg.channels];
            if img.shape() != expected {
                return Err(Error::shape("encode_image", &img.shape(), &expected));
            }
            let mut flat = patchify(img, cfg.patch_size)?.into_data();
            for (i, v) in flat.iter_mut().enumerate() {
                let c = i % cfg.channels;
                *v = (*v - cfg.pixel_mean[c]) / cfg.pixel_std[c];
            }
            patches.extend(flat);
        }
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let patches = tape.constant(Tensor::new(vec![b * n, patch_dim], patches)?);
        let w = tape.param(store, self.patch_embed);
        let tokens = tape.matmul(patches, w)?;
        let cls = tape.param(store, self.class_token);
        let stacked = tape.concat_rows(&[cls, tokens])?;
        let mut order = Vec::with_capacity(b * (n + 1));
        for s in 0..b {
            order.push(0);
            order.extend(1 + s * n..1 + (s + 1) * n);
        }
        let seq = tape.gather_rows(stacked, &order)?;
        let pos = tape.param(store, self.pos_embed);
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..n + 1).collect();
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let mut x = tape.add(seq, pos)?;
        x = self.ln_pre.forward(tape, store, x)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, b, false)?;
        }
        x = self.ln_post.forward(tape, store, x)?;
        let cls_rows: Vec<usize> = (0..b).map(|s| s * (n + 1)).collect();
        let cls_state = tape.gather_rows(x, &cls_rows)?;
        let proj = tape.param(store, self.proj);
        let global = tape.matmul(cls_state, proj)?;
        let token_rows: Vec<usize> = (0..b).flat_map(|s| s * (n + 1) + 1..(s + 1) * (n + 1)).collect();
        let tokens = tape.gather_rows(x, &token_rows)?;
        Ok(EncodedBatch {
            global,
            tokens,
            batch: b,
            len: n,
        })
    }

    /// Encodes one image outside of any training graph.
    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<EncodedImage> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &[image])?;
        Ok(EncodedImage {
            global_embed: tape.value(out.global).data().to_vec(),
            token_states: tape.value(out.tokens).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub proj: ParamId,
}

/// Index of the first `[EOS]` in a token sequence.
pub fn eos_position(ids: &[usize]) -> Result<usize> {
    ids.iter()
        .position(|&t| t == EOS)
        .ok_or_else(|| Error::Contract("token sequence has no [EOS]".into()))
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let d = config.embed_dim;
        let token_embed = store.add(
            format!("{name}.token_embed"),
            Tensor::new(vec![config.vocab_size, d], nn::trunc_normal(rng, config.vocab_size * d, 0.02))?,
            g,
        );
        let pos_embed = store.add(
            format!("{name}.pos_embed"),
            Tensor::new(vec![config.max_len, d], nn::trunc_normal(rng, config.max_len * d, 0.02))?,
            g,
        );
        let blocks = (0..config.num_layers)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), d, config.num_heads, g, rng))
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d, g);
        let proj = store.add(
            format!("{name}.proj"),
            Tensor::new(vec![d, config.joint_dim], nn::normal(rng, d * config.joint_dim, (d as f64).powf(-0.5)))?,
            g,
        );
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            blocks,
            ln_final,
            proj,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<usize> {
        let l = self.config.max_len;
        if ids.len() != l {
            return Err(Error::shape("encode_text", &[ids.len()], &[l]));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id".into(),
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        if ids[0] != SOS {
            return Err(Error::Contract("token sequence must start with [SOS]".into()));
        }
        eos_position(ids)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[Vec<usize>], causal: bool) -> Result<EncodedBatch> {
        let b = ids.len();
        if b == 0 {
            return Err(Error::Contract("empty text batch".into()));
        }
        let l = self.config.max_len;
        let mut eos_rows = Vec::with_capacity(b);
        for (s, seq) in ids.iter().enumerate() {
            eos_rows.push(s * l + self.check_ids(seq)?);
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let table = tape.param(store, self.token_embed);
        let tok = tape.gather_rows(table, &flat)?;
        let pos = tape.param(store, self.pos_embed);
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let mut x = tape.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, b, causal)?;
        }
        x = self.ln_final.forward(tape, store, x)?;
        let eos_state = tape.gather_rows(x, &eos_rows)?;
        let proj = tape.param(store, self.proj);
        let global = tape.matmul(eos_state, proj)?;
        Ok(EncodedBatch {
            global,
            tokens: x,
            batch: b,
            len: l,
        })
    }

    pub fn encode(&self, store: &ParamStore, ids: &[usize], causal: bool) -> Result<EncodedText> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &[ids.to_vec()], causal)?;
        Ok(EncodedText {
            global_embed: tape.value(out.global).data().to_vec(),
            token_states: tape.value(out.tokens).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn unit_patches_are_pixels() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tall_image_two_patches() {
        let img = Image::new(4, 2, 1, (1..=8).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert_eq!(p.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.row(1), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn patchify_round_trip() {
        let img = random_image(8, 4, 3, 1);
        for p in [1, 2, 4] {
            let back = unpatchify(&patchify(&img, p).unwrap(), 8, 4, 3, p).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn non_divisible_is_config_error() {
        let img = random_image(6, 4, 1, 1);
        assert!(matches!(patchify(&img, 4), Err(Error::Config(_))));
    }

    fn small_image_config() -> ImageEncoderConfig {
        ImageEncoderConfig {
            image_height: 8,
            image_width: 4,
            channels: 3,
            patch_size: 2,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            joint_dim: 6,
            ..ImageEncoderConfig::toy()
        }
    }

    #[test]
    fn zero_image_zero_projection_gives_zero_embedding() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(small_image_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0), "image").unwrap();
        for id in [enc.pos_embed, enc.proj] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = enc.encode(&store, &Image::zeros(8, 4, 3)).unwrap();
        assert!(out.global_embed.iter().all(|&v| v == 0.0));
        assert_eq!(out.token_states.shape(), &[8, 8]);
    }

    #[test]
    fn distinct_images_give_distinct_embeddings() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(small_image_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0), "image").unwrap();
        let a = enc.encode(&store, &random_image(8, 4, 3, 1)).unwrap();
        let b = enc.encode(&store, &random_image(8, 4, 3, 2)).unwrap();
        assert_ne!(a.global_embed, b.global_embed);
        // pure function of (input, params)
        assert_eq!(a, enc.encode(&store, &random_image(8, 4, 3, 1)).unwrap());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(small_image_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0), "image").unwrap();
        assert!(matches!(enc.encode(&store, &Image::zeros(4, 4, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn permuting_patches_changes_states() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(small_image_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0), "image").unwrap();
        let img = random_image(8, 4, 3, 5);
        let mut patches = patchify(&img, 2).unwrap();
        let (r, c) = patches.dims2().unwrap();
        let rows: Vec<Vec<f64>> = (0..r).map(|i| patches.row((i + 1) % r).to_vec()).collect();
        patches = Tensor::from_rows(&rows).unwrap();
        assert_eq!(patches.shape(), &[r, c]);
        let permuted = unpatchify(&patches, 8, 4, 3, 2).unwrap();
        let a = enc.encode(&store, &img).unwrap();
        let b = enc.encode(&store, &permuted).unwrap();
        // same multiset of patches, different positions
        let mut sa: Vec<f64> = a.token_states.data().to_vec();
        let mut sb: Vec<f64> = b.token_states.data().to_vec();
        assert_ne!(sa, sb);
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        assert_ne!(sa, sb);
    }

    fn small_text() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: 12,
            max_len: 6,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            joint_dim: 4,
            causal: true,
        };
        let enc = TextEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3), "text").unwrap();
        (enc, store)
    }

    #[test]
    fn causal_mask_hides_tokens_after_eos() {
        let (enc, store) = small_text();
        let a = enc.encode(&store, &[SOS, 7, 8, EOS, 9, 10], true).unwrap();
        let b = enc.encode(&store, &[SOS, 7, 8, EOS, 11, 5], true).unwrap();
        assert_eq!(a.global_embed, b.global_embed);
        assert_eq!(a.token_states.data()[..4 * 8], b.token_states.data()[..4 * 8]);
        let c = enc.encode(&store, &[SOS, 7, 8, EOS, 9, 10], false).unwrap();
        let d = enc.encode(&store, &[SOS, 7, 8, EOS, 11, 5], false).unwrap();
        assert_ne!(c.global_embed, d.global_embed);
        assert_ne!(a.token_states, c.token_states);
    }

    #[test]
    fn text_contract_errors() {
        let (enc, store) = small_text();
        assert!(matches!(enc.encode(&store, &[SOS, 7, 8, 9, 10, 11], true), Err(Error::Contract(_))));
        assert!(matches!(enc.encode(&store, &[7, SOS, 8, EOS, 0, 0], true), Err(Error::Contract(_))));
        assert!(matches!(enc.encode(&store, &[SOS, 70, EOS, 0, 0, 0], true), Err(Error::Index { .. })));
        assert!(matches!(enc.encode(&store, &[SOS, EOS], true), Err(Error::Shape { .. })));
    }
}
