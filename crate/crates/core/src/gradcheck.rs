//! Central finite-difference gradient checks for every differentiable
//! operation, shared by the `gradcheck` command and the test suites.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::MaskedPositions;
use crate::encoders::{ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::data::vocab::{EOS, PAD, SOS};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::fusion::{irr_loss, FusionConfig, FusionEncoder, FusionVariant, MlmHead};
use crate::losses::{infonce_loss, sdm_loss, IdClassifier, SdmConfig};
use crate::nn::{self, LayerNorm, MultiHeadAttention};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Absolute denominator floor. Central differences at `STEP` carry roundoff
/// of about `1e-16 * |f| / STEP`, i.e. ~1e-10 for the O(10) test functions,
/// and gradients that vanish identically (key biases under softmax) sit at
/// that noise level.
pub const REL_FLOOR: f64 = 1e-5;
/// Entries far smaller than the largest gradient entry of their tensor are
/// measured against `TENSOR_SCALE_FLOOR` times that largest entry.
pub const TENSOR_SCALE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_FLOOR)
}

/// Outcome of checking one function at one parameter point.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckStats {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f` with central differences for
/// every parameter in `store`. With `max_per_param`, only that many randomly
/// chosen entries of each parameter are perturbed.
pub fn check_store<F>(store: &mut ParamStore, f: F, max_per_param: Option<usize>, rng: &mut impl Rng) -> Result<CheckStats>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    store.zero_grad();
    tape.backward(loss)?.accumulate(&tape, store);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).item())
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut stats = CheckStats::default();
    for id in ids {
        let n = store.get(id).value.numel();
        let entries: Vec<usize> = match max_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let scale = store.get(id).grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = REL_FLOOR.max(TENSOR_SCALE_FLOOR * scale);
        for e in entries {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error_with_floor(store.get(id).grad[e], numeric, floor);
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    component: format!("gradient of {}", store.get(id).name),
                    step: e,
                });
            }
            stats.max_rel_error = stats.max_rel_error.max(err);
            stats.checked += 1;
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub op: String,
    pub cases: usize,
    pub checked_entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

type Case = fn(&mut ChaCha8Rng) -> Result<CheckStats>;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), nn::normal(rng, n, scale)).expect("positive shape")
}

fn add_input(store: &mut ParamStore, name: &str, rng: &mut impl Rng, shape: &[usize]) -> ParamId {
    store.add(name, random_tensor(rng, shape, 1.0), ParamGroup::Backbone)
}

/// Reduces a tensor-valued output to a scalar with fixed random weights, so
/// that no output direction is left untested.
fn project(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let a = add_input(&mut s, "a", rng, &[3, 4]);
    let b = add_input(&mut s, "b", rng, &[4, 2]);
    let w = random_tensor(rng, &[3, 2], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let y = t.matmul(a, b)?;
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "x", rng, &[3, 5]);
    let w = random_tensor(rng, &[3, 5], 1.0);
    let axis = rng.random_range(0..2);
    let log = rng.random_bool(0.5);
    check_store(
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = if log { t.log_softmax(x, axis)? } else { t.softmax(x, axis)? };
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "x", rng, &[3, 6]);
    let ln = LayerNorm::new(&mut s, "ln", 6, ParamGroup::Backbone);
    // move gain/bias away from their (1, 0) init
    for p in s.iter_mut().filter(|p| p.name.starts_with("ln.")) {
        for v in p.value.data_mut() {
            *v += nn::normal(rng, 1, 0.5)[0];
        }
    }
    let w = random_tensor(rng, &[3, 6], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = ln.forward(t, s, x)?;
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_gelu(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "x", rng, &[2, 5]);
    let w = random_tensor(rng, &[2, 5], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = t.gelu(x);
            let y = t.exp(y);
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "logits", rng, &[4, 5]);
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    check_store(
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            t.cross_entropy(x, &targets)
        },
        None,
        rng,
    )
}

fn case_normalize_rows(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "x", rng, &[3, 4]);
    let w = random_tensor(rng, &[3, 4], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = t.normalize_rows(x)?;
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_attention(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let (batch, heads, dim) = (2, 2, 4);
    let causal = rng.random_bool(0.5);
    let (lq, lk) = if causal { (3, 3) } else { (3, 4) };
    let mut s = ParamStore::new();
    let q = add_input(&mut s, "q", rng, &[batch * lq, dim]);
    let k = add_input(&mut s, "k", rng, &[batch * lk, dim]);
    let v = add_input(&mut s, "v", rng, &[batch * lk, dim]);
    let w = random_tensor(rng, &[batch * lq, dim], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
            let y = t.attention(q, k, v, batch, heads, causal)?;
            project(t, y, &w)
        },
        None,
        rng,
    )
}

fn case_mca(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let (d, l, n) = (8, 3, 5);
    let mut s = ParamStore::new();
    let x = add_input(&mut s, "text", rng, &[l, d]);
    let c = add_input(&mut s, "image", rng, &[n, d]);
    let mca = MultiHeadAttention::new(&mut s, "mca", d, 2, ParamGroup::NewModule, rng);
    let w = random_tensor(rng, &[l, d], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let (x, c) = (t.param(s, x), t.param(s, c));
            let y = mca.forward(t, s, x, c, 1, false)?.output;
            project(t, y, &w)
        },
        Some(6),
        rng,
    )
}

const FUSION_BATCH: usize = 2;
const FUSION_TEXT: (usize, usize) = (4, 6);
const FUSION_IMAGE: (usize, usize) = (3, 5);

fn fusion_setup(variant: FusionVariant, rng: &mut ChaCha8Rng) -> Result<(ParamStore, ParamId, ParamId, FusionEncoder)> {
    let mut s = ParamStore::new();
    let text = add_input(&mut s, "text", rng, &[FUSION_BATCH * FUSION_TEXT.0, FUSION_TEXT.1]);
    let image = add_input(&mut s, "image", rng, &[FUSION_BATCH * FUSION_IMAGE.0, FUSION_IMAGE.1]);
    let cfg = FusionConfig {
        variant,
        hidden_dim: 8,
        num_heads: 2,
        num_blocks: 1,
    };
    let f = FusionEncoder::new(cfg, FUSION_TEXT.1, FUSION_IMAGE.1, &mut s, rng, "fusion")?;
    Ok((s, text, image, f))
}

fn case_fusion(variant: FusionVariant, rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let (mut s, text, image, f) = fusion_setup(variant, rng)?;
    let w = random_tensor(rng, &[FUSION_BATCH * FUSION_TEXT.0, 8], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let (x, c) = (t.param(s, text), t.param(s, image));
            let y = f.forward(t, s, x, c, FUSION_BATCH)?.states;
            project(t, y, &w)
        },
        Some(4),
        rng,
    )
}

fn case_fusion_ours(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    case_fusion(FusionVariant::Ours, rng)
}

fn case_fusion_co(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    case_fusion(FusionVariant::CoAttention, rng)
}

fn case_fusion_merged(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    case_fusion(FusionVariant::MergedAttention, rng)
}

fn case_irr(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let vocab = 7;
    let (mut s, text, image, f) = fusion_setup(FusionVariant::Ours, rng)?;
    let head = MlmHead::new(&mut s, "mlm", 8, vocab, rng);
    let masked: Vec<MaskedPositions> = (0..FUSION_BATCH)
        .map(|_| {
            let k = rng.random_range(1..=FUSION_TEXT.0);
            let positions = sample(rng, FUSION_TEXT.0, k).into_vec();
            let ids = positions.iter().map(|_| rng.random_range(0..vocab)).collect();
            MaskedPositions::new(positions, ids, FUSION_TEXT.0)
        })
        .collect::<Result<_>>()?;
    let literal = rng.random_bool(0.5);
    check_store(
        &mut s,
        |t, s| {
            let (x, c) = (t.param(s, text), t.param(s, image));
            let fused = f.forward(t, s, x, c, FUSION_BATCH)?;
            irr_loss(t, s, &head, &fused, &masked, literal)
        },
        Some(4),
        rng,
    )
}

fn random_labels(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn case_sdm(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let n = rng.random_range(1..=5);
    let mut s = ParamStore::new();
    let a = add_input(&mut s, "image", rng, &[n, 6]);
    let b = add_input(&mut s, "text", rng, &[n, 6]);
    let labels = random_labels(rng, n);
    let cfg = SdmConfig {
        reverse_kl: rng.random_bool(0.25),
        ..SdmConfig::default()
    };
    check_store(
        &mut s,
        |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            sdm_loss(t, a, b, &labels, &cfg)
        },
        None,
        rng,
    )
}

fn case_id(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let (n, d, k) = (4, 5, 6);
    let mut s = ParamStore::new();
    let a = add_input(&mut s, "image", rng, &[n, d]);
    let b = add_input(&mut s, "text", rng, &[n, d]);
    let clf = IdClassifier::new(&mut s, "id", d, k, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    check_store(
        &mut s,
        |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            clf.loss(t, s, a, b, &labels)
        },
        None,
        rng,
    )
}

fn case_infonce(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let n = rng.random_range(2..=5);
    let mut s = ParamStore::new();
    let a = add_input(&mut s, "image", rng, &[n, 6]);
    let b = add_input(&mut s, "text", rng, &[n, 6]);
    check_store(
        &mut s,
        |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            infonce_loss(t, a, b, 0.02)
        },
        None,
        rng,
    )
}

fn case_image_encoder(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let cfg = ImageEncoderConfig {
        image_height: 8,
        image_width: 4,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        joint_dim: 6,
        ..ImageEncoderConfig::toy()
    };
    let mut s = ParamStore::new();
    let enc = ImageEncoder::new(cfg, &mut s, rng, "image")?;
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 4, 3, (0..96).map(|_| rng.random()).collect()))
        .collect::<Result<_>>()?;
    let w = random_tensor(rng, &[2, 6], 1.0);
    check_store(
        &mut s,
        |t, s| {
            let refs: Vec<&Image> = images.iter().collect();
            let out = enc.forward(t, s, &refs)?;
            project(t, out.global, &w)
        },
        Some(4),
        rng,
    )
}

fn case_text_encoder(rng: &mut ChaCha8Rng) -> Result<CheckStats> {
    let (vocab, len) = (9, 5);
    let cfg = TextEncoderConfig {
        vocab_size: vocab,
        max_len: len,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        joint_dim: 6,
        causal: true,
    };
    let mut s = ParamStore::new();
    let enc = TextEncoder::new(cfg, &mut s, rng, "text")?;
    let ids: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let content = rng.random_range(1..=len - 2);
            let mut seq = vec![SOS];
            seq.extend((0..content).map(|_| rng.random_range(5..vocab)));
            seq.push(EOS);
            seq.resize(len, PAD);
            seq
        })
        .collect();
    let w = random_tensor(rng, &[2, 6], 1.0);
    let causal = rng.random_bool(0.5);
    check_store(
        &mut s,
        |t, s| {
            let out = enc.forward(t, s, &ids, causal)?;
            project(t, out.global, &w)
        },
        Some(4),
        rng,
    )
}

/// Every checked operation, in report order.
pub const OPS: [(&str, Case); 17] = [
    ("matmul", case_matmul),
    ("softmax", case_softmax),
    ("layer_norm", case_layer_norm),
    ("gelu", case_gelu),
    ("cross_entropy", case_cross_entropy),
    ("normalize_rows", case_normalize_rows),
    ("attention", case_attention),
    ("mca", case_mca),
    ("fusion_ours", case_fusion_ours),
    ("fusion_co_attention", case_fusion_co),
    ("fusion_merged_attention", case_fusion_merged),
    ("irr_loss", case_irr),
    ("sdm_loss", case_sdm),
    ("id_loss", case_id),
    ("infonce_loss", case_infonce),
    ("image_encoder", case_image_encoder),
    ("text_encoder", case_text_encoder),
];

/// Runs `cases` seeded checks of every operation. Case `i` of an op uses a
/// generator seeded from `(seed, op index, i)`.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::with_capacity(OPS.len());
    for (k, (name, case)) in OPS.iter().enumerate() {
        let start = Instant::now();
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in 0..cases {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ i as u64);
            let stats = case(&mut rng)?;
            worst = worst.max(stats.max_rel_error);
            checked += stats.checked;
        }
        out.push(GradCheckResult {
            op: name.to_string(),
            cases,
            checked_entries: checked,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}
