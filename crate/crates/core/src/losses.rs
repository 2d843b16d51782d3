//! Global alignment objectives between image and text embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, Var};

/// Pairwise cosine similarities, `[n_images, n_texts]`.
pub fn cosine_similarity_matrix(tape: &mut Tape, image: Var, text: Var) -> Result<Var> {
    let a = tape.normalize_rows(image)?;
    let b = tape.normalize_rows(text)?;
    let bt = tape.transpose(b)?;
    tape.matmul(a, bt)
}

/// Identity agreement `y` and its row-normalized form `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMatrix {
    pub y: Tensor,
    pub q: Tensor,
}

impl MatchMatrix {
    pub fn new(labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Contract("match matrix needs at least one label".into()));
        }
        let mut y = vec![0.0; n * n];
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            let count = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
            for j in 0..n {
                if labels[i] == labels[j] {
                    y[i * n + j] = 1.0;
                    q[i * n + j] = 1.0 / count;
                }
            }
        }
        Ok(Self {
            y: Tensor::new(vec![n, n], y)?,
            q: Tensor::new(vec![n, n], q)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdmConfig {
    pub temperature: f64,
    pub epsilon: f64,
    /// Use KL(q‖p) instead of KL(p‖q).
    pub reverse_kl: bool,
}

impl Default for SdmConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            epsilon: 1e-8,
            reverse_kl: false,
        }
    }
}

impl SdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "sdm needs temperature > 0 and epsilon >= 0, got {} and {}",
                self.temperature, self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_pair_batch(tape: &Tape, image: Var, text: Var, labels: &[usize]) -> Result<()> {
    let (si, st) = (tape.shape(image), tape.shape(text));
    if si.len() != 2 || st.len() != 2 || si != st || si[0] != labels.len() {
        return Err(Error::shape("pair batch", si, st));
    }
    Ok(())
}

/// One direction of the matching loss: rows of `logits` against rows of `q`.
fn kl_rows(tape: &mut Tape, logits: Var, q: &Tensor, cfg: &SdmConfig) -> Result<Var> {
    let n = q.shape()[0] as f64;
    let log_p = tape.log_softmax(logits, 1)?;
    let log_q = tape.constant(Tensor::new(
        q.shape().to_vec(),
        q.data().iter().map(|v| (v + cfg.epsilon).ln()).collect(),
    )?);
    let terms = if cfg.reverse_kl {
        let qv = tape.constant(q.clone());
        let diff = tape.sub(log_q, log_p)?;
        tape.mul(qv, diff)?
    } else {
        let p = tape.softmax(logits, 1)?;
        let diff = tape.sub(log_p, log_q)?;
        tape.mul(p, diff)?
    };
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / n))
}

/// Similarity distribution matching: image-to-text plus text-to-image KL
/// between softmax(cos/τ) and the label matching distribution.
pub fn sdm_loss(tape: &mut Tape, image: Var, text: Var, labels: &[usize], cfg: &SdmConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair_batch(tape, image, text, labels)?;
    let m = MatchMatrix::new(labels)?;
    let sim = cosine_similarity_matrix(tape, image, text)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature);
    let logits_t = tape.transpose(logits)?;
    let i2t = kl_rows(tape, logits, &m.q, cfg)?;
    // y is symmetric, so the text-to-image target is the same q.
    let t2i = kl_rows(tape, logits_t, &m.q, cfg)?;
    tape.add(i2t, t2i)
}

/// Symmetric cross-entropy over `cos/τ` with the diagonal as targets.
pub fn infonce_loss(tape: &mut Tape, image: Var, text: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("infonce temperature must be > 0, got {temperature}")));
    }
    let (si, st) = (tape.shape(image).to_vec(), tape.shape(text).to_vec());
    if si.len() != 2 || si != st {
        return Err(Error::shape("infonce", &si, &st));
    }
    let targets: Vec<usize> = (0..si[0]).collect();
    let sim = cosine_similarity_matrix(tape, image, text)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let logits_t = tape.transpose(logits)?;
    let a = tape.cross_entropy(logits, &targets)?;
    let b = tape.cross_entropy(logits_t, &targets)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Linear identity classifier shared by both modalities.
#[derive(Clone, Debug)]
pub struct IdClassifier {
    pub linear: Linear,
    pub num_identities: usize,
}

impl IdClassifier {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, num_identities: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, name, dim, num_identities, true, ParamGroup::NewModule, rng),
            num_identities,
        }
    }

    /// Mean of the image-branch and text-branch cross-entropy.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, image: Var, text: Var, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_identities) {
            return Err(Error::Index {
                what: "identity label".into(),
                index: bad,
                bound: self.num_identities,
            });
        }
        let li = self.linear.forward(tape, store, image)?;
        let lt = self.linear.forward(tape, store, text)?;
        id_loss_from_logits(tape, li, lt, labels)
    }
}

/// Mean of two cross-entropies against the same identity labels.
pub fn id_loss_from_logits(tape: &mut Tape, image_logits: Var, text_logits: Var, labels: &[usize]) -> Result<Var> {
    let a = tape.cross_entropy(image_logits, labels)?;
    let b = tape.cross_entropy(text_logits, labels)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub sdm: bool,
    pub id: bool,
    pub irr: bool,
    pub infonce: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::full()
    }
}

impl LossToggles {
    pub fn full() -> Self {
        Self {
            sdm: true,
            id: true,
            irr: true,
            infonce: false,
        }
    }

    pub fn any(&self) -> bool {
        self.sdm || self.id || self.irr || self.infonce
    }

    /// Short label such as `sdm+id+irr`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.infonce, "infonce"), (self.sdm, "sdm"), (self.id, "id"), (self.irr, "irr")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Component losses of one step; `None` for components not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub sdm: Option<Var>,
    pub id: Option<Var>,
    pub irr: Option<Var>,
    pub infonce: Option<Var>,
}

impl LossParts {
    fn named(&self) -> [(&'static str, Option<Var>); 4] {
        [
            ("irr", self.irr),
            ("sdm", self.sdm),
            ("id", self.id),
            ("infonce", self.infonce),
        ]
    }
}

/// Unweighted sum of the enabled components.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, toggles: &LossToggles) -> Result<Var> {
    if !toggles.any() {
        return Err(Error::Config("every loss component is switched off".into()));
    }
    let enabled = [toggles.irr, toggles.sdm, toggles.id, toggles.infonce];
    let mut total: Option<Var> = None;
    for ((name, var), on) in parts.named().into_iter().zip(enabled) {
        if !on {
            continue;
        }
        let v = var.ok_or_else(|| Error::Contract(format!("loss {name} enabled but not computed")))?;
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
    }
    Ok(total.expect("at least one component enabled"))
}
