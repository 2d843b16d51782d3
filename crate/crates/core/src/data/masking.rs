use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, MASK, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// Masked token indices with the ground-truth id at each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskedPositions {
    pub positions: Vec<usize>,
    pub original_ids: Vec<usize>,
}

impl MaskedPositions {
    pub fn new(positions: Vec<usize>, original_ids: Vec<usize>, len: usize) -> Result<Self> {
        if positions.len() != original_ids.len() {
            return Err(Error::shape("masked_positions", &[positions.len()], &[original_ids.len()]));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &positions {
            if p >= len {
                return Err(Error::Index {
                    what: "masked position".into(),
                    index: p,
                    bound: len,
                });
            }
            if !seen.insert(p) {
                return Err(Error::Contract(format!("masked position {p} repeated")));
            }
        }
        Ok(Self {
            positions,
            original_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// What happened to a selected token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Mask,
    Random,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedCaption {
    pub input_ids: Vec<usize>,
    pub masked: MaskedPositions,
    pub replacements: Vec<Replacement>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Per-token selection probability.
    pub mask_prob: f64,
    /// Among selected tokens: probability of `[MASK]`.
    pub mask_token_prob: f64,
    /// Among selected tokens: probability of a random content token.
    pub random_token_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
        }
    }
}

/// BERT-style masking of content tokens. Special tokens are never selected;
/// tokens left unchanged by the 10% rule still count as masked positions.
pub fn mask_tokens(ids: &[usize], vocab: &Vocab, rng: &mut impl Rng, cfg: &MaskConfig) -> MaskedCaption {
    let first_content = SPECIAL_TOKENS.len();
    let mut input_ids = ids.to_vec();
    let mut positions = Vec::new();
    let mut original_ids = Vec::new();
    let mut replacements = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) {
            continue;
        }
        if !rng.random_bool(cfg.mask_prob) {
            continue;
        }
        let r: f64 = rng.random();
        let kind = if r < cfg.mask_token_prob {
            input_ids[i] = MASK;
            Replacement::Mask
        } else if r < cfg.mask_token_prob + cfg.random_token_prob && vocab.len() > first_content {
            input_ids[i] = rng.random_range(first_content..vocab.len());
            Replacement::Random
        } else {
            Replacement::Unchanged
        };
        positions.push(i);
        original_ids.push(id);
        replacements.push(kind);
    }
    MaskedCaption {
        input_ids,
        masked: MaskedPositions {
            positions,
            original_ids,
        },
        replacements,
    }
}
