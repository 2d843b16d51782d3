use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]"];

/// Token ↔ id bijection. Ids `0..5` are the reserved special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from caption words; words are sorted for a stable id assignment.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(split_words).collect();
        Self::from_tokens(words.into_iter().collect()).expect("split words are never special")
    }

    /// Vocabulary with the special tokens followed by `words` in order.
    pub fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut v = Self {
            tokens,
            ids: HashMap::new(),
        };
        v.reindex()?;
        if v.len() < 6 {
            return Err(Error::Contract("vocabulary needs at least one content token".into()));
        }
        Ok(v)
    }

    fn reindex(&mut self) -> Result<()> {
        self.ids.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.ids.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    /// Restores the reverse index after deserialisation.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.reindex()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Lower-cases, splits on whitespace and punctuation, brackets with
    /// `[SOS]`/`[EOS]` and pads to exactly `max_len` ids. Over-long captions
    /// are truncated so that `[EOS]` stays the last content token.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::Contract("cannot tokenize empty text".into()));
        }
        if max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
        }
        let mut ids = vec![SOS];
        ids.extend(
            split_words(text)
                .take(max_len - 2)
                .map(|w| self.id(&w).unwrap_or(UNK)),
        );
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lower-cased word pieces; every punctuation character is its own token.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().flat_map(|chunk| {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    })
}
