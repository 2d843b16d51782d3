//! The full retrieval model: both encoders plus the training-only fusion
//! branch, MLM head and identity classifier.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Image, Split, Vocab};
use crate::encoders::{ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusedStates, FusionConfig, FusionEncoder, MlmHead};
use crate::losses::IdClassifier;
use crate::metrics::{self, RetrievalReport, SimilarityTable};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const ENCODE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
    pub num_identities: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        if self.image.joint_dim != self.text.joint_dim {
            return Err(Error::Config(format!(
                "image joint_dim {} differs from text joint_dim {}",
                self.image.joint_dim, self.text.joint_dim
            )));
        }
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct IrraModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub fusion: FusionEncoder,
    pub mlm_head: MlmHead,
    pub id_classifier: IdClassifier,
    fusion_calls: AtomicUsize,
}

impl IrraModel {
    pub fn new(config: ModelConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "text.vocab_size {} does not match the vocabulary ({} tokens)",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(config.image.clone(), &mut store, rng, "image")?;
        let text_encoder = TextEncoder::new(config.text.clone(), &mut store, rng, "text")?;
        let fusion = FusionEncoder::new(
            config.fusion.clone(),
            config.text.embed_dim,
            config.image.embed_dim,
            &mut store,
            rng,
            "fusion",
        )?;
        let mlm_head = MlmHead::new(&mut store, "mlm_head", config.fusion.hidden_dim, vocab.len(), rng);
        let id_classifier = IdClassifier::new(&mut store, "id_classifier", config.image.joint_dim, config.num_identities, rng);
        Ok(Self {
            config,
            vocab,
            store,
            image_encoder,
            text_encoder,
            fusion,
            mlm_head,
            id_classifier,
            fusion_calls: AtomicUsize::new(0),
        })
    }

    /// Runs the fusion encoder; every call is counted.
    pub fn fuse(&self, tape: &mut Tape, text_tokens: Var, image_tokens: Var, batch: usize) -> Result<FusedStates> {
        self.fusion_calls.fetch_add(1, Ordering::Relaxed);
        self.fusion.forward(tape, &self.store, text_tokens, image_tokens, batch)
    }

    pub fn fusion_calls(&self) -> usize {
        self.fusion_calls.load(Ordering::Relaxed)
    }

    pub fn reset_fusion_calls(&self) {
        self.fusion_calls.store(0, Ordering::Relaxed);
    }

    /// Parameter elements registered under the fusion encoder.
    pub fn fusion_param_count(&self) -> usize {
        self.store.count_prefix("fusion.")
    }

    /// Global image embeddings `[n, joint_dim]`, computed without gradients.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        let chunks: Vec<Vec<f64>> = images
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let out = self.image_encoder.forward(&mut tape, &self.store, chunk)?;
                Ok(tape.value(out.global).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Tensor::new(vec![images.len(), self.config.image.joint_dim], chunks.concat())
    }

    /// Global caption embeddings `[n, joint_dim]` from token ids.
    pub fn encode_texts(&self, ids: &[Vec<usize>]) -> Result<Tensor> {
        let causal = self.config.text.causal;
        let chunks: Vec<Vec<f64>> = ids
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let out = self.text_encoder.forward(&mut tape, &self.store, chunk, causal)?;
                Ok(tape.value(out.global).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Tensor::new(vec![ids.len(), self.config.text.joint_dim], chunks.concat())
    }

    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(caption, self.config.text.max_len)
    }

    /// Caption-to-image cosine similarities for one dataset split. Queries
    /// are every caption of the split, the gallery is every image.
    pub fn split_similarity(&self, dataset: &Dataset, split: Split) -> Result<SimilarityTable> {
        let records = dataset.split(split);
        if records.is_empty() {
            return Err(Error::Contract(format!("split {split} is empty")));
        }
        let images = records.iter().map(|r| dataset.image(r)).collect::<Result<Vec<_>>>()?;
        let gallery_ids: Vec<usize> = records.iter().map(|r| r.identity_id).collect();
        let mut query_ids = Vec::new();
        let mut ids = Vec::new();
        for r in &records {
            for c in &r.captions {
                query_ids.push(r.identity_id);
                ids.push(self.tokenize(c)?);
            }
        }
        let gallery = self.encode_images(&images)?;
        let queries = self.encode_texts(&ids)?;
        let sim = metrics::similarity_from_embeddings(&queries, &gallery)?;
        Ok(SimilarityTable {
            sim,
            query_ids,
            gallery_ids,
        })
    }

    pub fn evaluate_split(&self, dataset: &Dataset, split: Split) -> Result<RetrievalReport> {
        let t = self.split_similarity(dataset, split)?;
        metrics::evaluate(&t.sim, &t.query_ids, &t.gallery_ids, &metrics::DEFAULT_KS)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for p in self.store.iter() {
            c.insert(p.name.clone(), p.value.clone());
        }
        c.metadata.insert("model_config".into(), serde_json::to_string(&self.config).expect("config json"));
        c.metadata.insert("vocab".into(), serde_json::to_string(&self.vocab).expect("vocab json"));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            c.metadata
                .get(key)
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks {key:?}")))
        };
        let config: ModelConfig = serde_json::from_str(meta("model_config")?)?;
        let mut vocab: Vocab = serde_json::from_str(meta("vocab")?)?;
        vocab.rebuild_index().map_err(|e| Error::Parse(e.to_string()))?;
        // Parameters are overwritten below, so the init stream is irrelevant.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, vocab, &mut rng).map_err(|e| Error::Parse(e.to_string()))?;
        let named: HashMap<String, Tensor> = c.arrays.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        model.store.load_named(&named).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Parameter element counts grouped by top-level module name.
    pub fn param_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.store.iter() {
            let module = p.name.split('.').next().unwrap_or_default().to_string();
            *out.entry(module).or_default() += p.value.numel();
        }
        out
    }
}
