//! Optimisation loop for the combined objective, the learning-rate schedule,
//! Adam, and the ablation / fusion-comparison harnesses.

mod config;
mod harness;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_image, mask_tokens, Dataset, Image, MaskedCaption, Split, Vocab};
use crate::error::{Error, Result};
use crate::fusion::irr_loss;
use crate::losses::{infonce_loss, sdm_loss, total_loss, LossParts};
use crate::metrics::RetrievalReport;
use crate::model::{IrraModel, ModelConfig};
use crate::tensor::{ParamGroup, Tape, Var};

pub use config::TrainConfig;
pub use harness::{
    ablation_markdown, ablation_rows, compare_fusion_variants, fusion_markdown, measure_fusion_latency, run_ablation,
    AblationRow, AblationSpec, FusionComparisonRow, RowStatus,
};
pub use optim::{adam_step, Adam, AdamConfig, AdamState, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_new_module: f64,
    pub irr: Option<f64>,
    pub sdm: Option<f64>,
    pub id: Option<f64>,
    pub infonce: Option<f64>,
    pub total: f64,
    pub batch_size: usize,
    pub masked_tokens: usize,
    pub seconds: f64,
}

impl StepRecord {
    /// Sum of the logged components.
    pub fn component_sum(&self) -> f64 {
        [self.irr, self.sdm, self.id, self.infonce].iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    /// Validation metrics without the per-query listing.
    pub report: Option<RetrievalReport>,
    pub seconds: f64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    /// One JSON object per line: every step of an epoch, then the epoch summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("json"));
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e)).expect("json"));
            out.push('\n');
        }
        for s in steps {
            out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("json"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// The log with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunLog {
        let mut log = self.clone();
        log.steps.iter_mut().for_each(|s| s.seconds = 0.0);
        log.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        log
    }

    pub fn last_report(&self) -> Option<&RetrievalReport> {
        self.epochs.iter().rev().find_map(|e| e.report.as_ref())
    }
}

/// Training pairs and their tokenisation.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocab,
    /// Identity id → classifier index.
    pub classes: BTreeMap<usize, usize>,
    /// `(record index, caption index)` for every training caption.
    pub pairs: Vec<(usize, usize)>,
    /// Token ids per record, per caption (empty for non-training records).
    pub tokens: Vec<Vec<Vec<usize>>>,
}

impl TrainData {
    pub fn prepare(dataset: &Dataset, max_len: usize) -> Result<Self> {
        let train: Vec<usize> = (0..dataset.records.len())
            .filter(|&i| dataset.records[i].split == Split::Train)
            .collect();
        if train.is_empty() {
            return Err(Error::Contract("dataset has no training records".into()));
        }
        let vocab = Vocab::build(
            train
                .iter()
                .flat_map(|&i| dataset.records[i].captions.iter().map(String::as_str)),
        );
        let mut classes = BTreeMap::new();
        for &i in &train {
            let next = classes.len();
            classes.entry(dataset.records[i].identity_id).or_insert(next);
        }
        // classifier indices follow identity order, not encounter order
        for (k, v) in classes.values_mut().enumerate() {
            *v = k;
        }
        let mut pairs = Vec::new();
        let mut tokens = vec![Vec::new(); dataset.records.len()];
        for &i in &train {
            let r = &dataset.records[i];
            tokens[i] = r
                .captions
                .iter()
                .map(|c| vocab.tokenize(c, max_len))
                .collect::<Result<_>>()?;
            pairs.extend((0..r.captions.len()).map(|c| (i, c)));
        }
        Ok(Self {
            vocab,
            classes,
            pairs,
            tokens,
        })
    }
}

pub struct TrainOutcome {
    pub model: IrraModel,
    pub log: RunLog,
    pub data: TrainData,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, epoch, slot)`.
pub fn substream(seed: u64, epoch: u64, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ epoch) ^ slot))
}

pub fn model_config(config: &TrainConfig, data: &TrainData) -> ModelConfig {
    let mut text = config.text.clone();
    text.vocab_size = data.vocab.len();
    ModelConfig {
        image: config.image.clone(),
        text,
        fusion: config.fusion.clone(),
        num_identities: data.classes.len(),
    }
}

struct PreparedSample {
    image: Image,
    masked: Option<MaskedCaption>,
}

/// Trains a fresh model on the training split and validates on the
/// validation split (when present) every `eval_every` epochs and after the
/// last epoch.
pub fn train_run(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_run_with(dataset, config, |_| ControlFlow::Continue(()))
}

/// As [`train_run`], calling `on_epoch` after every epoch; returning
/// `Break` stops training early with the schedule of the full run.
pub fn train_run_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let data = TrainData::prepare(dataset, config.text.max_len)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = IrraModel::new(model_config(config, &data), data.vocab.clone(), &mut init_rng)?;
    let mut log = RunLog::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { model, log, data });
    }
    let has_val = !dataset.split(Split::Val).is_empty();
    let steps_per_epoch = data.pairs.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        total_steps: config.epochs * steps_per_epoch,
        warmup_steps: config.warmup_epochs * steps_per_epoch,
        start_factor: config.warmup_start_lr / config.base_lr,
    };
    let mut adam = Adam::new(config.adam, &model.store);
    let mut order = data.pairs.clone();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        order.copy_from_slice(&data.pairs);
        order.shuffle(&mut substream(config.seed, epoch as u64, u64::MAX));
        let mut totals = Vec::with_capacity(steps_per_epoch);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let start = Instant::now();
            let lr_backbone = schedule.lr_at(step, config.base_lr);
            let lr_new_module = schedule.lr_at(step, config.new_module_lr);
            let prepared: Vec<PreparedSample> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &(r, c))| {
                    let mut rng = substream(config.seed, epoch as u64, (b * config.batch_size + k) as u64);
                    let image = augment_image(dataset.image(&dataset.records[r])?, &mut rng, &config.augment);
                    let masked = config
                        .loss
                        .irr
                        .then(|| mask_tokens(&data.tokens[r][c], &data.vocab, &mut rng, &config.mask));
                    Ok(PreparedSample { image, masked })
                })
                .collect::<Result<_>>()?;
            let record = train_step(&mut model, &mut adam, config, &data, dataset, batch, &prepared, step, epoch, (lr_backbone, lr_new_module))?;
            totals.push(record.total);
            log.steps.push(StepRecord {
                seconds: start.elapsed().as_secs_f64(),
                ..record
            });
            step += 1;
        }
        let last = epoch + 1 == config.epochs;
        let report = if has_val && config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) {
            check_parameters(&model, step)?;
            Some(model.evaluate_split(dataset, Split::Val)?.summary())
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            mean_total: totals.iter().sum::<f64>() / totals.len() as f64,
            report,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        let flow = on_epoch(&rec);
        log.epochs.push(rec);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { model, log, data })
}

/// Fails when an update has left any weight non-finite; `step` is the step
/// that would have used them.
fn check_parameters(model: &IrraModel, step: usize) -> Result<()> {
    match model.store.iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
        Some(p) => Err(Error::NonFinite {
            component: format!("parameter {}", p.name),
            step,
        }),
        None => Ok(()),
    }
}

fn checked(tape: &Tape, var: Option<Var>, name: &str, step: usize) -> Result<Option<f64>> {
    match var {
        None => Ok(None),
        Some(v) => {
            let x = tape.value(v).item();
            if x.is_finite() {
                Ok(Some(x))
            } else {
                Err(Error::NonFinite {
                    component: name.to_string(),
                    step,
                })
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut IrraModel,
    adam: &mut Adam,
    config: &TrainConfig,
    data: &TrainData,
    dataset: &Dataset,
    batch: &[(usize, usize)],
    prepared: &[PreparedSample],
    step: usize,
    epoch: usize,
    (lr_backbone, lr_new_module): (f64, f64),
) -> Result<StepRecord> {
    let n = batch.len();
    let images: Vec<&Image> = prepared.iter().map(|p| &p.image).collect();
    let ids: Vec<Vec<usize>> = batch.iter().map(|&(r, c)| data.tokens[r][c].clone()).collect();
    let identities: Vec<usize> = batch.iter().map(|&(r, _)| dataset.records[r].identity_id).collect();
    let classes: Vec<usize> = identities.iter().map(|i| data.classes[i]).collect();
    let toggles = config.loss;
    check_parameters(model, step)?;
    let mut tape = Tape::new();
    let m = &*model;
    let img = m.image_encoder.forward(&mut tape, &m.store, &images)?;
    let txt = m.text_encoder.forward(&mut tape, &m.store, &ids, m.config.text.causal)?;
    // finite but overflowing weights show up first in the embeddings
    for (v, name) in [(img.global, "image embedding"), (txt.global, "text embedding")] {
        if tape.value(v).data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                component: name.to_string(),
                step,
            });
        }
    }
    let mut parts = LossParts::default();
    if toggles.sdm {
        parts.sdm = Some(sdm_loss(&mut tape, img.global, txt.global, &identities, &config.sdm)?);
    }
    if toggles.infonce {
        parts.infonce = Some(infonce_loss(&mut tape, img.global, txt.global, config.infonce_temperature)?);
    }
    if toggles.id {
        parts.id = Some(m.id_classifier.loss(&mut tape, &m.store, img.global, txt.global, &classes)?);
    }
    let mut masked_tokens = 0;
    if toggles.irr {
        let masked: Vec<&MaskedCaption> = prepared
            .iter()
            .map(|p| p.masked.as_ref().expect("masked when irr is on"))
            .collect();
        let masked_ids: Vec<Vec<usize>> = masked.iter().map(|c| c.input_ids.clone()).collect();
        let positions: Vec<_> = masked.iter().map(|c| c.masked.clone()).collect();
        masked_tokens = positions.iter().map(|p| p.len()).sum();
        let mtxt = m.text_encoder.forward(&mut tape, &m.store, &masked_ids, m.config.text.causal)?;
        let fused = m.fuse(&mut tape, mtxt.tokens, img.tokens, n)?;
        parts.irr = Some(irr_loss(&mut tape, &m.store, &m.mlm_head, &fused, &positions, config.irr_literal_scaling)?);
    }
    let total = total_loss(&mut tape, &parts, &toggles)?;
    let record = StepRecord {
        epoch,
        step,
        lr_backbone,
        lr_new_module,
        irr: checked(&tape, parts.irr, "irr", step)?,
        sdm: checked(&tape, parts.sdm, "sdm", step)?,
        id: checked(&tape, parts.id, "id", step)?,
        infonce: checked(&tape, parts.infonce, "infonce", step)?,
        total: checked(&tape, Some(total), "total", step)?.expect("total present"),
        batch_size: n,
        masked_tokens,
        seconds: 0.0,
    };
    let grads = tape.backward(total)?;
    model.store.zero_grad();
    grads.accumulate(&tape, &mut model.store);
    if let Some(p) = model.store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite {
            component: format!("gradient of {}", p.name),
            step,
        });
    }
    adam.step(&mut model.store, |g| match g {
        ParamGroup::Backbone => lr_backbone,
        ParamGroup::NewModule => lr_new_module,
    })?;
    Ok(record)
}
