use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{model_config, train_run, TrainConfig, TrainData};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::losses::LossToggles;
use crate::metrics::RetrievalReport;
use crate::model::IrraModel;
use crate::nn;
use crate::tensor::{Tape, Tensor};

/// One row of the loss-component ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationSpec {
    pub no: usize,
    pub name: &'static str,
    /// `None` for components this crate does not implement.
    pub toggles: Option<LossToggles>,
    /// Rank-1 reported for CUHK-PEDES, for side-by-side display.
    pub reference_rank1: f64,
}

const fn toggles(sdm: bool, id: bool, irr: bool, infonce: bool) -> Option<LossToggles> {
    Some(LossToggles { sdm, id, irr, infonce })
}

/// The eight rows No.0 to No.7. Rows without SDM keep InfoNCE as the
/// global alignment term.
pub fn ablation_rows() -> [AblationSpec; 8] {
    [
        AblationSpec { no: 0, name: "InfoNCE", toggles: toggles(false, false, false, true), reference_rank1: 68.19 },
        AblationSpec { no: 1, name: "CMPM", toggles: None, reference_rank1: 59.31 },
        AblationSpec { no: 2, name: "SDM", toggles: toggles(true, false, false, false), reference_rank1: 70.42 },
        AblationSpec { no: 3, name: "InfoNCE+ID", toggles: toggles(false, true, false, true), reference_rank1: 65.33 },
        AblationSpec { no: 4, name: "InfoNCE+IRR", toggles: toggles(false, false, true, true), reference_rank1: 71.23 },
        AblationSpec { no: 5, name: "SDM+ID", toggles: toggles(true, true, false, false), reference_rank1: 70.52 },
        AblationSpec { no: 6, name: "SDM+IRR", toggles: toggles(true, false, true, false), reference_rank1: 72.81 },
        AblationSpec { no: 7, name: "SDM+ID+IRR", toggles: toggles(true, true, true, false), reference_rank1: 73.38 },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    NotImplemented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub no: usize,
    pub name: String,
    pub status: RowStatus,
    pub reference_rank1: f64,
    pub seeds: Vec<u64>,
    /// Means over seeds of the final validation metrics.
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "mINP")]
    pub minp: Option<f64>,
    pub per_seed_rank1: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn final_report(dataset: &Dataset, config: &TrainConfig) -> Result<RetrievalReport> {
    let out = train_run(dataset, config)?;
    match out.log.last_report() {
        Some(r) => Ok(r.clone()),
        None => Ok(out.model.evaluate_split(dataset, crate::data::Split::Val)?.summary()),
    }
}

/// Trains every implemented row of the grid once per seed, starting from
/// `base` with only the loss toggles and seed changed.
pub fn run_ablation(dataset: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let specs = ablation_rows();
    let jobs: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.toggles.is_some())
        .flat_map(|(i, _)| seeds.iter().map(move |&seed| (i, seed)))
        .collect();
    let reports: Vec<((usize, u64), RetrievalReport)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let config = TrainConfig {
                seed,
                loss: specs[i].toggles.expect("implemented row"),
                ..base.clone()
            };
            Ok(((i, seed), final_report(dataset, &config)?))
        })
        .collect::<Result<_>>()?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mine: Vec<&RetrievalReport> = reports.iter().filter(|((j, _), _)| *j == i).map(|(_, r)| r).collect();
            let pick = |f: fn(&RetrievalReport) -> f64| mean(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                no: spec.no,
                name: spec.name.to_string(),
                status: if spec.toggles.is_some() { RowStatus::Ok } else { RowStatus::NotImplemented },
                reference_rank1: spec.reference_rank1,
                seeds: if spec.toggles.is_some() { seeds.to_vec() } else { Vec::new() },
                rank1: pick(|r| r.rank1),
                rank5: pick(|r| r.rank5),
                rank10: pick(|r| r.rank10),
                map: pick(|r| r.map),
                minp: pick(|r| r.minp),
                per_seed_rank1: mine.iter().map(|r| r.rank1).collect(),
            }
        })
        .collect())
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| No. | Components | Rank-1 | Rank-5 | Rank-10 | mAP | mINP | Reference Rank-1 |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.2} |\n",
            r.no,
            r.name,
            cell(r.rank1),
            cell(r.rank5),
            cell(r.rank10),
            cell(r.map),
            cell(r.minp),
            r.reference_rank1
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionComparisonRow {
    pub variant: FusionVariant,
    pub param_count: usize,
    /// Median wall-clock time of one fusion forward pass.
    pub latency_ms: f64,
    pub report: Option<RetrievalReport>,
}

/// Median time of `reps` fusion forward passes over random token states
/// shaped like one training batch.
pub fn measure_fusion_latency(model: &IrraModel, batch: usize, reps: usize, seed: u64) -> Result<f64> {
    if batch == 0 || reps == 0 {
        return Err(Error::Config("latency measurement needs batch >= 1 and reps >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &model.config;
    let (l, n) = (c.text.max_len, c.image.num_patches());
    let text = Tensor::new(vec![batch * l, c.text.embed_dim], nn::normal(&mut rng, batch * l * c.text.embed_dim, 1.0))?;
    let image = Tensor::new(vec![batch * n, c.image.embed_dim], nn::normal(&mut rng, batch * n * c.image.embed_dim, 1.0))?;
    let mut times = Vec::with_capacity(reps);
    // one untimed pass to warm caches
    for rep in 0..=reps {
        let mut tape = Tape::new();
        let t = tape.constant(text.clone());
        let v = tape.constant(image.clone());
        let start = Instant::now();
        let out = model.fusion.forward(&mut tape, &model.store, t, v, batch)?;
        std::hint::black_box(tape.value(out.states));
        if rep > 0 {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Builds the three fusion variants from one base config, checks the
/// parameter-count ordering co_attention > ours > merged_attention, times
/// the fusion stage, and optionally trains each variant to report
/// validation metrics.
pub fn compare_fusion_variants(
    dataset: &Dataset,
    base: &TrainConfig,
    reps: usize,
    train: bool,
) -> Result<Vec<FusionComparisonRow>> {
    base.validate()?;
    let data = TrainData::prepare(dataset, base.text.max_len)?;
    let mut rows = Vec::new();
    for variant in FusionVariant::ALL {
        let mut config = base.clone();
        config.fusion.variant = variant;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = IrraModel::new(model_config(&config, &data), data.vocab.clone(), &mut rng)?;
        let latency_ms = measure_fusion_latency(&model, config.batch_size, reps, config.seed)?;
        let report = if train { Some(final_report(dataset, &config)?) } else { None };
        rows.push(FusionComparisonRow {
            variant,
            param_count: model.fusion_param_count(),
            latency_ms,
            report,
        });
    }
    let count = |v: FusionVariant| rows.iter().find(|r| r.variant == v).map(|r| r.param_count).unwrap_or(0);
    let (co, ours, merged) = (
        count(FusionVariant::CoAttention),
        count(FusionVariant::Ours),
        count(FusionVariant::MergedAttention),
    );
    if !(co > ours && ours > merged) {
        return Err(Error::Contract(format!(
            "fusion parameter ordering violated: co_attention {co}, ours {ours}, merged_attention {merged}"
        )));
    }
    Ok(rows)
}

pub fn fusion_markdown(rows: &[FusionComparisonRow]) -> String {
    let mut out = String::from("| Variant | Params | Time (ms) | Rank-1 | Rank-5 | Rank-10 | mAP |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = |f: fn(&RetrievalReport) -> f64| cell(r.report.as_ref().map(f));
        out.push_str(&format!(
            "| {} | {} | {:.3} | {} | {} | {} | {} |\n",
            r.variant.name(),
            r.param_count,
            r.latency_ms,
            m(|x| x.rank1),
            m(|x| x.rank5),
            m(|x| x.rank10),
            m(|x| x.map)
        ));
    }
    out
}
