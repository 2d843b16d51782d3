//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::time::Instant;

use common::oracle_sdm;
use irra_kit::data::vocab::MASK;
use irra_kit::data::{generate_synthetic, mask_tokens, Dataset, MaskConfig, Replacement, Split, SyntheticConfig, Vocab};
use irra_kit::fusion::{FusionConfig, FusionEncoder, FusionVariant};
use irra_kit::gradcheck::{run_suite, TOLERANCE};
use irra_kit::losses::{sdm_loss, LossToggles, SdmConfig};
use irra_kit::metrics::oracle::{check_report, evaluate_oracle};
use irra_kit::metrics::{evaluate, RetrievalReport, DEFAULT_KS};
use irra_kit::model::IrraModel;
use irra_kit::tensor::{ParamStore, Tape, Tensor};
use irra_kit::train::{measure_fusion_latency, model_config, train_run, TrainConfig, TrainData};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(no: usize, name: &str, o: &Outcome, seconds: f64) -> bool {
    println!(
        "[{}] criterion {no} {name}: {} ({seconds:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match run_suite(100, 0xAC_CE97) {
        Ok(r) => r,
        Err(e) => return Outcome { pass: false, detail: format!("suite error: {e}") },
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("ops");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    Outcome {
        pass: failed.is_empty() && secs < 120.0 && results.iter().all(|r| r.cases == 100),
        detail: format!(
            "{} ops x 100 cases, worst {} {:.2e} (limit {TOLERANCE:e}), failed {:?}, runtime {secs:.1}s (limit 120s)",
            results.len(),
            worst.op,
            worst.max_rel_error,
            failed
        ),
    }
}

fn sdm_value(img: &[Vec<f64>], txt: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let i = tape.input(Tensor::from_rows(img).unwrap());
    let t = tape.input(Tensor::from_rows(txt).unwrap());
    let l = sdm_loss(&mut tape, i, t, labels, &SdmConfig::default()).unwrap();
    tape.value(l).item()
}

fn sdm_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut oracle_dev, mut perm_dev, mut scale_dev) = (0f64, 0f64, 0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let ids = rng.random_range(1..=n);
        let row = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let img: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let txt: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let base = sdm_value(&img, &txt, &labels);
        oracle_dev = oracle_dev.max((base - oracle_sdm(&img, &txt, &labels, 0.02, 1e-8)).abs());

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pick = |v: &[Vec<f64>]| perm.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        let pl: Vec<usize> = perm.iter().map(|&k| labels[k]).collect();
        perm_dev = perm_dev.max((base - sdm_value(&pick(&img), &pick(&txt), &pl)).abs());

        let (mut img2, mut txt2) = (img.clone(), txt.clone());
        for r in img2.iter_mut().chain(txt2.iter_mut()) {
            let s = 10f64.powf(rng.random_range(-3.0..3.0));
            r.iter_mut().for_each(|x| *x *= s);
        }
        scale_dev = scale_dev.max((base - sdm_value(&img2, &txt2, &labels)).abs());
    }
    let single = sdm_value(&[vec![0.3, -1.2, 2.0]], &[vec![-0.7, 0.4, 1.1]], &[3]).abs();
    Outcome {
        pass: oracle_dev < 1e-10 && single < 1e-7 && perm_dev < 1e-10 && scale_dev < 1e-10,
        detail: format!(
            "oracle dev {oracle_dev:.1e} (<1e-10, 1000 batches), N=1 |loss| {single:.1e} (<1e-7), permutation dev {perm_dev:.1e}, rescaling dev {scale_dev:.1e} (<1e-10)"
        ),
    }
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (q, g) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let ids = rng.random_range(1..=5);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..q * g)
            .map(|_| if coarse { rng.random_range(0..4) as f64 / 4.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let gallery: Vec<usize> = (0..g).map(|_| rng.random_range(0..ids)).collect();
        let queries: Vec<usize> = (0..q).map(|_| gallery[rng.random_range(0..g)]).collect();
        let sim = Tensor::new(vec![q, g], scores).unwrap();
        let ks = [1, 5, 10, 20];
        let r = evaluate(&sim, &queries, &gallery, &ks).unwrap();
        let o = evaluate_oracle(&sim, &queries, &gallery, &ks).unwrap();
        let same = r.map == o.map && r.minp == o.minp && r.cmc.iter().zip(&o.rank_k).all(|(a, (_, b))| a.value == *b);
        if !same || check_report(&r, &sim, &queries, &gallery).is_err() {
            mismatches += 1;
        }
    }
    let hand = Tensor::new(vec![1, 4], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let h = evaluate(&hand, &[1], &[0, 1, 0, 1], &DEFAULT_KS).unwrap();
    let ap = h.per_query[0].average_precision;
    let inp = h.per_query[0].inverse_negative_penalty;
    Outcome {
        pass: mismatches == 0 && ap == 0.5 && inp == 2.0 / 4.0,
        detail: format!("{mismatches}/1000 mismatches (exact), AP [0,1,0,1] = {ap}, INP = {inp} (|G|/R_hard = 0.5)"),
    }
}

fn masking_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ds, _) = generate_synthetic(64, 2, 3, &mut rng, &SyntheticConfig::default()).unwrap();
    let vocab = Vocab::build(ds.records.iter().flat_map(|r| r.captions.iter().map(String::as_str)));
    let caps: Vec<Vec<usize>> = ds
        .records
        .iter()
        .flat_map(|r| r.captions.iter().map(|c| vocab.tokenize(c, 12).unwrap()))
        .collect();
    let cfg = MaskConfig::default();
    let (mut content, mut selected, mut special_hits) = (0usize, 0usize, 0usize);
    let mut kinds = [0usize; 3];
    let mut k = 0;
    while content < 100_000 {
        let ids = &caps[k % caps.len()];
        k += 1;
        let m = mask_tokens(ids, &vocab, &mut rng, &cfg);
        content += ids.iter().filter(|&&t| !Vocab::is_special(t)).count();
        selected += m.masked.positions.len();
        special_hits += m.masked.positions.iter().filter(|&&p| Vocab::is_special(ids[p])).count();
        for (&p, kind) in m.masked.positions.iter().zip(&m.replacements) {
            kinds[match kind {
                Replacement::Mask => {
                    debug_assert_eq!(m.input_ids[p], MASK);
                    0
                }
                Replacement::Random => 1,
                Replacement::Unchanged => 2,
            }] += 1;
        }
    }
    let frac = selected as f64 / content as f64;
    let n = selected as f64;
    let within = |count: usize, p: f64| ((count as f64 / n) - p).abs() <= 3.0 * (p * (1.0 - p) / n).sqrt();
    let split_ok = within(kinds[0], 0.8) && within(kinds[1], 0.1) && within(kinds[2], 0.1);
    Outcome {
        pass: (0.145..=0.155).contains(&frac) && split_ok && special_hits == 0,
        detail: format!(
            "{content} tokens, selected {frac:.4} (in [0.145, 0.155]), split {:.4}/{:.4}/{:.4} (3-sigma of 0.8/0.1/0.1), special tokens masked {special_hits}",
            kinds[0] as f64 / n,
            kinds[1] as f64 / n,
            kinds[2] as f64 / n
        ),
    }
}

fn synthetic(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_synthetic(32, 4, 2, &mut rng, &SyntheticConfig::default()).unwrap().0
}

/// Final validation report of one toy run; the fusion counter after a
/// fresh evaluation is returned alongside.
fn toy_run(dataset: &Dataset, seed: u64, loss: LossToggles) -> (RetrievalReport, usize) {
    let config = TrainConfig {
        seed,
        loss,
        eval_every: 0,
        ..TrainConfig::toy()
    };
    let out = train_run(dataset, &config).expect("training");
    out.model.reset_fusion_calls();
    let r = out.model.evaluate_split(dataset, Split::Val).expect("evaluation");
    (r.summary(), out.model.fusion_calls())
}

struct FullRuns {
    reports: Vec<RetrievalReport>,
    fusion_calls: Vec<usize>,
    seconds: f64,
}

fn end_to_end(datasets: &[Dataset]) -> (Outcome, FullRuns) {
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut calls = Vec::new();
    for (ds, &seed) in datasets.iter().zip(&SEEDS) {
        let (r, c) = toy_run(ds, seed, LossToggles::full());
        reports.push(r);
        calls.push(c);
    }
    let seconds = start.elapsed().as_secs_f64();
    let good = reports.iter().filter(|r| r.rank1 >= 0.90 && r.map >= 0.85).count();
    let per_seed: Vec<String> = reports.iter().map(|r| format!("{:.3}/{:.3}", r.rank1, r.map)).collect();
    (
        Outcome {
            pass: good >= 4 && seconds < 600.0,
            detail: format!(
                "Rank-1/mAP per seed {per_seed:?}; {good}/5 seeds with Rank-1 >= 0.90 and mAP >= 0.85 (need 4), runtime {seconds:.0}s (limit 600s)"
            ),
        },
        FullRuns {
            reports,
            fusion_calls: calls,
            seconds,
        },
    )
}

fn mean_rank1(datasets: &[Dataset], loss: LossToggles) -> (f64, Vec<f64>) {
    let r: Vec<f64> = datasets.iter().zip(&SEEDS).map(|(ds, &s)| toy_run(ds, s, loss).0.rank1).collect();
    (r.iter().sum::<f64>() / r.len() as f64, r)
}

fn ablation_direction(datasets: &[Dataset], full: &FullRuns) -> Outcome {
    let t = |sdm, id, irr| LossToggles { sdm, id, irr, infonce: false };
    let (sdm, _) = mean_rank1(datasets, t(true, false, false));
    let (sdm_irr, _) = mean_rank1(datasets, t(true, false, true));
    let (sdm_id, _) = mean_rank1(datasets, t(true, true, false));
    let all: f64 = full.reports.iter().map(|r| r.rank1).sum::<f64>() / full.reports.len() as f64;
    Outcome {
        pass: sdm_irr >= sdm && all >= sdm_id,
        detail: format!(
            "mean Rank-1 SDM {sdm:.4} -> SDM+IRR {sdm_irr:.4}; SDM+ID {sdm_id:.4} -> SDM+ID+IRR {all:.4}"
        ),
    }
}

fn fusion_structure() -> Outcome {
    let counts = |base: FusionConfig, text_dim: usize, image_dim: usize| -> Vec<(FusionVariant, usize)> {
        FusionVariant::ALL
            .iter()
            .map(|&variant| {
                let mut store = ParamStore::new();
                let cfg = FusionConfig { variant, ..base.clone() };
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                FusionEncoder::new(cfg, text_dim, image_dim, &mut store, &mut rng, "fusion").unwrap();
                (variant, store.num_elements())
            })
            .collect()
    };
    let ordered = |c: &[(FusionVariant, usize)]| {
        let get = |v| c.iter().find(|(w, _)| *w == v).unwrap().1;
        get(FusionVariant::CoAttention) > get(FusionVariant::Ours) && get(FusionVariant::Ours) > get(FusionVariant::MergedAttention)
    };
    let toy = counts(FusionConfig::toy(), 64, 64);
    let production = counts(FusionConfig::production(), 512, 768);

    // latency at the toy config, one training-sized batch
    let ds = synthetic(7);
    let base = TrainConfig::toy();
    let data = TrainData::prepare(&ds, base.text.max_len).unwrap();
    let mut latency = Vec::new();
    for variant in FusionVariant::ALL {
        let mut config = base.clone();
        config.fusion.variant = variant;
        let model = IrraModel::new(model_config(&config, &data), data.vocab.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        latency.push((variant, measure_fusion_latency(&model, config.batch_size, 50, 1).unwrap()));
    }
    let fastest = latency.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let fmt = |c: &[(FusionVariant, usize)], scale: f64| {
        c.iter().map(|(v, n)| format!("{} {:.2}", v.name(), *n as f64 / scale)).collect::<Vec<_>>().join(", ")
    };
    Outcome {
        pass: ordered(&toy) && ordered(&production) && fastest == FusionVariant::Ours,
        detail: format!(
            "params toy (K) [{}]; production (M) [{}]; median latency ms [{}]",
            fmt(&toy, 1e3),
            fmt(&production, 1e6),
            latency.iter().map(|(v, t)| format!("{} {t:.3}", v.name())).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn inference_cost(full: &FullRuns) -> Outcome {
    Outcome {
        pass: full.fusion_calls.iter().all(|&c| c == 0),
        detail: format!(
            "fusion forward passes during evaluation per run {:?} (must all be 0)",
            full.fusion_calls
        ),
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; listing requests get an empty list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed().as_secs_f64())
    };
    let (o, t) = timed(&gradient_suite);
    all &= report(1, "gradient suite", &o, t);
    let (o, t) = timed(&sdm_correctness);
    all &= report(2, "SDM correctness", &o, t);
    let (o, t) = timed(&metrics_oracle);
    all &= report(3, "metrics oracle", &o, t);
    let (o, t) = timed(&masking_statistics);
    all &= report(4, "masking statistics", &o, t);

    let datasets: Vec<Dataset> = SEEDS.iter().map(|&s| synthetic(s)).collect();
    let (o, full) = end_to_end(&datasets);
    all &= report(5, "end-to-end convergence", &o, full.seconds);
    let start = Instant::now();
    let o = ablation_direction(&datasets, &full);
    all &= report(6, "loss ablation direction", &o, start.elapsed().as_secs_f64());
    let (o, t) = timed(&fusion_structure);
    all &= report(7, "fusion variant structure", &o, t);
    let o = inference_cost(&full);
    all &= report(8, "inference cost", &o, 0.0);

    println!("acceptance: {}", if all { "all criteria pass" } else { "FAILURES above" });
    if !all {
        std::process::exit(1);
    }
}
