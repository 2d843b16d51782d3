use std::ops::ControlFlow;

use irra_kit::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use irra_kit::fusion::FusionVariant;
use irra_kit::losses::LossToggles;
use irra_kit::model::IrraModel;
use irra_kit::train::{compare_fusion_variants, model_config, train_run, train_run_with, TrainConfig, TrainData};
use irra_kit::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    generate_synthetic(8, 3, 2, &mut rng, &SyntheticConfig::default()).unwrap().0
}

fn paper_sized_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    generate_synthetic(32, 4, 2, &mut rng, &SyntheticConfig::default()).unwrap().0
}

fn short(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        batch_size: 8,
        warmup_epochs: 1.min(epochs.saturating_sub(1)),
        ..TrainConfig::toy()
    }
}

#[test]
fn zero_epochs_returns_initial_parameters_and_empty_log() {
    let ds = small_dataset();
    let config = short(4, 0);
    let out = train_run(&ds, &config).unwrap();
    assert!(out.log.steps.is_empty() && out.log.epochs.is_empty());
    let data = TrainData::prepare(&ds, config.text.max_len).unwrap();
    let fresh = IrraModel::new(model_config(&config, &data), data.vocab, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(out.model.to_checkpoint().to_bytes(), fresh.to_checkpoint().to_bytes());
}

#[test]
fn fixed_seed_gives_identical_logs_and_weights() {
    let ds = small_dataset();
    let a = train_run(&ds, &short(9, 2)).unwrap();
    let b = train_run(&ds, &short(9, 2)).unwrap();
    assert!(!a.log.steps.is_empty());
    assert_eq!(a.log.without_timing(), b.log.without_timing());
    assert_eq!(a.log.without_timing().to_jsonl(), b.log.without_timing().to_jsonl());
    assert_eq!(a.model.to_checkpoint().to_bytes(), b.model.to_checkpoint().to_bytes());
    let c = train_run(&ds, &short(10, 2)).unwrap();
    assert_ne!(a.log.without_timing(), c.log.without_timing());
}

#[test]
fn logged_total_is_the_sum_of_enabled_components() {
    let ds = small_dataset();
    for loss in [
        LossToggles::full(),
        LossToggles { sdm: false, id: true, irr: false, infonce: true },
        LossToggles { sdm: true, id: false, irr: true, infonce: false },
    ] {
        let config = TrainConfig { loss, ..short(1, 2) };
        let out = train_run(&ds, &config).unwrap();
        for s in &out.log.steps {
            assert!((s.total - s.component_sum()).abs() < 1e-10, "step {}: {} vs {}", s.step, s.total, s.component_sum());
            assert_eq!(s.sdm.is_some(), loss.sdm);
            assert_eq!(s.id.is_some(), loss.id);
            assert_eq!(s.irr.is_some(), loss.irr);
            assert_eq!(s.infonce.is_some(), loss.infonce);
        }
        // epochs carry a validation report because the dataset has a val split
        assert!(out.log.epochs.iter().all(|e| e.report.is_some()));
    }
}

#[test]
fn evaluation_never_runs_the_fusion_encoder() {
    let ds = small_dataset();
    let out = train_run(&ds, &short(2, 1)).unwrap();
    // training with IRR does use it
    assert!(out.model.fusion_calls() > 0);
    out.model.reset_fusion_calls();
    let report = out.model.evaluate_split(&ds, Split::Val).unwrap();
    assert_eq!(report.num_queries, 16);
    assert_eq!(out.model.fusion_calls(), 0);
}

#[test]
fn irr_off_never_runs_the_fusion_encoder() {
    let ds = small_dataset();
    let config = TrainConfig {
        loss: LossToggles { sdm: true, id: true, irr: false, infonce: false },
        ..short(2, 1)
    };
    let out = train_run(&ds, &config).unwrap();
    assert_eq!(out.model.fusion_calls(), 0);
    assert!(out.log.steps.iter().all(|s| s.masked_tokens == 0));
}

#[test]
fn divergence_aborts_with_the_component_and_step() {
    let ds = small_dataset();
    let config = TrainConfig {
        base_lr: 1e200,
        new_module_lr: 1e200,
        warmup_start_lr: 1e200,
        ..short(5, 2)
    };
    match train_run(&ds, &config) {
        Err(Error::NonFinite { component, step }) => {
            assert!(step >= 1, "first step cannot diverge, got {step}");
            assert!(!component.is_empty());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with an absurd learning rate should diverge"),
    }
}

#[test]
fn learning_rates_follow_the_schedule() {
    let ds = small_dataset();
    let config = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        ..short(1, 4)
    };
    let out = train_run(&ds, &config).unwrap();
    let steps = &out.log.steps;
    let per_epoch = steps.len() / 4;
    assert!((steps[0].lr_backbone / config.warmup_start_lr - 1.0).abs() < 1e-12);
    assert!((steps[0].lr_new_module / config.new_module_lr - config.warmup_start_lr / config.base_lr).abs() < 1e-12);
    assert_eq!(steps[per_epoch].lr_backbone, config.base_lr);
    for w in steps[per_epoch..].windows(2) {
        assert!(w[1].lr_backbone < w[0].lr_backbone);
    }
    assert!(steps.last().unwrap().lr_backbone > 0.0);
}

/// Mean total loss over consecutive 20-step windows of the first 10 epochs.
fn window_means(totals: &[f64]) -> Vec<f64> {
    totals.chunks_exact(20).map(|w| w.iter().sum::<f64>() / 20.0).collect()
}

#[test]
fn moving_average_of_total_loss_decreases_over_ten_epochs() {
    let ds = paper_sized_dataset();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            eval_every: 0,
            ..TrainConfig::toy()
        };
        // the schedule of a full run, stopped after ten epochs
        let out = train_run_with(&ds, &config, |e| {
            if e.epoch + 1 == 10 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(out.log.epochs.len(), 10);
        let totals: Vec<f64> = out.log.steps.iter().map(|s| s.total).collect();
        let means = window_means(&totals);
        assert!(means.len() >= 2, "{} steps", totals.len());
        for w in means.windows(2) {
            assert!(w[1] < w[0], "seed {seed}: window means {means:?}");
        }
    }
}

#[test]
fn fusion_variants_have_the_expected_parameter_ordering() {
    let ds = small_dataset();
    let rows = compare_fusion_variants(&ds, &short(0, 1), 3, false).unwrap();
    assert_eq!(rows.len(), 3);
    let count = |v| rows.iter().find(|r| r.variant == v).unwrap().param_count;
    assert!(count(FusionVariant::CoAttention) > count(FusionVariant::Ours));
    assert!(count(FusionVariant::Ours) > count(FusionVariant::MergedAttention));
    assert!(rows.iter().all(|r| r.latency_ms > 0.0 && r.report.is_none()));
}

#[test]
fn every_fusion_variant_trains_with_finite_losses() {
    let ds = small_dataset();
    for variant in FusionVariant::ALL {
        let mut config = short(6, 1);
        config.fusion.variant = variant;
        let out = train_run(&ds, &config).unwrap();
        assert!(out.log.steps.iter().all(|s| s.total.is_finite() && s.irr.unwrap().is_finite()));
    }
}
