use acdc_core::acdc::{
    acdc_train, build_schedule, dense_finetune, LrSchedule, NoopObserver, OptimizerConfig, PhaseKind, PhaseSchedule,
    StepEvent, TrainConfig, TrainObserver, TrainResult,
};
use acdc_core::checkpoint::Checkpoint;
use acdc_core::data::{gaussian_blobs, BlobSpec};
use acdc_core::diagnostics::dead_weights;
use acdc_core::objectives::Mlp;
use acdc_core::{Dataset, Error, SeededRng, SparsityPattern};

fn data(seed: u64) -> (Dataset, Dataset) {
    let spec = BlobSpec {
        features: 20,
        classes: 5,
        samples: 2000,
        spread: 2.5,
        center_scale: 1.0,
    };
    let mut rng = SeededRng::new(seed).fork(100);
    gaussian_blobs(&spec, &mut rng).unwrap().split(0.2, &mut rng).unwrap()
}

fn model() -> Mlp {
    Mlp::new(vec![20, 64, 5]).unwrap()
}

fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        lr: 0.05,
        lr_schedule: LrSchedule::Cosine { warmup_epochs: 2.0 },
        momentum: 0.9,
        weight_decay: 1e-4,
        reset_momentum_on_compression: false,
    }
}

fn schedule() -> PhaseSchedule {
    build_schedule(28, 4, 3, 3, 4, 5).unwrap()
}

fn config(sparsity: f64) -> TrainConfig {
    TrainConfig {
        schedule: schedule(),
        optimizer: optimizer(),
        pattern: SparsityPattern::global_fraction(1.0 - sparsity),
        batch_size: 64,
        select_best_dense: true,
    }
}

fn train(seed: u64, sparsity: f64, obs: &mut dyn TrainObserver) -> (TrainResult, Dataset, Dataset) {
    let (tr, ev) = data(seed);
    let r = acdc_train(&model(), &tr, Some(&ev), &config(sparsity), &SeededRng::new(seed), obs).unwrap();
    (r, tr, ev)
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

#[derive(Default)]
struct WarmupWatch {
    warmup: usize,
    steps: usize,
    impure: usize,
}

impl TrainObserver for WarmupWatch {
    fn on_step(&mut self, e: &StepEvent<'_>) {
        if e.epoch < self.warmup {
            self.steps += 1;
            if e.kind != PhaseKind::Decompressed || !e.mask.is_all_ones() {
                self.impure += 1;
            }
        }
    }
}

#[test]
fn final_model_has_exact_target_nonzeros() {
    let (r, _, _) = train(0, 0.9, &mut NoopObserver);
    let prunable = r.sparse_params.prunable_count();
    let want = (0.1 * prunable as f64).round() as usize;
    assert_eq!(r.mask.popcount(), want);
    assert_eq!(r.sparse_params.prunable_nnz(), want);
    let last = r.metrics.last().unwrap();
    assert_eq!(last.phase, PhaseKind::Compressed);
    assert!((last.sparsity - (1.0 - want as f64 / prunable as f64)).abs() < 1e-12);
}

#[test]
fn warmup_is_dense() {
    let mut watch = WarmupWatch {
        warmup: 4,
        ..Default::default()
    };
    let (r, _, _) = train(1, 0.9, &mut watch);
    assert!(watch.steps > 0);
    assert_eq!(watch.impure, 0);
    for m in &r.metrics[..4] {
        assert_eq!(m.phase, PhaseKind::Decompressed);
        assert_eq!(m.sparsity, 0.0);
    }
    assert!(r.mask_history.entries().iter().all(|(epoch, _)| *epoch >= 4));
}

#[test]
fn best_dense_needs_eval_split() {
    let (tr, _) = data(2);
    let err = acdc_train(&model(), &tr, None, &config(0.9), &SeededRng::new(2), &mut NoopObserver).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));

    let mut cfg = config(0.9);
    cfg.select_best_dense = false;
    let r = acdc_train(&model(), &tr, None, &cfg, &SeededRng::new(2), &mut NoopObserver).unwrap();
    assert!(r.best_dense.is_none());
    assert!(r.metrics.iter().all(|m| m.eval_accuracy.is_none()));
    let e = dense_finetune(&r, &model(), &tr, 3, &optimizer(), 64, &SeededRng::new(2)).unwrap_err();
    assert!(matches!(e, Error::Missing(_)));
}

#[test]
fn best_dense_is_an_end_of_decompression_snapshot() {
    let (r, _, _) = train(3, 0.9, &mut NoopObserver);
    let best = r.best_dense.as_ref().unwrap();
    let ends: Vec<usize> = schedule().ranges(PhaseKind::Decompressed).iter().map(|&(_, e)| e - 1).collect();
    assert!(ends.contains(&best.epoch));
    let top = ends
        .iter()
        .map(|&e| r.metrics[e].eval_accuracy.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.eval_accuracy, top);
    assert_eq!(r.metrics[best.epoch].eval_accuracy, Some(best.eval_accuracy));
}

#[test]
fn zero_epoch_finetune_returns_checkpoint() {
    let (r, tr, _) = train(4, 0.9, &mut NoopObserver);
    let p = dense_finetune(&r, &model(), &tr, 0, &optimizer(), 64, &SeededRng::new(4)).unwrap();
    assert_eq!(p, r.best_dense.unwrap().params);
}

#[test]
fn finetuning_does_not_hurt_dense_checkpoint() {
    let mut before = [0.0; 3];
    let mut after = [0.0; 3];
    for seed in 0..3u64 {
        let (r, tr, ev) = train(10 + seed, 0.9, &mut NoopObserver);
        let mut opt = optimizer();
        opt.lr = 0.01;
        let p = dense_finetune(&r, &model(), &tr, 5, &opt, 64, &SeededRng::new(seed)).unwrap();
        before[seed as usize] = r.best_dense.unwrap().eval_accuracy;
        after[seed as usize] = model().accuracy(&p, &ev).unwrap();
    }
    assert!(median3(after) >= median3(before), "{after:?} vs {before:?}");
}

#[test]
fn higher_sparsity_leaves_more_dead_weights() {
    let (lo, _, _) = train(5, 0.8, &mut NoopObserver);
    let (hi, _, _) = train(5, 0.95, &mut NoopObserver);
    let dead_lo = dead_weights(&lo.best_dense.unwrap().params);
    let dead_hi = dead_weights(&hi.best_dense.unwrap().params);
    assert!(dead_hi > dead_lo, "{dead_hi} vs {dead_lo}");
}

#[test]
fn checkpoint_file_round_trip() {
    let (r, _, _) = train(6, 0.9, &mut NoopObserver);
    let ck = Checkpoint::new(r.sparse_params.clone(), &SeededRng::new(6), 27)
        .with_mask(r.mask.clone())
        .with_schedule(schedule())
        .with_optimizer(optimizer());
    let path = std::env::temp_dir().join(format!("acdc-desk-{}.json", std::process::id()));
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.params.prunable_nnz(), r.mask.popcount());
}

#[test]
fn training_is_deterministic() {
    let (a, _, _) = train(7, 0.9, &mut NoopObserver);
    let (b, _, _) = train(7, 0.9, &mut NoopObserver);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.sparse_params, b.sparse_params);
    assert_eq!(a.mask, b.mask);
}
