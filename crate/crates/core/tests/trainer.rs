use std::path::Path;

use qdvmr::featurestore::synth::{generate_synthetic, SynthConfig};
use qdvmr::featurestore::{collate, Dataset};
use qdvmr::nn::ParamId;
use qdvmr::trainer::{
    self, checkpoint, collate_item, compute_gradients, prepare_split, ItemMode, LossWeights, QdVmr,
    TextEncoder, Toggles, TrainConfig,
};
use qdvmr::{Error, Execution};

fn dataset(dir: &Path, n: usize) -> Dataset {
    let cfg = SynthConfig {
        n,
        clips: 12,
        video_dim: 16,
        text_dim: 16,
        ..Default::default()
    };
    generate_synthetic(&cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn small(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = epochs;
    cfg.eval_every = epochs.max(1);
    cfg.model.hidden = 16;
    cfg.model.heads = 2;
    cfg.model.ffn_dim = 32;
    cfg
}

#[test]
fn identical_seeds_give_identical_runs_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 12);
    let mut cfg = small(3);
    cfg.execution = Execution::Sequential;
    let a = trainer::train(&cfg, &ds).unwrap();
    let b = trainer::train(&cfg, &ds).unwrap();
    cfg.execution = Execution::Parallel;
    let c = trainer::train(&cfg, &ds).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve, c.curve);
    assert_eq!(a.last_report, c.last_report);
    cfg.seed += 1;
    let d = trainer::train(&cfg, &ds).unwrap();
    assert_ne!(a.curve, d.curve);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 8);
    let mut cfg = small(2);
    let ckpt = dir.path().join("ckpt");
    cfg.ckpt_dir = Some(ckpt.clone());
    let out = trainer::train(&cfg, &ds).unwrap();
    assert!(ckpt.join("index.json").is_file());
    assert!(ckpt.join("last/index.json").is_file());
    let csv = std::fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let last = checkpoint::load(&ckpt.join("last")).unwrap();
    assert_eq!(last.epoch, 2);
    assert_eq!(last.config.as_ref(), Some(&cfg));
    for id in out.model.store.ids() {
        assert_eq!(
            out.model.store.get(id),
            last.model.store.get(id),
            "{}",
            out.model.store.name(id)
        );
    }
    assert_eq!(last.optimizer.as_ref(), Some(&out.optimizer));

    let samples = prepare_split(&ds, "train", Execution::Sequential).unwrap();
    let before =
        trainer::predict_prepared(&out.model, &samples, 10, 0.7, Execution::Sequential).unwrap();
    let after =
        trainer::predict_prepared(&last.model, &samples, 10, 0.7, Execution::Sequential).unwrap();
    assert_eq!(before, after);

    // Saving the reloaded model again reproduces the tensor bytes.
    let again = dir.path().join("again");
    checkpoint::save(
        &again,
        &last.model,
        last.optimizer.as_ref(),
        last.epoch,
        last.config.as_ref(),
    )
    .unwrap();
    for p in [
        "params/dec.queries.qdt",
        "adam_m/dec.queries.qdt",
        "index.json",
    ] {
        assert_eq!(
            std::fs::read(ckpt.join("last").join(p)).unwrap(),
            std::fs::read(again.join(p)).unwrap()
        );
    }
}

#[test]
fn loss_descends_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 64);
    let out = trainer::train(&small(10), &ds).unwrap();
    let (first, tenth) = (out.curve[0].loss.total, out.curve[9].loss.total);
    assert!(
        tenth < first,
        "epoch 10 loss {tenth} vs epoch 1 loss {first}"
    );
}

#[test]
fn embedding_text_encoder_trains() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 16);
    let mut cfg = small(6);
    cfg.model.text_encoder = TextEncoder::Embedding;
    let out = trainer::train(&cfg, &ds).unwrap();
    assert!(out.model.store.id("text.embed").is_some());
    assert!(out.curve[5].loss.total < out.curve[0].loss.total);
    assert!(out.curve.iter().all(|e| e.loss.mlm > 0.0));
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 64);
    let cfg = TrainConfig::desk();
    let model = QdVmr::new(cfg.model, cfg.toggles, trainer::input_dims(&ds), cfg.seed).unwrap();
    let a = trainer::evaluate(&model, &ds, "train", 10, 0.7, Execution::Parallel).unwrap();
    let b = trainer::evaluate(&model, &ds, "train", 10, 0.7, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.map_avg < 0.2, "untrained map_avg {}", a.map_avg);
}

#[test]
fn zero_auxiliary_weights_leave_only_the_span_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6);
    let mut cfg = small(1);
    cfg.execution = Execution::Sequential;
    cfg.loss = LossWeights {
        gpa: 0.0,
        w: 0.0,
        ..Default::default()
    };
    let dims = trainer::input_dims(&ds);
    let with_gpa = QdVmr::new(
        cfg.model,
        Toggles {
            gpa: true,
            ..Toggles::NONE
        },
        dims,
        9,
    )
    .unwrap();
    let baseline = QdVmr::new(cfg.model, Toggles::NONE, dims, 9).unwrap();
    let samples = prepare_split(&ds, "train", Execution::Sequential).unwrap();
    let items: Vec<_> = samples
        .iter()
        .map(|s| collate_item(s, &baseline, ItemMode::Inference).unwrap())
        .collect();
    let batch = collate(&items).unwrap();
    let (ca, ga) = compute_gradients(&with_gpa, &batch, &cfg, 1).unwrap();
    let (cb, gb) = compute_gradients(&baseline, &batch, &cfg, 1).unwrap();
    assert_eq!(ca.total, cb.total);
    for (a, b) in ga.iter().zip(&gb) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).iter().all(|d| d.abs() < 1e-12)),
            (None, None) => {}
            (Some(a), None) | (None, Some(a)) => assert!(a.iter().all(|&d| d == 0.0)),
        }
    }

    // Finite-difference spot check of the total against the span loss gradient.
    let step = 1e-5;
    let name = "head.class.weight";
    let id: ParamId = baseline.store.id(name).unwrap();
    for (r, c) in [(0, 0), (3, 1), (7, 0)] {
        let mut up = baseline.clone();
        up.store.get_mut(id)[[r, c]] += step;
        let mut down = baseline.clone();
        down.store.get_mut(id)[[r, c]] -= step;
        let lu = compute_gradients(&up, &batch, &cfg, 1).unwrap().0.vmr;
        let ld = compute_gradients(&down, &batch, &cfg, 1).unwrap().0.vmr;
        let numeric = (lu - ld) / (2.0 * step);
        let analytic = gb[id.0].as_ref().unwrap()[[r, c]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 1e-3, "{name}[{r},{c}]: {analytic} vs {numeric}");
    }
}

#[test]
fn loss_is_finite_at_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8);
    let cfg = small(1);
    for t in [Toggles::NONE, Toggles::ALL] {
        let model = QdVmr::new(cfg.model, t, trainer::input_dims(&ds), 3).unwrap();
        let samples = prepare_split(&ds, "train", Execution::Sequential).unwrap();
        let items: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                collate_item(
                    s,
                    &model,
                    ItemMode::Train {
                        seed: i as u64,
                        mask_ratio: 1.0 / 3.0,
                    },
                )
                .unwrap()
            })
            .collect();
        let (c, g) = compute_gradients(&model, &collate(&items).unwrap(), &cfg, 0).unwrap();
        assert_eq!(c.first_non_finite(), None);
        assert!(g.iter().flatten().all(|m| m.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn divergence_names_a_component() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8);
    let mut cfg = small(5);
    cfg.lr = 1e300;
    cfg.grad_clip = 1e300;
    match trainer::train(&cfg, &ds) {
        Err(Error::Diverged { component, .. }) => assert!(!component.is_empty()),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
    }
}

#[test]
fn best_checkpoint_uses_validation_split_when_present() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 8,
        n_val: 4,
        clips: 12,
        video_dim: 16,
        text_dim: 16,
        ..Default::default()
    };
    generate_synthetic(&cfg, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let out = trainer::train(&small(2), &ds).unwrap();
    assert_eq!(out.eval_split, "val");
    assert_eq!(out.best_report.per_sample.len(), 4);
}
