use fan_autograd::{Graph, ParamGroup, ParamStore, Tensor};
use fan_core::ablation::variants;
use fan_core::checkpoint::Checkpoint;
use fan_core::data::{generate_split, Dataset, GenConfig, Split};
use fan_core::train::{evaluate, lr_at, train, Adam, EvalReport, TrainOptions};
use fan_core::{FanError, FanModel, ModelConfig, TrainConfig, Vocabulary};

fn tiny_data(split: Split, n: usize) -> Dataset {
    let vocab = Vocabulary::synthetic();
    let cfg = GenConfig { size: 32, min_extent: 0.12, max_extent: 0.2, ..GenConfig::default() };
    let samples = generate_split(split, n, 0, &cfg, &vocab, ModelConfig::tiny().max_len).unwrap();
    Dataset { vocab, samples }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig { model: ModelConfig::tiny(), epochs: 3, lr_milestone: 2, batch_size: 2, max_steps: Some(steps), ..TrainConfig::desk() }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap(), ParamGroup::Default).unwrap();
    let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
    adam.step(&mut s, &[Tensor::new(vec![3], vec![0.5, -3.0, 1e-3]).unwrap()], &[0.01]).unwrap();
    let got = s.tensor(w).data();
    for (g, want) in got.iter().zip([0.99, 2.01, -1.01]) {
        assert!((g - want).abs() < 1e-6, "{g} vs {want}");
    }
}

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![2, 2], vec![0.3, -0.1, 4.0, 0.0]).unwrap(), ParamGroup::Default).unwrap();
    let before = s.clone();
    let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        adam.step(&mut s, &[Tensor::zeros(vec![2, 2])], &[0.1]).unwrap();
    }
    assert_eq!(s, before);
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let target = [3.0, -1.5, 0.25];
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::zeros(vec![3]), ParamGroup::Default).unwrap();
    let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
    let mut steps = 0;
    while steps < 2000 {
        let mut g = Graph::new();
        let p = s.bind(&mut g, true);
        let t = g.constant(Tensor::new(vec![3], target.iter().map(|t| -t).collect()).unwrap());
        let d = g.add(p[w], t).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        adam.step(&mut s, &p.grads(&g), &[0.01]).unwrap();
        steps += 1;
        if s.tensor(w).data().iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-6) {
            break;
        }
    }
    let err = s.tensor(w).data().iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "error {err} after {steps} steps");
}

#[test]
fn adam_nan_gradient_names_the_parameter() {
    let mut s = ParamStore::new();
    s.add("vision.stem.0.conv", Tensor::zeros(vec![2]), ParamGroup::Backbone).unwrap();
    let before = s.clone();
    let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
    let err = adam.step(&mut s, &[Tensor::new(vec![2], vec![f64::NAN, 1.0]).unwrap()], &[0.1]).unwrap_err();
    assert!(matches!(err, FanError::NonFinite(_)));
    assert!(err.to_string().contains("vision.stem.0.conv"));
    assert_eq!(s, before);
}

#[test]
fn schedule_of_the_full_scale_recipe() {
    let cfg = TrainConfig::paper();
    assert_eq!(lr_at(0, &cfg, false), 1e-4);
    assert_eq!(lr_at(34, &cfg, false), 1e-4);
    assert!((lr_at(35, &cfg, false) - 1e-5).abs() < 1e-18);
    assert!((lr_at(0, &cfg, true) - 1e-5).abs() < 1e-18);
    assert!((lr_at(49, &cfg, true) - 1e-6).abs() < 1e-18);
    for e in 1..cfg.epochs {
        assert!(lr_at(e, &cfg, false) <= lr_at(e - 1, &cfg, false));
        assert!(lr_at(e, &cfg, true) <= lr_at(e - 1, &cfg, true));
    }
}

#[test]
fn report_from_masks_and_ious() {
    let ds = tiny_data(Split::Val, 4);
    let gt: Vec<_> = ds.samples.iter().map(|s| s.mask.clone()).collect();
    let r = EvalReport::from_masks(&gt, &gt).unwrap();
    assert_eq!((r.mean_iou, r.p50, r.p70, r.p90), (1.0, 1.0, 1.0, 1.0));
    let r = EvalReport::from_ious(vec![1.0, 0.6, 0.2]).unwrap();
    assert_eq!(r.p50, 2.0 / 3.0);
    assert_eq!(r.p70, 1.0 / 3.0);
    assert!((r.mean_iou - 0.6).abs() < 1e-15);
    assert!(EvalReport::from_masks(&gt[..2], &gt).is_err());
}

#[test]
fn evaluation_is_repeatable_and_checks_compatibility() {
    let ds = tiny_data(Split::Val, 3);
    let model = FanModel::new(&ModelConfig::tiny(), 4).unwrap();
    let a = evaluate(&model, &ds.samples).unwrap();
    let b = evaluate(&model, &ds.samples).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count, 3);

    let other = ModelConfig { max_len: 12, ..ModelConfig::tiny() };
    let wrong = FanModel::new(&other, 4).unwrap();
    assert!(matches!(evaluate(&wrong, &ds.samples), Err(FanError::Compatibility(_))));

    let ckpt = Checkpoint::new(TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::desk() }, model.params.clone(), None, 0, 0);
    assert!(ckpt.expect_config(&ModelConfig::tiny()).is_ok());
    assert!(matches!(ckpt.expect_config(&other), Err(FanError::Compatibility(_))));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let train_set = tiny_data(Split::Train, 6);
    let val_set = tiny_data(Split::Val, 3);
    let cfg = tiny_train(4);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), verbose: false };
    let a = train(&cfg, &train_set, Some(&val_set), &opts).unwrap();
    let b = train(&cfg, &train_set, Some(&val_set), &TrainOptions::default()).unwrap();
    assert_eq!(a.step_losses.len(), 4);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.model.params, b.model.params);

    let ckpt = a.checkpoint(&cfg);
    let bytes = ckpt.to_bytes();
    assert_eq!(bytes, b.checkpoint(&cfg).to_bytes());
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let path = dir.path().join("again.ckpt");
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let reloaded = Checkpoint::load(&path).unwrap().model().unwrap();
    assert_eq!(evaluate(&reloaded, &val_set.samples).unwrap(), evaluate(&a.model, &val_set.samples).unwrap());

    let last = Checkpoint::load(&dir.path().join(fan_core::train::LAST)).unwrap();
    assert_eq!(last.params, ckpt.params);
    assert!(dir.path().join(fan_core::train::BEST).exists());
    let metrics = std::fs::read_to_string(dir.path().join(fan_core::train::METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), a.epochs.len());

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(FanError::Data(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(FanError::Data(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(FanError::Data(_))));
    let mut future = bytes;
    future[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&future), Err(FanError::Compatibility(_))));
}

#[test]
fn different_seed_changes_training() {
    let train_set = tiny_data(Split::Train, 4);
    let a = train(&tiny_train(2), &train_set, None, &TrainOptions::default()).unwrap();
    let b = train(&TrainConfig { seed: 1, ..tiny_train(2) }, &train_set, None, &TrainOptions::default()).unwrap();
    assert_ne!(a.step_losses, b.step_losses);
}

#[test]
fn every_ablation_variant_runs() {
    let base = TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::desk() };
    let rows = variants(&base);
    assert_eq!(rows.len(), 12);
    let ds = tiny_data(Split::Val, 1);
    let s = &ds.samples[0];
    let mut hashes = std::collections::BTreeSet::new();
    for v in &rows {
        let model = FanModel::new(&v.config.model, 0).unwrap();
        let pred = model.predict(&s.image, &s.tokens).unwrap();
        assert_eq!((pred.mask.height(), pred.mask.width()), (32, 32), "{}", v.name);
        hashes.insert(v.config.model.hash());
    }
    assert_eq!(hashes.len(), 11);
}

#[test]
fn invalid_training_config_is_rejected() {
    let ds = tiny_data(Split::Train, 2);
    for bad in [
        TrainConfig { base_lr: 0.0, ..tiny_train(1) },
        TrainConfig { batch_size: 0, ..tiny_train(1) },
        TrainConfig { lr_milestone: 5, epochs: 3, ..tiny_train(1) },
    ] {
        assert!(matches!(train(&bad, &ds, None, &TrainOptions::default()), Err(FanError::Config(_))));
    }
    let empty = Dataset { vocab: ds.vocab.clone(), samples: vec![] };
    assert!(matches!(train(&tiny_train(1), &empty, None, &TrainOptions::default()), Err(FanError::Data(_))));
}
