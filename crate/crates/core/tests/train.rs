use sscd_core::dataio::{toy_pair_dataset, toy_segmentation_dataset, PanoramaPair, ToySceneConfig};
use sscd_core::eval::{
    argmax_labels, change_loss, evaluate_change, evaluate_direct, evaluate_pipeline, evaluate_semantic, gt_masks, predict_semantic_labels,
    semantic_confusion, EvalMode,
};
use sscd_core::engine::Tensor;
use sscd_core::kv::KvMap;
use sscd_core::nn::{load_weights, Architecture, CscdNetConfig, CsscdNetConfig, EncoderConfig, Model, ModelKind, SscdNetConfig};
use sscd_core::synthesis::{synthesize_dataset, AugmentConfig};
use sscd_core::train::{never_stop, synthetic_to_pair, train, train_change, train_semantic, Control, TrainConfig};
use sscd_core::{Error, LabelMap};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        stage_widths: vec![4, 8],
        blocks_per_stage: 1,
        use_batchnorm: true,
    }
}

fn cd_arch() -> Architecture {
    Architecture::Change(CscdNetConfig {
        correlation_max_disp: 1,
        ..CscdNetConfig::with_encoder(tiny_encoder())
    })
}

fn sscd_arch(k: usize) -> Architecture {
    Architecture::Semantic(SscdNetConfig {
        encoder: tiny_encoder(),
        num_classes: k,
        ..Default::default()
    })
}

fn csscd_arch(k: usize) -> Architecture {
    Architecture::Direct(CsscdNetConfig {
        trunk: CscdNetConfig::with_encoder(tiny_encoder()),
        num_classes: k,
    })
}

fn pairs(n: usize, seed: u64) -> Vec<PanoramaPair> {
    toy_pair_dataset(&ToySceneConfig::new(32, 4), n, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.into_pair(format!("p{i}")))
        .collect()
}

fn tuples(n: usize, seed: u64) -> Vec<PanoramaPair> {
    let pool = toy_segmentation_dataset(2 * n, 32, 4, seed).unwrap();
    let mut out = Vec::new();
    synthesize_dataset(&pool, n, 10, seed, |src, s| {
        out.push(synthetic_to_pair(format!("s{}", src.index), s));
        Ok(())
    })
    .unwrap();
    out
}

fn cfg(kind: ModelKind, seed: u64, iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        ..TrainConfig::toy(kind, seed, iterations)
    }
}

fn trace(arch: Architecture, data: &[PanoramaPair], c: &TrainConfig) -> Vec<f64> {
    let model = Model::build(arch, c.seed).unwrap();
    train(model, data, c, None, &mut never_stop).unwrap().loss_trace
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn first_ten_losses_are_bit_identical() {
    let data = pairs(4, 1);
    let c = cfg(ModelKind::Cscdnet, 7, 10);
    let a = trace(cd_arch(), &data, &c);
    let b = trace(cd_arch(), &data, &c);
    assert_eq!(a.len(), 10);
    assert_eq!(bits(&a), bits(&b));
    let other = trace(cd_arch(), &data, &cfg(ModelKind::Cscdnet, 8, 10));
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn semantic_and_direct_traces_are_deterministic() {
    let t = tuples(6, 2);
    let c = cfg(ModelKind::Sscdnet, 3, 5);
    assert_eq!(bits(&trace(sscd_arch(4), &t, &c)), bits(&trace(sscd_arch(4), &t, &c)));
    let p = pairs(4, 2);
    let c = cfg(ModelKind::Csscdnet, 3, 5);
    assert_eq!(bits(&trace(csscd_arch(4), &p, &c)), bits(&trace(csscd_arch(4), &p, &c)));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = pairs(3, 4);
    let model = Model::build(cd_arch(), 1).unwrap();
    let before = model.params().clone();
    let c = TrainConfig {
        lr: 0.0,
        ..cfg(ModelKind::Cscdnet, 1, 5)
    };
    let r = train_change(model, &data, &c, None, &mut never_stop).unwrap();
    for p in before.iter().filter(|p| p.trainable) {
        assert_eq!(r.model.params().get(&p.name).unwrap().tensor, p.tensor, "{}", p.name);
    }
}

#[test]
fn augmentation_changes_the_trace() {
    let t = tuples(6, 5);
    let off = cfg(ModelKind::Sscdnet, 2, 6);
    let on = TrainConfig {
        augment: AugmentConfig::enabled(),
        ..off.clone()
    };
    assert_ne!(bits(&trace(sscd_arch(4), &t, &off)), bits(&trace(sscd_arch(4), &t, &on)));
}

#[test]
fn class_count_mismatch_is_rejected() {
    let t = tuples(4, 6);
    let model = Model::build(sscd_arch(2), 1).unwrap();
    let err = train_semantic(model, &t, &cfg(ModelKind::Sscdnet, 1, 1), None, &mut never_stop).err().unwrap();
    assert!(matches!(err, Error::ClassOutOfRange { num_classes: 2, .. }), "{err}");
    assert!(err.is_data_error());
}

#[test]
fn missing_labels_are_rejected() {
    let mut p = pairs(2, 7);
    p[1].labels = None;
    for arch in [sscd_arch(4), csscd_arch(4)] {
        let model = Model::build(arch, 1).unwrap();
        let err = train(model, &p, &cfg(ModelKind::Sscdnet, 1, 1), None, &mut never_stop).err().unwrap();
        assert!(err.to_string().contains("p1"), "{err}");
    }
    let model = Model::build(cd_arch(), 1).unwrap();
    assert!(train(model, &p, &cfg(ModelKind::Cscdnet, 1, 1), None, &mut never_stop).is_ok());
}

#[test]
fn checkpoints_follow_the_interval() {
    let dir = tempfile::tempdir().unwrap();
    let data = pairs(2, 8);
    let c = TrainConfig {
        checkpoint_every: Some(3),
        ..cfg(ModelKind::Cscdnet, 1, 7)
    };
    let model = Model::build(cd_arch(), 1).unwrap();
    let r = train_change(model, &data, &c, Some(dir.path()), &mut never_stop).unwrap();
    let names: Vec<String> = r.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["iter_0000003.sscd", "iter_0000006.sscd", "final.sscd"]);
    let loaded = load_weights(&r.checkpoints[2]).unwrap();
    assert_eq!(loaded.params(), r.model.params());
}

#[test]
fn observer_can_stop_early() {
    let data = pairs(2, 9);
    let model = Model::build(cd_arch(), 1).unwrap();
    let mut seen = Vec::new();
    let mut obs = |p: &sscd_core::train::Progress| {
        seen.push(p.iteration);
        if p.iteration == 3 {
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let r = train_change(model, &data, &cfg(ModelKind::Cscdnet, 1, 10), None, &mut obs).unwrap();
    assert_eq!(seen, [1, 2, 3]);
    assert!(r.stopped_early);
    assert_eq!(r.iterations_run(), 3);
}

#[test]
fn divergence_reports_iteration_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = pairs(2, 10);
    let c = TrainConfig {
        lr: 1e30,
        checkpoint_every: Some(1),
        ..cfg(ModelKind::Cscdnet, 1, 50)
    };
    let model = Model::build(cd_arch(), 1).unwrap();
    let err = train_change(model, &data, &c, Some(dir.path()), &mut never_stop).err().unwrap();
    match &err {
        Error::Diverged { iteration, last_checkpoint } => {
            assert!(*iteration > 1);
            let ck = last_checkpoint.as_ref().unwrap();
            assert!(ck.exists());
            assert_eq!(ck.file_name().unwrap().to_string_lossy(), format!("iter_{:07}.sscd", iteration - 1));
        }
        other => panic!("expected divergence, got {other}"),
    }
    assert!(err.is_numerical_failure());
}

#[test]
fn wrong_model_kind_is_rejected() {
    let model = Model::build(sscd_arch(4), 1).unwrap();
    let err = train_change(model, &pairs(2, 1), &cfg(ModelKind::Cscdnet, 1, 1), None, &mut never_stop).err().unwrap();
    assert!(matches!(err, Error::CheckpointMismatch { .. }));
}

#[test]
fn config_kv_round_trip_and_validation() {
    let mut c = TrainConfig::new(ModelKind::Sscdnet, 9);
    c.augment = AugmentConfig::enabled();
    c.checkpoint_every = Some(17);
    let mut back = TrainConfig::toy(ModelKind::Cscdnet, 0, 1);
    back.apply_kv(&c.to_kv()).unwrap();
    assert_eq!(back, c);
    let mut bad = KvMap::new();
    bad.set("batch_size", 0);
    assert!(back.apply_kv(&bad).is_err());
    assert_eq!(TrainConfig::toy(ModelKind::Cscdnet, 0, 100).checkpoint_interval(), 10);
}

#[test]
fn argmax_prefers_lower_class_on_ties() {
    let logits = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
    let l = argmax_labels(&logits).unwrap();
    assert_eq!(l[0].data(), &[0, 1]);
}

#[test]
fn change_evaluation_is_consistent() {
    let data = pairs(3, 11);
    let model = Model::build(cd_arch(), 2).unwrap();
    let ev = evaluate_change(&model, &data, 0.5).unwrap();
    assert_eq!(ev.mode, EvalMode::Cd);
    assert_eq!(ev.masks.len(), 3);
    assert_eq!(ev.per_image.len(), 3);
    let (t, best) = ev.best_threshold.unwrap();
    assert!((0.05..=0.95).contains(&t));
    assert!(best >= ev.report.change.unwrap().f1 - 1e-12);
    let all_on = evaluate_change(&model, &data, 0.0).unwrap();
    assert!(all_on.masks.iter().all(|m| m.count_ones() == m.data().len()));
    assert!(change_loss(&model, &data).unwrap().is_finite());
}

#[test]
fn pipeline_with_oracle_masks_matches_semantic_mode() {
    let t = tuples(4, 12);
    let semantic = Model::build(sscd_arch(4), 3).unwrap();
    let a = evaluate_semantic(&semantic, &t, &gt_masks(&t)).unwrap();
    let b = predict_semantic_labels(&semantic, &t, Some(&gt_masks(&t))).unwrap();
    assert_eq!(a.labels, b);
    let (cm, each) = semantic_confusion(&b, &t, 4).unwrap();
    assert_eq!(a.confusion.as_ref(), Some(&cm));
    assert_eq!(each.len(), 4);
    assert_eq!(cm.total(), 2 * 4 * 32 * 32);
    let cd = Model::build(cd_arch(), 3).unwrap();
    let p = evaluate_pipeline(&cd, &semantic, &t, 0.5).unwrap();
    assert_eq!(p.mode, EvalMode::Pipeline);
    assert_eq!(p.labels.len(), 4);
    assert!(evaluate_pipeline(&semantic, &semantic, &t, 0.5).is_err());
}

#[test]
fn direct_evaluation_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = pairs(3, 13);
    let model = Model::build(csscd_arch(4), 1).unwrap();
    let r = train(model, &data, &cfg(ModelKind::Csscdnet, 1, 3), Some(dir.path()), &mut never_stop).unwrap();
    let before = evaluate_direct(&r.model, &data).unwrap();
    let loaded = load_weights(r.checkpoints.last().unwrap()).unwrap();
    let after = evaluate_direct(&loaded, &data).unwrap();
    assert_eq!(before.labels, after.labels);
    assert_eq!(before.report.miou.to_bits(), after.report.miou.to_bits());
}

#[test]
fn unlabeled_pixels_are_ignored() {
    let mut t = tuples(1, 14);
    let (a, b) = t[0].labels.clone().unwrap();
    let mut d = a.data().to_vec();
    d[..10].fill(255);
    t[0].labels = Some((LabelMap::new(a.width(), a.height(), d).unwrap(), b));
    let model = Model::build(sscd_arch(4), 1).unwrap();
    let ev = evaluate_semantic(&model, &t, &gt_masks(&t)).unwrap();
    assert_eq!(ev.confusion.unwrap().total(), 2 * 32 * 32 - 10);
}
