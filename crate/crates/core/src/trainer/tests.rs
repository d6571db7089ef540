use std::collections::BTreeMap;

use super::*;
use crate::blocks::Module;
use crate::evalcli::{gen_synthetic, SynthConfig};

fn data(n: usize, seed: u64) -> Dataset {
    gen_synthetic(&SynthConfig {
        num_images: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        warmup_epochs: 0,
        ..Default::default()
    }
}

fn values(m: &Model<f32>) -> BTreeMap<String, Vec<f32>> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |name, v| {
        out.insert(name.to_string(), v.to_vec());
    });
    out
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut cfg = ModelConfig::nano_desk(3);
    cfg.head_branches.enhanced_dfl_aux = true;
    let mut t = Trainer::new(quick(1), Model::new(&cfg, 2).unwrap()).unwrap();
    t.run_epoch(&Prepared::new(&data(8, 1), 64).unwrap()).unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::read(&bytes[..]).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(values(&loaded.to_model().unwrap()), values(&t.model));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = Checkpoint::from_model(&Model::<f32>::new(&ModelConfig::nano_desk(2), 0).unwrap(), 0)
        .to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::read(&bad[..]), Err(Error::Format(_))));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::read(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::read(&long[..]), Err(Error::Format(_))));
}

#[test]
fn loading_into_another_architecture_names_the_difference() {
    let ckpt = Checkpoint::from_model(&Model::<f32>::new(&ModelConfig::nano_desk(2), 0).unwrap(), 0);
    let mut cfg = ModelConfig::nano_desk(2);
    cfg.head_branches.anchor_based_aux = false;
    let other = Model::<f32>::new(&cfg, 0).unwrap();
    match ckpt.load_into(&other) {
        Err(Error::Mismatch(msg)) => {
            assert!(msg.contains("unexpected:"), "{msg}");
            assert!(msg.contains("ab_"), "{msg}");
        }
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let narrow = Model::<f32>::new(&ModelConfig::nano_desk(5), 0).unwrap();
    match ckpt.load_into(&narrow) {
        Err(Error::Mismatch(msg)) => assert!(msg.contains("shape:"), "{msg}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

/// Training loss on the fixed 4-image batch before and after one epoch of
/// two steps.
fn loss_drop(seed: u64, aat_enabled: bool) -> f64 {
    let prep = Prepared::new(&data(4, 100 + seed), 64).unwrap();
    let cfg = TrainConfig {
        seed,
        batch_size: 2,
        warmup_epochs: 0,
        epochs: 1,
        aat_enabled,
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, Model::new(&ModelConfig::nano_desk(2), seed).unwrap()).unwrap();
    let (x, gts) = prep.batch(&[0, 1, 2, 3], &[false; 4]).unwrap();
    let before = no_grad(|| t.batch_loss(&x, &gts, 0, 0.0)).unwrap().1;
    t.run_epoch(&prep).unwrap();
    let after = no_grad(|| t.batch_loss(&x, &gts, 0, 0.0)).unwrap().1;
    before - after
}

#[test]
fn one_epoch_lowers_the_loss() {
    let with_aux = (0..10).filter(|&s| loss_drop(s, true) > 0.0).count();
    assert!(with_aux >= 9, "loss fell in {with_aux}/10 seeds");
    // The anchor-based targets follow the moving IoU of its own boxes, so
    // only the anchor-free objective is monotone step by step.
    assert!((0..10).all(|s| loss_drop(s, false) > 0.0));
}

#[test]
fn disabled_aat_matches_a_model_without_anchor_based_branches() {
    let with_ab = Model::<f32>::new(&ModelConfig::nano_desk(2), 4).unwrap();
    let mut cfg = ModelConfig::nano_desk(2);
    cfg.head_branches.anchor_based_aux = false;
    let without = Model::<f32>::new(&cfg, 99).unwrap();
    let src = values(&with_ab);
    without.visit("", &mut |name, v| v.set_data(src[name].clone()).unwrap());

    let prep = Prepared::new(&data(8, 3), 64).unwrap();
    let tc = TrainConfig {
        aat_enabled: false,
        ..quick(2)
    };
    let mut a = Trainer::new(tc.clone(), with_ab).unwrap();
    let mut b = Trainer::new(tc, without).unwrap();
    a.fit(&prep).unwrap();
    b.fit(&prep).unwrap();
    let (va, vb) = (values(&a.model), values(&b.model));
    for (name, v) in &vb {
        assert_eq!(&va[name], v, "{name}");
    }
    // The auxiliary branch itself receives no updates.
    assert_eq!(a.history, b.history);
}

#[test]
fn resumed_training_is_bit_identical() {
    let prep = Prepared::new(&data(10, 5), 64).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 1,
        ..quick(3)
    };
    let model = || Model::new(&ModelConfig::nano_desk(2), 6).unwrap();
    let mut straight = Trainer::new(cfg.clone(), model()).unwrap();
    straight.fit(&prep).unwrap();

    let mut first = Trainer::new(cfg.clone(), model()).unwrap();
    first.run_epoch(&prep).unwrap();
    let saved = Checkpoint::read(&first.checkpoint().to_bytes()[..]).unwrap();
    let mut resumed = Trainer::resume(cfg, &saved).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.fit(&prep).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    assert_eq!(resumed.history[..], straight.history[1..]);
}

#[test]
fn alpha_trace_runs_from_one_to_the_floor() {
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let trace: Vec<f64> = (0..10).map(|e| cfg.alpha(e).unwrap()).collect();
    assert!((trace[0] - 1.0).abs() < 1e-12);
    assert!((trace[9] - 0.01).abs() < 1e-12);
    assert!(trace.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let cfg = TrainConfig {
        epochs: 10,
        warmup_epochs: 2,
        ..Default::default()
    };
    let steps = 5;
    assert!((cfg.learning_rate(0, 0, steps) - cfg.lr0 / 10.0).abs() < 1e-12);
    let warm: Vec<f64> = (0..10).map(|i| cfg.learning_rate(i / steps, i % steps, steps)).collect();
    assert!(warm.windows(2).all(|w| w[1] > w[0]));
    let after: Vec<f64> = (2..10).map(|e| cfg.learning_rate(e, 0, steps)).collect();
    assert!(after.windows(2).all(|w| w[1] < w[0]));
    assert!(after[7] > cfg.lr0 * cfg.lrf);
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let cfg = ModelConfig::nano_desk(2);
    let prep = Prepared::new(&data(8, 7), 64).unwrap();
    let teacher = Checkpoint::from_model(&Model::<f32>::new(&cfg, 1).unwrap(), 0);
    let tc = TrainConfig {
        distill: DistillMode::Standard,
        teacher_checkpoint: Some("t".into()),
        ..quick(2)
    };
    let mut t = Trainer::new(tc, Model::new(&cfg, 2).unwrap()).unwrap();
    t.set_teacher(&teacher).unwrap();
    let before = values(&t.teacher.as_ref().unwrap().model);
    t.fit(&prep).unwrap();
    assert_eq!(values(&t.teacher.as_ref().unwrap().model), before);
    assert!(t.history.iter().all(|h| h.kd_loss > 0.0));
    assert!((t.history[0].alpha - 1.0).abs() < 1e-12);
    assert!((t.history[1].alpha - 0.01).abs() < 1e-12);
}

#[test]
fn teachers_must_fit_the_student() {
    let cfg = ModelConfig::nano_desk(2);
    let mut other = cfg.clone();
    other.use_bic = false;
    let standard = TrainConfig {
        distill: DistillMode::Standard,
        teacher_checkpoint: Some("t".into()),
        ..quick(1)
    };
    let mut t = Trainer::new(standard, Model::new(&cfg, 0).unwrap()).unwrap();
    let teacher = Checkpoint::from_model(&Model::<f32>::new(&other, 0).unwrap(), 0);
    assert!(matches!(t.set_teacher(&teacher), Err(Error::Mismatch(_))));

    // A stripped DLD model has lost the branch a DLD teacher must provide.
    let mut dld_cfg = cfg.clone();
    dld_cfg.head_branches.enhanced_dfl_aux = true;
    let dld = TrainConfig {
        distill: DistillMode::Dld,
        ..t.config.clone()
    };
    let mut stripped = Model::<f32>::new(&dld_cfg, 0).unwrap();
    stripped.strip_auxiliary();
    let mut t = Trainer::new(dld, Model::new(&dld_cfg, 1).unwrap()).unwrap();
    match t.set_teacher(&Checkpoint::from_model(&stripped, 0)) {
        Err(Error::Mismatch(msg)) => assert!(msg.contains("regression branch"), "{msg}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let mut plain = TrainConfig::default();
    plain.epochs = 1;
    let mut t = Trainer::new(plain, Model::new(&cfg, 1).unwrap()).unwrap();
    assert!(matches!(t.set_teacher(&teacher), Err(Error::Config(_))));
}

#[test]
fn dld_student_keeps_only_the_direct_branch() {
    let mut cfg = ModelConfig::nano_desk(2);
    cfg.head_branches.enhanced_dfl_aux = true;
    let ds = data(8, 8);
    let teacher = train(&quick(1), Model::new(&cfg, 0).unwrap(), &ds).unwrap();
    let student = dld_train(&quick(1), Model::new(&cfg, 1).unwrap(), &teacher, &ds).unwrap();
    assert!(student.form.stripped);
    let m = student.to_model::<f32>().unwrap();
    let x = Tensor::new(vec![0.5f32; 3 * 64 * 64], &[1, 3, 64, 64]).unwrap();
    let out = no_grad(|| m.forward(&x, false, HeadMode::Train)).unwrap();
    for l in &out.levels {
        assert_eq!(l.af_reg_naive.as_ref().unwrap().shape()[1], 4);
        assert!(l.af_reg_dist.is_none() && l.ab_cls.is_none() && l.ab_reg.is_none());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let m = ModelConfig::nano_desk(2);
    let bad = [
        TrainConfig { batch_size: 1, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { input_size: 48, ..Default::default() },
        TrainConfig { flip_prob: 1.5, ..Default::default() },
        TrainConfig { distill: DistillMode::Standard, ..Default::default() },
        TrainConfig {
            distill: DistillMode::Dld,
            teacher_checkpoint: Some("t".into()),
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(&m), Err(Error::Config(_))), "{c:?}");
    }
    assert!(TrainConfig::default().validate(&m).is_ok());

    let mut fused = Model::<f32>::new(&m, 0).unwrap();
    fused.mark_calibrated();
    fused.fuse().unwrap();
    assert!(matches!(Trainer::new(TrainConfig::default(), fused), Err(Error::State(_))));
}

#[test]
fn too_little_data_is_an_error() {
    let mut t = Trainer::new(quick(1), Model::new(&ModelConfig::nano_desk(2), 0).unwrap()).unwrap();
    let prep = Prepared::new(&data(1, 0), 64).unwrap();
    assert!(matches!(t.run_epoch(&prep), Err(Error::Data(_))));
    let prep = Prepared::new(&data(4, 0), 32).unwrap();
    assert!(matches!(t.run_epoch(&prep), Err(Error::Config(_))));
}

#[test]
fn flipped_batches_mirror_boxes() {
    let prep = Prepared::new(&data(2, 9), 64).unwrap();
    let (x, gts) = prep.batch(&[0], &[true]).unwrap();
    let orig = &prep.gts[0];
    for (b, o) in gts[0].boxes.iter().zip(&orig.boxes) {
        assert_eq!(*b, [64.0 - o[2], o[1], 64.0 - o[0], o[3]]);
    }
    let d = x.data();
    assert_eq!(d[0], prep.images[0][63]);
}
