mod common;

use mvfd_core::geometry::ViewParams;
use mvfd_core::ingestion::Split;
use mvfd_core::model::DetectorModel;
use mvfd_core::training::{
    bce_loss, fit, pose_samples, pretrain_pose, resume, EpochRecord, PoseTrainConfig, RunLog, TrainConfig,
    LAST_CHECKPOINT, RUN_LOG,
};
use mvfd_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn without_clock(records: &[EpochRecord]) -> Vec<serde_json::Value> {
    records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock_s");
            v
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let (train, val) = (common::samples(4, 1, Split::Train), common::samples(2, 2, Split::Val));
    let mut model = DetectorModel::build(&common::small_config(0)).unwrap();
    let before = model.store.weight_checksum();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick(2)
    };
    let report = fit(&mut model, &train, &val, &cfg, None).unwrap();
    assert_eq!(report.log.records.len(), 2);
    assert_eq!(model.store.weight_checksum(), before);
}

#[test]
fn seeded_runs_repeat_exactly() {
    let (train, val) = (common::samples(4, 1, Split::Train), common::samples(2, 2, Split::Val));
    let run = || {
        let mut model = DetectorModel::build(&common::small_config(3)).unwrap();
        let report = fit(&mut model, &train, &val, &quick(3), None).unwrap();
        (model.store.state_checksum(), without_clock(&report.log.records))
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_where_the_checkpoint_left_off() {
    let (train, val) = (common::samples(4, 1, Split::Train), common::samples(2, 2, Split::Val));
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick(4)
    };
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = DetectorModel::build(&common::small_config(1)).unwrap();
    let full_report = fit(&mut full, &train, &val, &cfg, Some(full_dir.path())).unwrap();
    assert!(full_dir.path().join(LAST_CHECKPOINT).exists());
    let on_disk = RunLog::load(&full_dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(without_clock(&on_disk.records), without_clock(&full_report.log.records));

    let resumed_dir = tempfile::tempdir().unwrap();
    let (model, report) = resume(
        &full_dir.path().join("epoch_0002.ckpt"),
        &train,
        &val,
        &cfg,
        Some(resumed_dir.path()),
    )
    .unwrap();
    assert_eq!(report.log.records.first().map(|r| r.epoch), Some(1));
    assert_eq!(report.log.records.len(), 4);
    assert_eq!(without_clock(&report.log.records), without_clock(&full_report.log.records));
    assert_eq!(report.best_epoch, full_report.best_epoch);
    assert_eq!(model.store.state_checksum(), full.store.state_checksum());
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let (train, val) = (common::samples(3, 1, Split::Train), common::samples(2, 2, Split::Val));
    let dir = tempfile::tempdir().unwrap();
    let mut model = DetectorModel::build(&common::small_config(1)).unwrap();
    fit(&mut model, &train, &val, &quick(1), Some(dir.path())).unwrap();
    let other = TrainConfig {
        learning_rate: 0.5,
        ..quick(2)
    };
    let err = resume(&dir.path().join(LAST_CHECKPOINT), &train, &val, &other, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn non_finite_parameters_report_the_batch() {
    let (train, val) = (common::samples(3, 1, Split::Train), common::samples(2, 2, Split::Val));
    let mut model = DetectorModel::build(&common::small_config(0)).unwrap();
    let id = model.store.find("fusion.stage2.fc2.weight").unwrap();
    let t = model.store.get_mut(id);
    *t = mvfd_core::nn::Tensor::full(t.shape(), f64::NAN);
    match fit(&mut model, &train, &val, &quick(1), None) {
        Err(Error::NumericFault { batch, .. }) => assert_eq!(batch, Some(0)),
        other => panic!("expected a numeric fault, got {other:?}"),
    }
}

#[test]
fn tiny_training_sets_are_rejected() {
    let (train, val) = (common::samples(1, 1, Split::Train), common::samples(1, 2, Split::Val));
    let mut model = DetectorModel::build(&common::small_config(0)).unwrap();
    assert!(fit(&mut model, &train[..1], &val, &quick(1), None).is_err());
    assert!(matches!(fit(&mut model, &train, &[], &quick(1), None), Err(Error::EmptySplit(_))));
}

#[test]
fn bce_matches_a_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let q = p[i].clamp(1e-7, 1.0 - 1e-7);
            oracle -= if y[i] > 0.5 { q.ln() } else { (1.0 - q).ln() };
        }
        oracle /= n as f64;
        assert!((bce_loss(&p, &y).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn pose_pretraining_needs_every_class() {
    let data = pose_samples(1, 256, 0, &ViewParams::default()).unwrap();
    let mut model = DetectorModel::build(&common::small_config(0)).unwrap();
    let partial: Vec<_> = data.iter().filter(|s| s.class != 4).cloned().collect();
    match pretrain_pose(&mut model, &partial, &PoseTrainConfig::default()) {
        Err(Error::MissingPoseClasses(missing)) => assert_eq!(missing, vec![4]),
        other => panic!("expected missing classes, got {other:?}"),
    }
}

#[test]
fn pose_pretraining_learns_and_repeats() {
    let data = pose_samples(1, 256, 0, &ViewParams::default()).unwrap();
    let cfg = PoseTrainConfig {
        epochs: 3,
        batch_size: 13,
        ..PoseTrainConfig::default()
    };
    let run = || {
        let mut model = DetectorModel::build(&common::small_config(2)).unwrap();
        let frozen = model.pose_frozen();
        let r = pretrain_pose(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.pose_frozen(), frozen);
        r
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(a.epochs.len(), 4);
    assert!(a.epochs.last().unwrap().loss < a.epochs[0].loss);
    assert!(a.epochs.iter().all(|e| e.max_softmax_error < 1e-6));
}
