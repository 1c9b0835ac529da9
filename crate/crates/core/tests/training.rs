mod common;

use cascade_autograd::{Adam, Tape};
use cascade_core::checkpoint::load_checkpoint;
use cascade_core::generators::{shape_input, ArchitectureConfig, CascadeState, Models, Variant};
use cascade_core::losses::{shape_loss, RandomPyramid};
use cascade_core::parsing::LabelSet;
use cascade_core::structure::GaborParams;
use cascade_core::training::{
    compute_upstream, prepare_dataset, run_training, train_epoch, write_loss_log, OptimizerConfig, PrepareOptions, Stage,
    TrainConfig,
};
use cascade_core::Error;

const SIZE: usize = 32;

fn tiny() -> ArchitectureConfig {
    ArchitectureConfig { base_width: 4, num_residual_blocks: 1, downsampling_steps: 1 }
}

fn config(variant: Variant) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        variant,
        height: SIZE,
        width: SIZE,
        architecture: tiny(),
        optimizer: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::conventional() },
        ..Default::default()
    }
}

#[test]
fn stage_wise_run_writes_checkpoints_and_log() {
    let ds = common::dataset(SIZE, 4, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&config(Variant::Pss), &ds, Some(dir.path())).unwrap();
    let stages: Vec<&str> = out.epochs.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(stages, ["shape", "structure", "appearance", "refinement"]);
    assert_eq!(out.records().count(), 16);
    assert!(out.records().all(|r| r.total.is_finite() && r.total >= 0.0));

    let (models, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(models, out.models);
    assert_eq!((meta.epoch, meta.stage.as_str()), (3, "refinement"));

    let log = dir.path().join("losses.csv");
    write_loss_log(&log, out.records()).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next().unwrap(), "stage,epoch,frame,l_shp,l_str,l_app,l_ref,l_total");
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn pose_only_variant_trains_two_stages() {
    let ds = common::dataset(SIZE, 3, 2);
    let out = run_training(&config(Variant::P), &ds, None).unwrap();
    let stages: Vec<&str> = out.epochs.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(stages, ["appearance", "refinement"]);
    assert!(out.models.shape.is_none() && out.models.structure.is_none());
}

#[test]
fn identical_runs_are_bit_identical() {
    let ds = common::dataset(SIZE, 3, 3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = TrainConfig { joint_epochs: 1, ..config(Variant::Pss) };
    let ra = run_training(&cfg, &ds, Some(a.path())).unwrap();
    let rb = run_training(&cfg, &ds, Some(b.path())).unwrap();
    let bytes = |d: &std::path::Path| std::fs::read(d.join("epoch_0004.ckpt")).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
    assert_eq!(ra.epochs, rb.epochs);
    let other = run_training(&TrainConfig { seed: 1, ..cfg }, &ds, None).unwrap();
    assert_ne!(other.models, ra.models);
}

#[test]
fn mismatched_resolution_is_a_dataset_error() {
    let ds = common::dataset(SIZE, 3, 4);
    let cfg = TrainConfig { height: 64, width: 64, ..config(Variant::Pss) };
    assert!(matches!(run_training(&cfg, &ds, None), Err(Error::Dataset(_))));
}

/// With a vanishing learning rate the weights move by at most 1e-30, so
/// every frame's loss can be recomputed from the feedback it should have
/// received.
#[test]
fn first_epoch_feeds_annotations_and_later_epochs_feed_predictions() {
    let ds = common::dataset(SIZE, 4, 5);
    let cfg = TrainConfig { optimizer: OptimizerConfig { learning_rate: 1e-30, ..OptimizerConfig::conventional() }, ..config(Variant::Pss) };
    let phi = RandomPyramid::<f32>::new(cfg.feature_seed);
    let mut models = Models::new(Variant::Pss, ds.labels.clone(), tiny(), 0).unwrap();
    let frozen = models.clone();
    let up = compute_upstream(&models, Stage::Shape, &ds, &cfg.bootstrap).unwrap();
    let mut opt = Adam::new(cfg.optimizer.adam());
    let forced = train_epoch(&mut models, Stage::Shape, &ds, &up, &mut opt, 0, 0, &cfg, &phi).unwrap();
    let free = train_epoch(&mut models, Stage::Shape, &ds, &up, &mut opt, 1, 1, &cfg, &phi).unwrap();
    let moved = models.shape.as_ref().unwrap().params().iter().zip(frozen.shape.as_ref().unwrap().params());
    assert!(moved.map(|(a, b)| a.max_abs_diff(b)).fold(0.0f32, f32::max) < 1e-20);

    let net = frozen.shape.as_ref().unwrap();
    let loss_with = |n: usize, state: &CascadeState| -> (f64, cascade_autograd::Tensor<f32>) {
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let out = net.forward(&params, tape.constant(shape_input(&ds.samples[n].pose, state).unwrap())).unwrap();
        (shape_loss(out, &ds.samples[n].gt_shape).unwrap().value().data()[0] as f64, out.value().as_ref().clone())
    };
    let j = ds.labels.len();
    let mut prev_logits = None;
    for n in 0..ds.len() {
        let (teacher, predicted) = if n == 0 {
            (CascadeState::cold(j, SIZE, SIZE), CascadeState::cold(j, SIZE, SIZE))
        } else {
            let p = &ds.samples[n - 1];
            let mut s = CascadeState::cold(j, SIZE, SIZE);
            s.prev_shape_logits = prev_logits.take().unwrap();
            (CascadeState::from_annotations(&p.gt_shape, &p.gt_structure, j), s)
        };
        let (lt, _) = loss_with(n, &teacher);
        let (lp, logits) = loss_with(n, &predicted);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs();
        assert!(close(forced.records[n].components.shape, lt), "forced frame {n}");
        assert!(close(free.records[n].components.shape, lp), "free frame {n}");
        if n > 0 {
            assert!(!close(lt, lp), "frame {n}: feedback sources should differ");
        }
        prev_logits = Some(logits);
    }
}

#[test]
fn prepared_structure_is_cached_and_reused() {
    let seq = common::scene(SIZE, 5, 6);
    let cache = tempfile::tempdir().unwrap();
    let options =
        PrepareOptions { gabor: GaborParams::for_resolution(SIZE), cache_dir: Some(cache.path().to_path_buf()), ..Default::default() };
    let prep = || prepare_dataset(&seq.frames, &seq.keypoints, &seq.labels, &seq.background, &LabelSet::atr(), &options).unwrap();
    let (first, r1) = prep();
    assert_eq!(r1.extracted + r1.cached, 5);
    assert!(r1.extracted > 0);
    let (second, r2) = prep();
    assert_eq!((r2.extracted, r2.cached), (0, 5));
    assert_eq!(first, second);

    let uncached = PrepareOptions { cache_dir: None, ..options.clone() };
    let (third, _) = prepare_dataset(&seq.frames, &seq.keypoints, &seq.labels, &seq.background, &LabelSet::atr(), &uncached).unwrap();
    assert_eq!(first, third);
}

#[test]
fn prepare_rejects_length_mismatch() {
    let seq = common::scene(SIZE, 3, 7);
    let options = PrepareOptions { cache_dir: None, ..Default::default() };
    let err = prepare_dataset(&seq.frames[..2], &seq.keypoints, &seq.labels, &seq.background, &LabelSet::atr(), &options);
    assert!(matches!(err, Err(Error::Dataset(_))));
}
