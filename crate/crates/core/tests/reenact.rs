mod common;

use cascade_core::generators::{cascade_step, ArchitectureConfig, CascadeState, Models, Overrides, Variant};
use cascade_core::parsing::{LabelSet, SegmentationMap};
use cascade_core::pose::{LimbMap, PoseConditioning, PoseStats};
use cascade_core::reenact::{
    bootstrap_first_frame, reenact_sequence, run_sequence, scale_wrinkles, state_delta, swap_conditioning, BootstrapConfig,
    OverrideStreams, ReenactOptions,
};
use cascade_core::structure::StructureField;
use cascade_core::Error;

const SIZE: usize = 32;

fn models(variant: Variant) -> Models {
    let arch = ArchitectureConfig { base_width: 4, num_residual_blocks: 1, downsampling_steps: 1 };
    Models::new(variant, LabelSet::atr(), arch, 3).unwrap()
}

fn poses(ds: &cascade_core::training::Dataset) -> Vec<PoseConditioning> {
    ds.samples.iter().map(|s| s.pose.clone()).collect()
}

fn noise_state(seed: u64) -> CascadeState {
    CascadeState {
        prev_shape_logits: common::uniform(&[18, SIZE, SIZE], -4.0, 4.0, seed).cast(),
        prev_structure: common::uniform(&[2, SIZE, SIZE], 0.0, 1.0, seed + 1).cast(),
    }
}

#[test]
fn feedback_reaches_the_frame_only_in_recurrent_variants() {
    let ds = common::dataset(SIZE, 3, 1);
    let pose = &ds.samples[1].pose;
    let (a, b) = (noise_state(10), noise_state(20));
    let frame = |m: &Models, s: &CascadeState| cascade_step(m, pose, &ds.background, s, Overrides::default()).unwrap().frame;

    let open = models(Variant::PssR);
    let (fa, fb) = (frame(&open, &a), frame(&open, &b));
    assert!(fa.data().iter().zip(fb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let live = models(Variant::Pss);
    assert!(frame(&live, &a).mean_abs_diff(&frame(&live, &b)) > 0.0);
}

#[test]
fn state_shape_is_checked() {
    let ds = common::dataset(SIZE, 3, 2);
    let bad = CascadeState::cold(18, SIZE / 2, SIZE / 2);
    let r = cascade_step(&models(Variant::Pss), &ds.samples[0].pose, &ds.background, &bad, Overrides::default());
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn bootstrap_counts_and_respects_the_budget() {
    let ds = common::dataset(SIZE, 3, 3);
    let m = models(Variant::Pss);
    let tight = BootstrapConfig { max_iters: 3, tol: 0.0 };
    let r = bootstrap_first_frame(&m, &ds.samples[0].pose, &tight, Overrides::default()).unwrap();
    assert_eq!(r.iterations, 3);
    assert!(!r.converged);
    let loose = BootstrapConfig { max_iters: 30, tol: f64::INFINITY };
    let r = bootstrap_first_frame(&m, &ds.samples[0].pose, &loose, Overrides::default()).unwrap();
    assert_eq!((r.iterations, r.converged), (1, true));
    assert_eq!(state_delta(&r.state, &r.state).unwrap(), 0.0);
}

#[test]
fn non_recurrent_bootstrap_converges_immediately() {
    let ds = common::dataset(SIZE, 3, 4);
    let r = bootstrap_first_frame(&models(Variant::PssR), &ds.samples[0].pose, &BootstrapConfig::default(), Overrides::default())
        .unwrap();
    assert!(r.converged);
    assert_eq!(r.last_delta, 0.0);
}

#[test]
fn sequence_outputs_line_up_with_poses() {
    let ds = common::dataset(SIZE, 4, 5);
    let out = run_sequence(&models(Variant::Pss), &poses(&ds), &ds.background, &BootstrapConfig::default(), OverrideStreams::default())
        .unwrap();
    assert_eq!(out.frames.len(), 4);
    assert_eq!(out.shapes.len(), 4);
    assert_eq!(out.structures.len(), 4);
    assert!(out.frames.iter().all(|f| f.shape() == [3, SIZE, SIZE] && f.data().iter().all(|v| (0.0..=1.0).contains(v))));
    let pose_only = run_sequence(&models(Variant::P), &poses(&ds), &ds.background, &BootstrapConfig::default(), OverrideStreams::default())
        .unwrap();
    assert!(pose_only.shapes.is_empty() && pose_only.structures.is_empty());
}

#[test]
fn self_reenactment_matches_direct_rendering() {
    let seq = common::scene(SIZE, 4, 6);
    let ds = common::dataset(SIZE, 4, 6);
    let m = models(Variant::Pss);
    let limbs = LimbMap::default_layout();
    let stats = PoseStats::from_frames(&seq.keypoints, limbs.anchors()).unwrap();
    let options = ReenactOptions { limbs, size: (SIZE, SIZE), bootstrap: BootstrapConfig::default() };
    let re = reenact_sequence(&m, &seq.keypoints, &stats, &stats, &ds.background, &options).unwrap();
    let direct = run_sequence(&m, &poses(&ds), &ds.background, &options.bootstrap, OverrideStreams::default()).unwrap();
    assert_eq!(re.frames, direct.frames);
}

#[test]
fn concurrent_passes_share_frozen_weights() {
    let ds = common::dataset(SIZE, 3, 7);
    let m = models(Variant::Pss);
    let p = poses(&ds);
    let cfg = BootstrapConfig::default();
    let serial = run_sequence(&m, &p, &ds.background, &cfg, OverrideStreams::default()).unwrap();
    let parallel: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..2)
            .map(|_| s.spawn(|| run_sequence(&m, &p, &ds.background, &cfg, OverrideStreams::default()).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(parallel.iter().all(|o| o.frames == serial.frames));
}

#[test]
fn swapped_shape_and_structure_are_used_verbatim() {
    let ds = common::dataset(SIZE, 3, 8);
    let m = models(Variant::Pss);
    let shapes: Vec<SegmentationMap> = ds.samples.iter().map(|s| s.gt_shape.clone()).collect();
    let fields: Vec<StructureField> = ds.samples.iter().map(|s| s.gt_structure.clone()).collect();
    let out = swap_conditioning(&m, &poses(&ds), Some(&shapes), Some(&fields), &ds.background, &BootstrapConfig::default()).unwrap();
    assert_eq!(out.shapes, shapes);
    assert_eq!(out.structures, fields);

    // A stream one frame short is stretched by nearest index.
    let short = swap_conditioning(&m, &poses(&ds), Some(&shapes[..2]), None, &ds.background, &BootstrapConfig::default()).unwrap();
    assert_eq!(short.shapes.len(), 3);
    assert_eq!(short.shapes[2], shapes[1]);
    let far = swap_conditioning(&m, &poses(&ds), Some(&shapes[..1]), None, &ds.background, &BootstrapConfig::default());
    assert!(matches!(far, Err(Error::Edit(_))));
}

#[test]
fn edits_need_the_matching_conditioning() {
    let ds = common::dataset(SIZE, 3, 9);
    let shapes: Vec<SegmentationMap> = ds.samples.iter().map(|s| s.gt_shape.clone()).collect();
    let fields: Vec<StructureField> = ds.samples.iter().map(|s| s.gt_structure.clone()).collect();
    let cfg = BootstrapConfig::default();
    let p = poses(&ds);
    assert!(matches!(swap_conditioning(&models(Variant::P), &p, Some(&shapes), None, &ds.background, &cfg), Err(Error::Edit(_))));
    assert!(matches!(swap_conditioning(&models(Variant::Ps), &p, None, Some(&fields), &ds.background, &cfg), Err(Error::Edit(_))));
    let small = vec![SegmentationMap::filled(SIZE / 2, SIZE / 2, 0); 3];
    assert!(matches!(swap_conditioning(&models(Variant::Pss), &p, Some(&small), None, &ds.background, &cfg), Err(Error::Edit(_))));
}

#[test]
fn wrinkle_scaling_changes_confidence_only() {
    let ds = common::dataset(SIZE, 3, 10);
    let f = &ds.samples[0].gt_structure;
    let half = scale_wrinkles(f, 0.5).unwrap();
    assert_eq!(half.orientation(), f.orientation());
    for (a, b) in half.confidence().iter().zip(f.confidence()) {
        assert!((a - b * 0.5).abs() < 1e-6);
    }
    let strong = scale_wrinkles(f, 10.0).unwrap();
    assert!(strong.confidence().iter().all(|&c| c <= 1.0));
    assert!(matches!(scale_wrinkles(f, -1.0), Err(Error::Edit(_))));
    assert!(matches!(scale_wrinkles(f, f64::NAN), Err(Error::Edit(_))));
}
