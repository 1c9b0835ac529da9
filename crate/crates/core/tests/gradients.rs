//! Finite-difference checks of the training losses and of every generator
//! forward pass, in f64 on 16x16 grids.

mod common;

use std::rc::Rc;

use cascade_core::generators::{ArchitectureConfig, Generator, Models, Variant};
use cascade_core::losses::{appearance_loss, refinement_loss, shape_loss, structure_loss, LossWeights, RandomPyramid};
use cascade_core::parsing::{LabelSet, Mask, SegmentationMap};

use common::{gradcheck, uniform};

const N: usize = 16;
const TOL: f64 = 1e-3;

fn labels_map(seed: u64) -> SegmentationMap {
    let l = uniform(&[N * N], 0.0, 18.0, seed);
    SegmentationMap::new(N, N, l.data().iter().map(|&v| v as u8).collect()).unwrap()
}

fn blob_mask() -> Mask {
    Mask::from_fn(N, N, |i| {
        let (y, x) = ((i / N) as f64 - 7.5, (i % N) as f64 - 7.5);
        y * y + x * x < 30.0
    })
}

#[test]
fn shape_cross_entropy() {
    let target = labels_map(1);
    let err = gradcheck(&[uniform(&[18, N, N], -3.0, 3.0, 2)], 200, |_, v| shape_loss(v[0], &target).unwrap());
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn structure_l1() {
    let target = uniform(&[2, N, N], 0.0, 1.0, 3);
    let mask = blob_mask();
    let err = gradcheck(&[uniform(&[2, N, N], 0.0, 1.0, 4)], 200, |_, v| structure_loss(v[0], &target, &mask).unwrap());
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn appearance_pixel_and_feature_terms() {
    let target = uniform(&[3, N, N], 0.0, 1.0, 5);
    let mask = blob_mask();
    let phi = RandomPyramid::<f64>::new(9);
    let w = LossWeights::default();
    let err = gradcheck(&[uniform(&[3, N, N], 0.0, 1.0, 6)], 200, |_, v| {
        appearance_loss(v[0], &target, &mask, &phi, &w).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn refinement_full_frame() {
    let target = uniform(&[3, N, N], 0.0, 1.0, 7);
    let phi = RandomPyramid::<f64>::new(9);
    let w = LossWeights::default();
    let err = gradcheck(&[uniform(&[3, N, N], 0.0, 1.0, 8)], 200, |_, v| refinement_loss(v[0], &target, &phi, &w).unwrap());
    assert!(err < TOL, "relative error {err}");
}

fn tiny_models() -> Models {
    let arch = ArchitectureConfig { base_width: 4, num_residual_blocks: 1, downsampling_steps: 1 };
    Models::new(Variant::Pss, LabelSet::atr(), arch, 5).unwrap()
}

/// Checks a generator with respect to its input and a sample of every parameter tensor.
fn check_generator(gen: &Generator<f32>, input_lo: f64, seed: u64) {
    let g: Generator<f64> = gen.cast();
    let c = *g.config();
    let probe = Rc::new(uniform(&[c.output_channels, N, N], -1.0, 1.0, seed + 100));
    let mut inputs = vec![uniform(&[c.input_channels, N, N], input_lo, 0.95, seed)];
    inputs.extend(g.params().iter().cloned());
    let err = gradcheck(&inputs, 12, |_, v| {
        g.forward(&v[1..], v[0]).unwrap().mul_const(probe.clone()).unwrap().sum()
    });
    assert!(err < TOL, "{:?} head: relative error {err}", g.head());
}

#[test]
fn shape_generator() {
    check_generator(tiny_models().shape.as_ref().unwrap(), -1.0, 10);
}

#[test]
fn structure_generator() {
    check_generator(tiny_models().structure.as_ref().unwrap(), -1.0, 11);
}

#[test]
fn appearance_generator() {
    check_generator(&tiny_models().appearance, -1.0, 12);
}

#[test]
fn refinement_generator() {
    // The residual head takes the logit of the first three input channels,
    // so they stay inside the open unit interval.
    check_generator(&tiny_models().refinement, 0.05, 13);
}
