#![allow(dead_code)]

use cascade_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use cascade_core::parsing::LabelSet;
use cascade_core::structure::GaborParams;
use cascade_core::synth::{generate_synthetic_sequence, SyntheticSceneSpec, SyntheticSequence};
use cascade_core::training::{prepare_dataset, Dataset, PrepareOptions};

pub fn scene(size: usize, frames: usize, seed: u64) -> SyntheticSequence {
    let spec = SyntheticSceneSpec { height: size, width: size, frames, seed, ..Default::default() };
    generate_synthetic_sequence(&spec).expect("valid scene")
}

pub fn dataset(size: usize, frames: usize, seed: u64) -> Dataset {
    let seq = scene(size, frames, seed);
    let options = PrepareOptions { gabor: GaborParams::for_resolution(size), cache_dir: None, ..Default::default() };
    prepare_dataset(&seq.frames, &seq.keypoints, &seq.labels, &seq.background, &LabelSet::atr(), &options)
        .expect("dataset")
        .0
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Worst relative error between the analytic gradient of the scalar `f`
/// and central differences, over at most `per_input` sampled elements of
/// each input. The denominator is floored at `1e-5` so that exact zeros
/// compare absolutely.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], per_input: usize, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().data()[0]
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward(f(&tape, &vars)).expect("backward");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Thin generators have nearly constant channels going into instance
    // norm, which bends the objective on a 1e-5 scale; a small step keeps
    // the difference quotient on the linear part.
    let h = 1e-7;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("gradient reaches input");
        let picks: Vec<usize> = if input.len() <= per_input {
            (0..input.len()).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..input.len())).collect()
        };
        for e in picks {
            let x0 = xs[i].data()[e];
            xs[i].data_mut()[e] = x0 + h;
            let plus = objective(&xs);
            xs[i].data_mut()[e] = x0 - h;
            let minus = objective(&xs);
            xs[i].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let r = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(r);
        }
    }
    worst
}
