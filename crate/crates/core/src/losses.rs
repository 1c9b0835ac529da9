//! Training objectives for the four networks.

use std::rc::Rc;

use cascade_autograd::{Float, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::{Mask, SegmentationMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Shape (segmentation) term in the total.
    pub lambda1: f64,
    /// Structure term.
    pub lambda2: f64,
    /// Appearance term.
    pub lambda3: f64,
    /// Refinement term.
    pub lambda4: f64,
    /// Pixel L1 share of the appearance and refinement losses.
    pub lambda_r: f64,
    /// Perceptual share of the appearance and refinement losses.
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0, lambda_r: 0.1, lambda_p: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda_r, self.lambda_p];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A frozen, differentiable map from an RGB grid to feature grids.
pub trait FeatureExtractor<T: Float> {
    fn features<'t>(&self, tape: &'t Tape<T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>>;

    /// Identifies the extractor and its weights, e.g. for checkpoints and reports.
    fn descriptor(&self) -> String;
}

/// Three conv + ReLU stages at full, half and quarter resolution with
/// fixed random weights.
#[derive(Clone, Debug)]
pub struct RandomPyramid<T: Float> {
    seed: u64,
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

pub const PYRAMID_WIDTHS: [usize; 3] = [8, 16, 32];

impl<T: Float> RandomPyramid<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = 3;
        let stages = PYRAMID_WIDTHS
            .iter()
            .map(|&out| {
                let std = (2.0 / (9 * inputs) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let w = Tensor::from_fn(&[out, inputs, 3, 3], |_| T::from_f64_lossy(normal.sample(&mut rng)));
                let b = Tensor::from_fn(&[out], |_| T::from_f64_lossy(0.1 * normal.sample(&mut rng)));
                inputs = out;
                (w, b)
            })
            .collect();
        Self { seed, stages }
    }
}

impl<T: Float> Default for RandomPyramid<T> {
    fn default() -> Self {
        Self::new(0x9e37_79b9)
    }
}

impl<T: Float> FeatureExtractor<T> for RandomPyramid<T> {
    fn features<'t>(&self, tape: &'t Tape<T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (w, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2x()?;
            }
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            x = x.conv2d(&w, Some(&b), 1, 1)?.relu();
            out.push(x);
        }
        Ok(out)
    }

    fn descriptor(&self) -> String {
        format!("random-pyramid-{}x{:?}-seed{}", self.stages.len(), PYRAMID_WIDTHS, self.seed)
    }
}

/// Cross-entropy averaged over pixels, with a stable log-sum-exp.
pub fn shape_loss<'t, T: Float>(logits: Var<'t, T>, target: &SegmentationMap) -> Result<Var<'t, T>> {
    let v = logits.value();
    let (j, h, w) = v.dims3()?;
    if target.size() != (h, w) {
        return Err(Error::Shape(format!("logits {h}x{w} vs target {:?}", target.size())));
    }
    if target.labels().iter().any(|&l| l as usize >= j) {
        return Err(Error::Label(format!("target label outside {j} logit channels")));
    }
    if v.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in shape logits".into()));
    }
    let targets = Rc::new(target.labels().iter().map(|&l| l as u32).collect());
    Ok(logits.cross_entropy(targets)?)
}

/// Mean of `|pred - target|` over masked pixels and all channels; zero for an empty mask.
pub fn masked_l1<'t, T: Float>(pred: Var<'t, T>, target: Var<'t, T>, mask: &Mask) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape.len() != 3 || target.shape() != shape || mask.size() != (shape[1], shape[2]) {
        return Err(Error::Shape(format!(
            "masked L1: pred {shape:?}, target {:?}, mask {:?}",
            target.shape(),
            mask.size()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Ok(pred.tape().constant(Tensor::scalar(T::zero())));
    }
    let diff = pred.sub(&target)?.abs();
    let masked = if count == mask.bits().len() { diff } else { diff.mul_const(Rc::new(mask.to_tensor(shape[0])))? };
    Ok(masked.sum().scale(T::one() / T::from_usize(count * shape[0]).unwrap()))
}

pub fn structure_loss<'t, T: Float>(pred: Var<'t, T>, target: &Tensor<T>, garment: &Mask) -> Result<Var<'t, T>> {
    let target = pred.tape().constant(target.clone());
    masked_l1(pred, target, garment)
}

/// Area-downsamples a mask onto an `h x w` grid; a cell is set when any
/// covered pixel is.
pub fn downsample_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    let (mh, mw) = mask.size();
    let (fy, fx) = ((mh / height.max(1)).max(1), (mw / width.max(1)).max(1));
    Mask::from_fn(height, width, |i| {
        let (y, x) = (i / width, i % width);
        (y * fy..((y + 1) * fy).min(mh)).any(|yy| (x * fx..((x + 1) * fx).min(mw)).any(|xx| mask.bits()[yy * mw + xx]))
    })
}

/// `lambda_r` masked pixel L1 plus `lambda_p` times the masked feature L1
/// summed over extractor layers.
pub fn appearance_loss<'t, T: Float>(
    pred: Var<'t, T>,
    target: &Tensor<T>,
    foreground: &Mask,
    phi: &dyn FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    let tape = pred.tape();
    let target = tape.constant(target.clone());
    let mut total = masked_l1(pred, target, foreground)?.scale(T::from_f64_lossy(weights.lambda_r));
    if weights.lambda_p > 0.0 && foreground.count() > 0 {
        let fp = phi.features(tape, pred)?;
        let ft = phi.features(tape, target)?;
        for (a, b) in fp.into_iter().zip(ft) {
            let s = a.shape();
            let m = downsample_mask(foreground, s[1], s[2]);
            let term = masked_l1(a, b, &m)?.scale(T::from_f64_lossy(weights.lambda_p));
            total = total.add(&term)?;
        }
    }
    Ok(total)
}

/// The appearance loss over the whole frame.
pub fn refinement_loss<'t, T: Float>(
    pred: Var<'t, T>,
    target: &Tensor<T>,
    phi: &dyn FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    let s = pred.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("refinement prediction {s:?}")));
    }
    appearance_loss(pred, target, &Mask::full(s[1], s[2]), phi, weights)
}

/// Per-component losses of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub shape: f64,
    pub structure: f64,
    pub appearance: f64,
    pub refinement: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.shape + w.lambda2 * c.structure + w.lambda3 * c.appearance + w.lambda4 * c.refinement
}
