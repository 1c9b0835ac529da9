//! The four image-to-image networks of the cascade and the single-frame
//! cascade step that wires them together.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use cascade_autograd::{Float, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::{argmax_labels, foreground_mask, LabelSet, SegmentationLogits, SegmentationMap};
use crate::pose::{PoseConditioning, POSE_CHANNELS};
use crate::structure::StructureField;

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Output activation of a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Unbounded segmentation logits.
    Logits,
    /// Orientation `pi * sigmoid` and confidence `sigmoid`.
    Structure,
    /// RGB in `[0, 1]` via sigmoid.
    Rgb,
    /// RGB in `[0, 1]` as a logit-space correction of the first three
    /// input channels, `sigmoid(raw + logit(input))`.
    ResidualRgb,
}

/// Clamp used when taking the logit of an image in `[0, 1]`.
pub const RESIDUAL_LOGIT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub downsampling_steps: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_channels", self.input_channels),
            ("output_channels", self.output_channels),
            ("base_width", self.base_width),
            ("num_residual_blocks", self.num_residual_blocks),
            ("downsampling_steps", self.downsampling_steps),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("generator {name} must be positive")));
            }
        }
        if self.downsampling_steps > 8 {
            return Err(Error::Config("at most 8 downsampling steps".into()));
        }
        Ok(())
    }

    /// The refinement network keeps half the residual blocks, at least one.
    pub fn halved(&self) -> Self {
        Self { num_residual_blocks: (self.num_residual_blocks / 2).max(1), ..*self }
    }

    /// Spatial sizes must divide evenly through every downsampling stage.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsampling_steps
    }
}

/// Widths, depths and resolution shared by the four networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub downsampling_steps: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self { base_width: 16, num_residual_blocks: 4, downsampling_steps: 2 }
    }
}

impl ArchitectureConfig {
    /// Full-size local generator: 64 base channels, 9 residual blocks, for 512-pixel frames.
    pub fn full_scale() -> Self {
        Self { base_width: 64, num_residual_blocks: 9, downsampling_steps: 3 }
    }

    pub fn generator(&self, input_channels: usize, output_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            input_channels,
            output_channels,
            base_width: self.base_width,
            num_residual_blocks: self.num_residual_blocks,
            downsampling_steps: self.downsampling_steps,
        }
    }
}

/// Encoder/residual/decoder network with reflection padding and instance
/// normalization. Parameters are plain tensors; a forward pass binds them
/// onto a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Float> {
    config: GeneratorConfig,
    head: Head,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

fn layout(c: &GeneratorConfig) -> Layout {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut conv = |name: String, out: usize, inp: usize, k: usize, bias: bool| {
        names.push(format!("{name}.weight"));
        shapes.push(vec![out, inp, k, k]);
        if bias {
            names.push(format!("{name}.bias"));
            shapes.push(vec![out]);
        }
    };
    let bw = c.base_width;
    conv("stem".into(), bw, c.input_channels, 7, false);
    for i in 0..c.downsampling_steps {
        conv(format!("down{i}"), bw << (i + 1), bw << i, 3, false);
    }
    let inner = bw << c.downsampling_steps;
    for i in 0..c.num_residual_blocks {
        conv(format!("res{i}.a"), inner, inner, 3, false);
        conv(format!("res{i}.b"), inner, inner, 3, false);
    }
    for i in (0..c.downsampling_steps).rev() {
        conv(format!("up{i}"), bw << i, bw << (i + 1), 3, false);
    }
    conv("out".into(), c.output_channels, bw, 7, true);
    Layout { names, shapes }
}

impl<T: Float> Generator<T> {
    /// Weights drawn from N(0, 0.02) with a seeded generator; biases zero.
    pub fn new(config: GeneratorConfig, head: Head, seed: u64) -> Result<Self> {
        config.validate()?;
        let Layout { names, shapes } = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = shapes
            .iter()
            .map(|s| {
                if s.len() == 1 {
                    Tensor::zeros(s)
                } else {
                    Tensor::from_fn(s, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                }
            })
            .collect();
        Ok(Self { config, head, names, params })
    }

    pub fn from_params(config: GeneratorConfig, head: Head, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let Layout { names, shapes } = layout(&config);
        if params.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
        }
        for ((p, s), n) in params.iter().zip(&shapes).zip(&names) {
            if p.shape() != s.as_slice() {
                return Err(Error::Shape(format!("{n}: expected {s:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self { config, head, names, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Zeroes the output convolution's weights so the output is the head
    /// activation of its bias everywhere.
    pub fn zero_output_layer(&mut self) {
        let i = self.params.len() - 2;
        self.params[i].data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Float>(&self) -> Generator<U> {
        Generator {
            config: self.config,
            head: self.head,
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Puts the parameters on `tape`, as leaves when they will be trained.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Raw output before the head activation.
    pub fn forward_raw<'t>(&self, params: &[Var<'t, T>], input: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = input.shape();
        let c = &self.config;
        if shape.len() != 3 || shape[0] != c.input_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got shape {shape:?}",
                c.input_channels
            )));
        }
        let m = c.size_multiple();
        if shape[1] % m != 0 || shape[2] % m != 0 || shape[1] / m < 2 || shape[2] / m < 2 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} must be a multiple of {m} and at least {}",
                shape[1],
                shape[2],
                2 * m
            )));
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut p = params.iter();
        let mut next = || p.next().ok_or_else(|| Error::Shape("missing generator parameter".into()));
        let norm_relu = |x: Var<'t, T>| -> Result<Var<'t, T>> { Ok(x.instance_norm(eps)?.relu()) };

        let mut x = norm_relu(input.reflect_pad(3)?.conv2d(next()?, None, 1, 0)?)?;
        for _ in 0..c.downsampling_steps {
            x = norm_relu(x.conv2d(next()?, None, 2, 1)?)?;
        }
        for _ in 0..c.num_residual_blocks {
            let y = norm_relu(x.reflect_pad(1)?.conv2d(next()?, None, 1, 0)?)?;
            let y = y.reflect_pad(1)?.conv2d(next()?, None, 1, 0)?.instance_norm(eps)?;
            x = x.add(&y)?;
        }
        for _ in 0..c.downsampling_steps {
            x = norm_relu(x.upsample_nearest2x()?.reflect_pad(1)?.conv2d(next()?, None, 1, 0)?)?;
        }
        let w = next()?;
        let b = next()?;
        Ok(x.reflect_pad(3)?.conv2d(w, Some(b), 1, 0)?)
    }

    /// Forward pass including the head activation.
    pub fn forward<'t>(&self, params: &[Var<'t, T>], input: Var<'t, T>) -> Result<Var<'t, T>> {
        let raw = self.forward_raw(params, input)?;
        apply_head(self.head, raw, input)
    }

    /// Inference on plain tensors.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward(&params, tape.constant(input.clone()))?;
        Ok(out.value().as_ref().clone())
    }
}

pub fn apply_head<'t, T: Float>(head: Head, raw: Var<'t, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(match head {
        Head::Logits => raw,
        Head::Rgb => raw.sigmoid(),
        Head::ResidualRgb => {
            let base = input.channels(0, 3)?.logit(T::from_f64_lossy(RESIDUAL_LOGIT_EPS));
            raw.add(&base)?.sigmoid()
        }
        Head::Structure => {
            let c = raw.shape()[0];
            if c != 2 {
                return Err(Error::Shape(format!("structure head needs 2 channels, got {c}")));
            }
            let orientation = raw.channels(0, 1)?.sigmoid().scale(T::from_f64_lossy(PI));
            let confidence = raw.channels(1, 1)?.sigmoid();
            Var::concat_channels(&[orientation, confidence])?
        }
    })
}

/// Ablation variants: pose only, pose + shape, full cascade, full cascade
/// without temporal feedback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "P")]
    P,
    #[serde(rename = "PS")]
    Ps,
    #[serde(rename = "PSS")]
    Pss,
    #[serde(rename = "PSS-R")]
    PssR,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::P, Variant::Ps, Variant::Pss, Variant::PssR];

    pub fn has_shape(self) -> bool {
        self != Variant::P
    }

    pub fn has_structure(self) -> bool {
        matches!(self, Variant::Pss | Variant::PssR)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Variant::Ps | Variant::Pss)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::P => "P",
            Variant::Ps => "PS",
            Variant::Pss => "PSS",
            Variant::PssR => "PSS-R",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P" => Ok(Variant::P),
            "PS" => Ok(Variant::Ps),
            "PSS" => Ok(Variant::Pss),
            "PSS-R" | "PSSR" => Ok(Variant::PssR),
            _ => Err(Error::Config(format!("unknown variant '{s}', expected P, PS, PSS or PSS-R"))),
        }
    }
}

/// Previous-frame shape logits and structure grid fed back into the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeState {
    pub prev_shape_logits: Tensor<f32>,
    pub prev_structure: Tensor<f32>,
}

impl CascadeState {
    /// The all-zero state used before the first frame.
    pub fn cold(num_labels: usize, height: usize, width: usize) -> Self {
        Self {
            prev_shape_logits: Tensor::zeros(&[num_labels, height, width]),
            prev_structure: Tensor::zeros(&[2, height, width]),
        }
    }

    /// Teacher-forcing state built from annotations.
    pub fn from_annotations(shape: &SegmentationMap, structure: &StructureField, num_labels: usize) -> Self {
        Self { prev_shape_logits: shape.one_hot(num_labels), prev_structure: structure.to_tensor() }
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.prev_structure.shape();
        (s[1], s[2])
    }

    fn check(&self, num_labels: usize, size: (usize, usize)) -> Result<()> {
        let (h, w) = size;
        if self.prev_shape_logits.shape() != [num_labels, h, w] || self.prev_structure.shape() != [2, h, w] {
            return Err(Error::Shape(format!(
                "state {:?}/{:?} does not match {num_labels} labels at {h}x{w}",
                self.prev_shape_logits.shape(),
                self.prev_structure.shape()
            )));
        }
        Ok(())
    }
}

fn check_size(what: &str, t: &Tensor<f32>, channels: usize, size: (usize, usize)) -> Result<()> {
    if t.shape() != [channels, size.0, size.1] {
        return Err(Error::Shape(format!(
            "{what}: expected {:?}, got {:?}",
            [channels, size.0, size.1],
            t.shape()
        )));
    }
    Ok(())
}

fn check_map(map: &SegmentationMap, size: (usize, usize)) -> Result<()> {
    if map.size() != size {
        return Err(Error::Shape(format!("segmentation {:?} vs frame {:?}", map.size(), size)));
    }
    Ok(())
}

/// Encodes fed-back shape logits as a one-hot of their argmax, so that
/// annotations and predictions enter the network on the same scale.
/// Pixels whose channels are all equal, such as the cold state, stay zero.
pub fn encode_shape_feedback(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (j, h, w) = logits.dims3()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = Tensor::zeros(&[j, h, w]);
    let o = out.data_mut();
    for i in 0..plane {
        let (mut best, mut lo, mut hi) = (0, d[i], d[i]);
        for c in 0..j {
            let v = d[c * plane + i];
            if v.is_nan() {
                return Err(Error::Numeric(format!("NaN feedback logit at channel {c}, pixel {i}")));
            }
            if v > hi {
                best = c;
                hi = v;
            }
            lo = lo.min(v);
        }
        if hi > lo {
            o[best * plane + i] = 1.0;
        }
    }
    Ok(out)
}

/// `[pose, encoded prev_shape_logits]`.
pub fn shape_input(pose: &PoseConditioning, state: &CascadeState) -> Result<Tensor<f32>> {
    state.check(state.prev_shape_logits.shape()[0], pose.size())?;
    let feedback = encode_shape_feedback(&state.prev_shape_logits)?;
    Ok(Tensor::concat_channels(&[pose.skeleton(), pose.derivatives(), &feedback])?)
}

/// `[pose, one_hot(shape), prev_structure]`.
pub fn structure_input(
    pose: &PoseConditioning,
    shape: &SegmentationMap,
    state: &CascadeState,
    num_labels: usize,
) -> Result<Tensor<f32>> {
    check_map(shape, pose.size())?;
    state.check(num_labels, pose.size())?;
    let oh = shape.one_hot(num_labels);
    Ok(Tensor::concat_channels(&[pose.skeleton(), pose.derivatives(), &oh, &state.prev_structure])?)
}

/// `[pose, one_hot(shape)?, structure?]`, depending on which are available.
pub fn appearance_input(
    pose: &PoseConditioning,
    shape: Option<&SegmentationMap>,
    structure: Option<&StructureField>,
    num_labels: usize,
) -> Result<Tensor<f32>> {
    let mut parts = vec![pose.skeleton().clone(), pose.derivatives().clone()];
    if let Some(s) = shape {
        check_map(s, pose.size())?;
        parts.push(s.one_hot(num_labels));
    }
    if let Some(w) = structure {
        if w.size() != pose.size() {
            return Err(Error::Shape(format!("structure {:?} vs frame {:?}", w.size(), pose.size())));
        }
        parts.push(w.to_tensor());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat_channels(&refs)?)
}

/// `[composite, one_hot(shape)?]`.
pub fn refine_input(composite: &Tensor<f32>, shape: Option<&SegmentationMap>, num_labels: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = composite.dims3()?;
    check_size("composite", composite, 3, (h, w))?;
    match shape {
        Some(s) => {
            check_map(s, (h, w))?;
            Ok(Tensor::concat_channels(&[composite, &s.one_hot(num_labels)])?)
        }
        None => Ok(composite.clone()),
    }
}

pub fn shape_forward(gen: &Generator<f32>, pose: &PoseConditioning, state: &CascadeState, labels: &LabelSet) -> Result<SegmentationLogits> {
    SegmentationLogits::new(gen.infer(&shape_input(pose, state)?)?, labels)
}

pub fn structure_forward(
    gen: &Generator<f32>,
    pose: &PoseConditioning,
    shape: &SegmentationMap,
    state: &CascadeState,
    labels: &LabelSet,
) -> Result<StructureField> {
    StructureField::from_tensor(&gen.infer(&structure_input(pose, shape, state, labels.len())?)?)
}

pub fn appearance_forward(
    gen: &Generator<f32>,
    pose: &PoseConditioning,
    shape: Option<&SegmentationMap>,
    structure: Option<&StructureField>,
    labels: &LabelSet,
) -> Result<Tensor<f32>> {
    gen.infer(&appearance_input(pose, shape, structure, labels.len())?)
}

pub fn refine_forward(gen: &Generator<f32>, composite: &Tensor<f32>, shape: Option<&SegmentationMap>, labels: &LabelSet) -> Result<Tensor<f32>> {
    gen.infer(&refine_input(composite, shape, labels.len())?)
}

/// Generated foreground where the shape is non-background, background elsewhere.
pub fn composite_background(
    foreground: &Tensor<f32>,
    shape: &SegmentationMap,
    background: &Tensor<f32>,
    labels: &LabelSet,
) -> Result<Tensor<f32>> {
    let (_, h, w) = foreground.dims3()?;
    check_size("foreground", foreground, 3, (h, w))?;
    check_size("background", background, 3, (h, w))?;
    check_map(shape, (h, w))?;
    let mask = foreground_mask(shape, labels);
    let plane = h * w;
    let (f, b) = (foreground.data(), background.data());
    let data = (0..3 * plane)
        .map(|i| if mask.bits()[i % plane] { f[i] } else { b[i] })
        .collect();
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// The four networks of one trained cascade. Shape and structure networks
/// are absent for variants that do not use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub variant: Variant,
    pub labels: LabelSet,
    pub architecture: ArchitectureConfig,
    pub shape: Option<Generator<f32>>,
    pub structure: Option<Generator<f32>>,
    pub appearance: Generator<f32>,
    pub refinement: Generator<f32>,
}

impl Models {
    pub fn new(variant: Variant, labels: LabelSet, architecture: ArchitectureConfig, seed: u64) -> Result<Self> {
        let j = labels.len();
        let a = &architecture;
        let shape = variant
            .has_shape()
            .then(|| Generator::new(a.generator(POSE_CHANNELS + j, j), Head::Logits, seed ^ 0x5a0e))
            .transpose()?;
        let structure = variant
            .has_structure()
            .then(|| Generator::new(a.generator(POSE_CHANNELS + j + 2, 2), Head::Structure, seed ^ 0x57c7))
            .transpose()?;
        let appearance_in = POSE_CHANNELS
            + if variant.has_shape() { j } else { 0 }
            + if variant.has_structure() { 2 } else { 0 };
        let appearance = Generator::new(a.generator(appearance_in, 3), Head::Rgb, seed ^ 0xa99e)?;
        let refine_in = 3 + if variant.has_shape() { j } else { 0 };
        // Starts as the identity on the composite.
        let mut refinement = Generator::new(a.generator(refine_in, 3).halved(), Head::ResidualRgb, seed ^ 0x7ef1)?;
        refinement.zero_output_layer();
        Ok(Self { variant, labels, architecture, shape, structure, appearance, refinement })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn cold_state(&self, height: usize, width: usize) -> CascadeState {
        CascadeState::cold(self.num_labels(), height, width)
    }

    pub fn size_multiple(&self) -> usize {
        self.appearance.config().size_multiple()
    }
}

/// Optional replacements for the predicted shape and structure, applied
/// before they are consumed downstream.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides<'a> {
    pub shape: Option<&'a SegmentationMap>,
    pub structure: Option<&'a StructureField>,
}

/// Everything one cascade step produces.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub frame: Tensor<f32>,
    pub foreground: Tensor<f32>,
    pub composite: Tensor<f32>,
    pub shape_logits: Option<SegmentationLogits>,
    pub shape: Option<SegmentationMap>,
    pub structure: Option<StructureField>,
    pub next_state: CascadeState,
}

/// Shape and structure stages only, returning the predictions and the
/// state they imply. Recurrence is bypassed for non-recurrent variants.
pub fn recurrent_stages(
    models: &Models,
    pose: &PoseConditioning,
    state: &CascadeState,
    overrides: Overrides<'_>,
) -> Result<(Option<SegmentationLogits>, Option<SegmentationMap>, Option<StructureField>, CascadeState)> {
    let (h, w) = pose.size();
    let j = models.num_labels();
    let cold;
    let state = if models.variant.is_recurrent() {
        state.check(j, (h, w))?;
        state
    } else {
        cold = models.cold_state(h, w);
        &cold
    };
    let mut next = models.cold_state(h, w);
    let (mut logits, mut shape, mut structure) = (None, None, None);
    if let Some(g) = &models.shape {
        let l = shape_forward(g, pose, state, &models.labels)?;
        let predicted = argmax_labels(&l)?;
        shape = Some(overrides.shape.cloned().unwrap_or(predicted));
        next.prev_shape_logits = l.tensor().clone();
        logits = Some(l);
    }
    if let (Some(g), Some(s)) = (&models.structure, &shape) {
        let predicted = structure_forward(g, pose, s, state, &models.labels)?;
        next.prev_structure = predicted.to_tensor();
        structure = Some(overrides.structure.cloned().unwrap_or(predicted));
    }
    Ok((logits, shape, structure, next))
}

/// Shape -> argmax -> structure -> appearance -> compositing -> refinement.
pub fn cascade_step(
    models: &Models,
    pose: &PoseConditioning,
    background: &Tensor<f32>,
    state: &CascadeState,
    overrides: Overrides<'_>,
) -> Result<StepOutput> {
    let size = pose.size();
    check_size("background", background, 3, size)?;
    let (shape_logits, shape, structure, next_state) = recurrent_stages(models, pose, state, overrides)?;
    let foreground = appearance_forward(&models.appearance, pose, shape.as_ref(), structure.as_ref(), &models.labels)?;
    let composite = match &shape {
        Some(s) => composite_background(&foreground, s, background, &models.labels)?,
        None => foreground.clone(),
    };
    let frame = refine_forward(&models.refinement, &composite, shape.as_ref(), &models.labels)?;
    Ok(StepOutput { frame, foreground, composite, shape_logits, shape, structure, next_state })
}
