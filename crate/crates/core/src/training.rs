//! Dataset preparation and stage-wise training of the cascade.

use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use cascade_autograd::{Adam, AdamConfig, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_epoch_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::generators::{
    appearance_forward, appearance_input, composite_background, refine_input, shape_input, structure_input,
    ArchitectureConfig, CascadeState, Generator, Models, Variant,
};
use crate::imageio::luminance;
use crate::losses::{
    appearance_loss, refinement_loss, shape_loss, structure_loss, total_loss, FeatureExtractor, LossComponents,
    LossWeights, RandomPyramid,
};
use crate::parsing::{argmax_channels, foreground_mask, garment_mask, LabelSet, Mask, SegmentationMap};
use crate::pose::{build_conditioning, KeypointFrame, LimbMap, PoseConditioning};
use crate::reenact::{run_sequence, BootstrapConfig, OverrideStreams};
use crate::structure::{
    extract_structure, load_structure, save_structure, smooth_orientation, GaborBank, GaborParams, StructureField,
};

/// Environment variable naming the default structure cache directory.
pub const CACHE_DIR_ENV: &str = "CASCADE_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shape,
    Structure,
    Appearance,
    Refinement,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Shape, Stage::Structure, Stage::Appearance, Stage::Refinement];

    /// Stages whose networks exist for `variant`, in training order.
    pub fn schedule(variant: Variant) -> Vec<Stage> {
        Self::ORDER
            .into_iter()
            .filter(|s| match s {
                Stage::Shape => variant.has_shape(),
                Stage::Structure => variant.has_structure(),
                _ => true,
            })
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Shape => "shape",
            Stage::Structure => "structure",
            Stage::Appearance => "appearance",
            Stage::Refinement => "refinement",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

/// Adam settings. The defaults keep the momentum pair in the order
/// `beta1 = 0.999, beta2 = 0.5`; [`OptimizerConfig::conventional`] swaps them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linearly anneal the step size towards zero over each stage.
    pub linear_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.999, beta2: 0.5, eps: 1e-8, linear_decay: false }
    }
}

impl OptimizerConfig {
    /// The usual image-translation setting `beta1 = 0.5, beta2 = 0.999`.
    pub fn conventional() -> Self {
        Self { beta1: 0.5, beta2: 0.999, ..Self::default() }
    }

    /// Step size for update `step` of `total` in a stage.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if self.linear_decay && total > 0 {
            self.learning_rate * (total - step.min(total)) as f64 / total as f64
        } else {
            self.learning_rate
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs per stage.
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub variant: Variant,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub architecture: ArchitectureConfig,
    pub weights: LossWeights,
    /// Stages to train, in order; `None` means every stage of the variant.
    pub stages: Option<Vec<Stage>>,
    /// Feed annotations instead of predictions back during each stage's first epoch.
    pub teacher_forcing: bool,
    /// Epochs of simultaneous fine-tuning of all networks on the total loss
    /// after the stage-wise schedule.
    pub joint_epochs: usize,
    /// Keep only this many epoch checkpoints.
    pub keep_last: Option<usize>,
    /// Used when frozen upstream networks produce inputs for a later stage.
    pub bootstrap: BootstrapConfig,
    pub feature_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            optimizer: OptimizerConfig::default(),
            variant: Variant::Pss,
            seed: 0,
            height: 64,
            width: 64,
            architecture: ArchitectureConfig::default(),
            weights: LossWeights::default(),
            stages: None,
            teacher_forcing: true,
            joint_epochs: 0,
            keep_last: None,
            bootstrap: BootstrapConfig::default(),
            feature_seed: 0x9e37_79b9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        let m = 1 << self.architecture.downsampling_steps;
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be a positive multiple of {m}",
                self.height, self.width
            )));
        }
        if let Some(stages) = &self.stages {
            let available = Stage::schedule(self.variant);
            if let Some(s) = stages.iter().find(|s| !available.contains(s)) {
                return Err(Error::Config(format!("variant {} has no {s} network", self.variant)));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<Stage> {
        self.stages.clone().unwrap_or_else(|| Stage::schedule(self.variant))
    }
}

/// One annotated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub frame: Tensor<f32>,
    pub pose: PoseConditioning,
    pub gt_shape: SegmentationMap,
    pub gt_structure: StructureField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub background: Tensor<f32>,
    pub labels: LabelSet,
    pub gabor: GaborParams,
    pub structure_smoothing: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.background.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub limbs: LimbMap,
    pub gabor: GaborParams,
    pub structure_smoothing: f64,
    /// Structure fields are cached here, keyed by frame content and extraction settings.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            limbs: LimbMap::default_layout(),
            gabor: GaborParams::default(),
            structure_smoothing: 1.0,
            cache_dir: std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
        }
    }
}

/// How many structure fields were computed versus read from the cache.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrepareReport {
    pub extracted: usize,
    pub cached: usize,
}

fn structure_cache_key(frame: &Tensor<f32>, gabor: &GaborParams, smoothing: f64) -> String {
    let mut h = Sha256::new();
    for d in frame.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in frame.data() {
        h.update(v.to_le_bytes());
    }
    h.update(serde_json::to_vec(gabor).expect("params serialize"));
    h.update(smoothing.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Full-frame luminance structure, orientation-smoothed.
pub fn ground_truth_structure(frame: &Tensor<f32>, bank: &GaborBank, smoothing: f64) -> Result<StructureField> {
    let (_, h, w) = frame.dims3()?;
    let field = extract_structure(&luminance(frame)?, h, w, bank)?;
    Ok(smooth_orientation(&field, smoothing))
}

/// Builds training samples, extracting structure ground truth once per frame.
pub fn prepare_dataset(
    frames: &[Tensor<f32>],
    keypoints: &[KeypointFrame],
    label_maps: &[SegmentationMap],
    background: &Tensor<f32>,
    labels: &LabelSet,
    options: &PrepareOptions,
) -> Result<(Dataset, PrepareReport)> {
    let n = frames.len();
    if keypoints.len() != n || label_maps.len() != n {
        return Err(Error::Dataset(format!(
            "{n} frames, {} keypoint frames and {} label maps",
            keypoints.len(),
            label_maps.len()
        )));
    }
    let (bc, h, w) = background.dims3()?;
    if bc != 3 {
        return Err(Error::Dataset("background must be RGB".into()));
    }
    for (i, (f, m)) in frames.iter().zip(label_maps).enumerate() {
        if f.shape() != [3, h, w] || m.size() != (h, w) {
            return Err(Error::Dataset(format!("frame {i} does not match the {h}x{w} background")));
        }
        m.validate(labels)?;
    }
    let poses = build_conditioning(keypoints, &options.limbs, (h, w)).map_err(|e| match e {
        Error::Schema(m) => Error::Dataset(m),
        other => other,
    })?;
    let bank = GaborBank::new(options.gabor)?;
    if let Some(dir) = &options.cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = PrepareReport::default();
    let mut samples = Vec::with_capacity(n);
    for ((frame, pose), map) in frames.iter().zip(poses).zip(label_maps) {
        let cached = options.cache_dir.as_ref().map(|d| {
            d.join(format!("structure_{}.bin", structure_cache_key(frame, &options.gabor, options.structure_smoothing)))
        });
        let gt_structure = match &cached {
            Some(p) if p.exists() => {
                report.cached += 1;
                load_structure(p)?
            }
            _ => {
                report.extracted += 1;
                let s = ground_truth_structure(frame, &bank, options.structure_smoothing)?;
                if let Some(p) = &cached {
                    save_structure(p, &s)?;
                }
                s
            }
        };
        samples.push(TrainingSample { frame: frame.clone(), pose, gt_shape: map.clone(), gt_structure });
    }
    let dataset = Dataset {
        samples,
        background: background.clone(),
        labels: labels.clone(),
        gabor: options.gabor,
        structure_smoothing: options.structure_smoothing,
    };
    Ok((dataset, report))
}

/// Predictions of frozen upstream networks consumed by a later stage.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub shapes: Option<Vec<SegmentationMap>>,
    pub structures: Option<Vec<StructureField>>,
    pub foregrounds: Option<Vec<Tensor<f32>>>,
}

/// Runs the trained upstream networks over the sequence with bootstrap and
/// their own feedback, as at inference time.
pub fn compute_upstream(models: &Models, stage: Stage, dataset: &Dataset, bootstrap: &BootstrapConfig) -> Result<Upstream> {
    let poses: Vec<PoseConditioning> = dataset.samples.iter().map(|s| s.pose.clone()).collect();
    let mut up = Upstream::default();
    if stage == Stage::Shape {
        return Ok(up);
    }
    let mut view = models.clone();
    if stage == Stage::Structure {
        view.structure = None;
    }
    if models.variant.has_shape() {
        let mut shapes = Vec::with_capacity(poses.len());
        let mut structures = Vec::with_capacity(poses.len());
        let boot = crate::reenact::bootstrap_first_frame(&view, &poses[0], bootstrap, Default::default())?;
        let mut state = boot.state;
        for pose in &poses {
            let (_, s, w, next) = crate::generators::recurrent_stages(&view, pose, &state, Default::default())?;
            shapes.extend(s);
            structures.extend(w);
            state = next;
        }
        up.shapes = Some(shapes);
        if stage != Stage::Structure && models.variant.has_structure() {
            up.structures = Some(structures);
        }
    }
    if stage == Stage::Refinement {
        let mut fgs = Vec::with_capacity(poses.len());
        for (n, pose) in poses.iter().enumerate() {
            let shape = up.shapes.as_ref().map(|s| &s[n]);
            let structure = up.structures.as_ref().map(|s| &s[n]);
            fgs.push(appearance_forward(&models.appearance, pose, shape, structure, &models.labels)?);
        }
        up.foregrounds = Some(fgs);
    }
    Ok(up)
}

fn net_mut(models: &mut Models, stage: Stage) -> Result<&mut Generator<f32>> {
    let v = models.variant;
    match stage {
        Stage::Shape => models.shape.as_mut(),
        Stage::Structure => models.structure.as_mut(),
        Stage::Appearance => Some(&mut models.appearance),
        Stage::Refinement => Some(&mut models.refinement),
    }
    .ok_or_else(|| Error::Config(format!("variant {v} has no {stage} network")))
}

/// Loss of one frame in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub epoch: usize,
    pub frame: usize,
    pub components: LossComponents,
    pub total: f64,
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub stage: String,
    pub epoch: usize,
    pub mean: LossComponents,
    pub mean_total: f64,
    pub records: Vec<LossRecord>,
}

fn check_finite(v: f64, stage: &str, frame: usize, component: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { stage: stage.into(), frame, component: component.into() })
    }
}

fn summarize(stage: String, epoch: usize, records: Vec<LossRecord>) -> EpochStats {
    let n = records.len().max(1) as f64;
    let mut mean = LossComponents::default();
    let mut mean_total = 0.0;
    for r in &records {
        mean.shape += r.components.shape / n;
        mean.structure += r.components.structure / n;
        mean.appearance += r.components.appearance / n;
        mean.refinement += r.components.refinement / n;
        mean_total += r.total / n;
    }
    EpochStats { stage, epoch, mean, mean_total, records }
}

/// Teacher forcing applies to the first epoch of a stage only.
pub fn is_teacher_forced(config: &TrainConfig, epoch_in_stage: usize) -> bool {
    config.teacher_forcing && epoch_in_stage == 0
}

/// One pass over the frames in order, one optimizer step per frame.
///
/// Recurrent inputs are plain tensors copied out of the previous step, so
/// no gradient reaches earlier frames.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    models: &mut Models,
    stage: Stage,
    dataset: &Dataset,
    upstream: &Upstream,
    optimizer: &mut Adam<f32>,
    epoch_in_stage: usize,
    global_epoch: usize,
    config: &TrainConfig,
    phi: &dyn FeatureExtractor<f32>,
) -> Result<EpochStats> {
    let labels = models.labels.clone();
    let j = labels.len();
    let (h, w) = dataset.size();
    let recurrent = models.variant.is_recurrent();
    let forced = is_teacher_forced(config, epoch_in_stage);
    let name = stage.to_string();
    let weights = config.weights;
    let mut prev_prediction: Option<Tensor<f32>> = None;
    let mut records = Vec::with_capacity(dataset.len());
    let net = net_mut(models, stage)?;

    for (n, sample) in dataset.samples.iter().enumerate() {
        let state = if !recurrent || n == 0 {
            CascadeState::cold(j, h, w)
        } else if forced {
            let prev = &dataset.samples[n - 1];
            CascadeState::from_annotations(&prev.gt_shape, &prev.gt_structure, j)
        } else {
            let mut s = CascadeState::cold(j, h, w);
            match (stage, prev_prediction.take()) {
                (Stage::Shape, Some(p)) => s.prev_shape_logits = p,
                (Stage::Structure, Some(p)) => s.prev_structure = p,
                _ => {}
            }
            s
        };
        let up_shape = upstream.shapes.as_ref().map(|s| &s[n]);
        let up_structure = upstream.structures.as_ref().map(|s| &s[n]);
        let input = match stage {
            Stage::Shape => shape_input(&sample.pose, &state)?,
            Stage::Structure => {
                let shape = up_shape.ok_or_else(|| Error::Config("structure stage needs predicted shapes".into()))?;
                structure_input(&sample.pose, shape, &state, j)?
            }
            Stage::Appearance => appearance_input(&sample.pose, up_shape, up_structure, j)?,
            Stage::Refinement => {
                let fg = &upstream.foregrounds.as_ref().ok_or_else(|| Error::Config("refinement stage needs foregrounds".into()))?[n];
                let composite = match up_shape {
                    Some(s) => composite_background(fg, s, &dataset.background, &labels)?,
                    None => fg.clone(),
                };
                refine_input(&composite, up_shape, j)?
            }
        };

        let tape = Tape::new();
        let params = net.bind(&tape, true);
        let out = net.forward(&params, tape.constant(input))?;
        let mut components = LossComponents::default();
        let (loss, component) = match stage {
            Stage::Shape => (shape_loss(out, &sample.gt_shape)?, "shape"),
            Stage::Structure => {
                let mask = garment_mask(up_shape.expect("checked above"), &labels);
                (structure_loss(out, &sample.gt_structure.to_tensor(), &mask)?, "structure")
            }
            Stage::Appearance => {
                let mask = up_shape.map(|s| foreground_mask(s, &labels)).unwrap_or_else(|| Mask::full(h, w));
                (appearance_loss(out, &sample.frame, &mask, phi, &weights)?, "appearance")
            }
            Stage::Refinement => (refinement_loss(out, &sample.frame, phi, &weights)?, "refinement"),
        };
        let value = loss.value().data()[0] as f64;
        check_finite(value, &name, n, component)?;
        match stage {
            Stage::Shape => components.shape = value,
            Stage::Structure => components.structure = value,
            Stage::Appearance => components.appearance = value,
            Stage::Refinement => components.refinement = value,
        }
        prev_prediction = match stage {
            Stage::Shape => Some(out.value().as_ref().clone()),
            Stage::Structure => Some(StructureField::from_tensor(&out.value())?.to_tensor()),
            _ => None,
        };
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&Tensor<f32>>> = params.iter().map(|p| grads.wrt(*p)).collect();
        let step = epoch_in_stage * dataset.len() + n;
        optimizer.set_learning_rate(config.optimizer.learning_rate_at(step, config.epochs * dataset.len()));
        optimizer.step(net.params_mut(), &g);
        records.push(LossRecord { stage: name.clone(), epoch: global_epoch, frame: n, components, total: total_loss(&components, &weights) });
    }
    Ok(summarize(name, global_epoch, records))
}

/// Records a loss term's value and returns it scaled by its weight.
fn weigh<'t>(term: Var<'t, f32>, stage: &str, frame: usize, weight: f64, slot: &mut f64, component: &str) -> Result<Var<'t, f32>> {
    *slot = term.value().data()[0] as f64;
    check_finite(*slot, stage, frame, component)?;
    Ok(term.scale(weight as f32))
}

/// One epoch updating every network at once on the weighted total loss.
/// The predicted structure stays differentiable into the appearance network
/// and the composite into the refinement network.
pub fn joint_epoch(
    models: &mut Models,
    dataset: &Dataset,
    optimizers: &mut [Adam<f32>; 4],
    joint_index: usize,
    global_epoch: usize,
    config: &TrainConfig,
    phi: &dyn FeatureExtractor<f32>,
) -> Result<EpochStats> {
    let labels = models.labels.clone();
    let j = labels.len();
    let (h, w) = dataset.size();
    let wts = config.weights;
    let name = "joint".to_string();
    let mut state = CascadeState::cold(j, h, w);
    let mut records = Vec::with_capacity(dataset.len());

    for (n, sample) in dataset.samples.iter().enumerate() {
        if !models.variant.is_recurrent() {
            state = CascadeState::cold(j, h, w);
        }
        let tape = Tape::new();
        let bind = |g: &Option<Generator<f32>>| g.as_ref().map(|g| g.bind(&tape, true));
        let (shape_params, structure_params) = (bind(&models.shape), bind(&models.structure));
        let app_params = models.appearance.bind(&tape, true);
        let ref_params = models.refinement.bind(&tape, true);
        let mut c = LossComponents::default();
        let mut terms: Vec<Var<'_, f32>> = Vec::with_capacity(4);
        let mut next = CascadeState::cold(j, h, w);
        let mut shape = None;
        if let (Some(g), Some(p)) = (&models.shape, &shape_params) {
            let logits = g.forward(p, tape.constant(shape_input(&sample.pose, &state)?))?;
            terms.push(weigh(shape_loss(logits, &sample.gt_shape)?, &name, n, wts.lambda1, &mut c.shape, "shape")?);
            next.prev_shape_logits = logits.value().as_ref().clone();
            shape = Some(argmax_channels(&logits.value())?);
        }
        let mut structure_var = None;
        if let (Some(g), Some(p), Some(s)) = (&models.structure, &structure_params, &shape) {
            let out = g.forward(p, tape.constant(structure_input(&sample.pose, s, &state, j)?))?;
            let mask = garment_mask(s, &labels);
            terms.push(weigh(structure_loss(out, &sample.gt_structure.to_tensor(), &mask)?, &name, n, wts.lambda2, &mut c.structure, "structure")?);
            next.prev_structure = StructureField::from_tensor(&out.value())?.to_tensor();
            structure_var = Some(out);
        }
        let mut parts = vec![tape.constant(appearance_input(&sample.pose, shape.as_ref(), None, j)?)];
        parts.extend(structure_var);
        let app_in = Var::concat_channels(&parts)?;
        let fg = models.appearance.forward(&app_params, app_in)?;
        let mask = shape.as_ref().map(|s| foreground_mask(s, &labels)).unwrap_or_else(|| Mask::full(h, w));
        terms.push(weigh(appearance_loss(fg, &sample.frame, &mask, phi, &wts)?, &name, n, wts.lambda3, &mut c.appearance, "appearance")?);
        let composite = match &shape {
            Some(_) => {
                let m3: Tensor<f32> = mask.to_tensor(3);
                let bg = Tensor::from_vec(
                    &[3, h, w],
                    dataset.background.data().iter().zip(m3.data()).map(|(b, m)| b * (1.0 - m)).collect(),
                )?;
                fg.mul_const(Rc::new(m3))?.offset(&bg)?
            }
            None => fg,
        };
        let ref_in = match &shape {
            Some(s) => Var::concat_channels(&[composite, tape.constant(s.one_hot(j))])?,
            None => composite,
        };
        let out = models.refinement.forward(&ref_params, ref_in)?;
        terms.push(weigh(refinement_loss(out, &sample.frame, phi, &wts)?, &name, n, wts.lambda4, &mut c.refinement, "refinement")?);

        let mut loss = terms[0];
        for t in &terms[1..] {
            loss = loss.add(t)?;
        }
        let grads = tape.backward(loss)?;
        let lr = config.optimizer.learning_rate_at(joint_index * dataset.len() + n, config.joint_epochs * dataset.len());
        let step = |opt: &mut Adam<f32>, g: &mut Generator<f32>, p: &[Var<'_, f32>]| {
            let gs: Vec<Option<&Tensor<f32>>> = p.iter().map(|v| grads.wrt(*v)).collect();
            opt.set_learning_rate(lr);
            opt.step(g.params_mut(), &gs);
        };
        let [o_shape, o_structure, o_app, o_ref] = optimizers;
        if let (Some(g), Some(p)) = (models.shape.as_mut(), &shape_params) {
            step(o_shape, g, p);
        }
        if let (Some(g), Some(p)) = (models.structure.as_mut(), &structure_params) {
            step(o_structure, g, p);
        }
        step(o_app, &mut models.appearance, &app_params);
        step(o_ref, &mut models.refinement, &ref_params);
        records.push(LossRecord { stage: name.clone(), epoch: global_epoch, frame: n, components: c, total: total_loss(&c, &wts) });
        state = next;
    }
    Ok(summarize(name, global_epoch, records))
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub models: Models,
    pub epochs: Vec<EpochStats>,
    pub final_checkpoint: Option<PathBuf>,
    pub meta: CheckpointMeta,
}

impl TrainingOutcome {
    pub fn records(&self) -> impl Iterator<Item = &LossRecord> {
        self.epochs.iter().flat_map(|e| e.records.iter())
    }
}

/// Trains each network of the schedule in turn with upstream networks frozen,
/// optionally followed by joint fine-tuning. A checkpoint is written after
/// every epoch when `checkpoint_dir` is given.
pub fn run_training(config: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainingOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if dataset.size() != (config.height, config.width) {
        return Err(Error::Dataset(format!(
            "dataset is {:?}, config resolution {}x{}",
            dataset.size(),
            config.height,
            config.width
        )));
    }
    let phi = RandomPyramid::<f32>::new(config.feature_seed);
    let mut models = Models::new(config.variant, dataset.labels.clone(), config.architecture, config.seed)?;
    let mut meta = CheckpointMeta {
        gabor: dataset.gabor,
        structure_smoothing: dataset.structure_smoothing,
        height: config.height,
        width: config.width,
        epoch: 0,
        stage: String::new(),
        feature_extractor: phi.descriptor(),
    };
    let mut epochs = Vec::new();
    let mut final_checkpoint = None;
    let mut global = 0;
    let mut save = |models: &Models, meta: &CheckpointMeta| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            final_checkpoint = Some(write_epoch_checkpoint(dir, models, meta, config.keep_last)?);
        }
        Ok(())
    };
    for stage in config.schedule() {
        let upstream = compute_upstream(&models, stage, dataset, &config.bootstrap)?;
        let mut optimizer = Adam::new(config.optimizer.adam());
        for e in 0..config.epochs {
            let stats = train_epoch(&mut models, stage, dataset, &upstream, &mut optimizer, e, global, config, &phi)?;
            epochs.push(stats);
            meta.epoch = global;
            meta.stage = stage.to_string();
            save(&models, &meta)?;
            global += 1;
        }
    }
    if config.joint_epochs > 0 {
        let mut optimizers = std::array::from_fn(|_| Adam::new(config.optimizer.adam()));
        for e in 0..config.joint_epochs {
            epochs.push(joint_epoch(&mut models, dataset, &mut optimizers, e, global, config, &phi)?);
            meta.epoch = global;
            meta.stage = "joint".into();
            save(&models, &meta)?;
            global += 1;
        }
    }
    Ok(TrainingOutcome { models, epochs, final_checkpoint, meta })
}

/// CSV with one row per frame and stage epoch.
pub fn write_loss_log(path: impl AsRef<Path>, records: impl IntoIterator<Item = impl std::borrow::Borrow<LossRecord>>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut wr = csv::Writer::from_path(path).map_err(csv_err)?;
    wr.write_record(["stage", "epoch", "frame", "l_shp", "l_str", "l_app", "l_ref", "l_total"]).map_err(csv_err)?;
    for r in records {
        let r = r.borrow();
        let c = &r.components;
        wr.write_record([
            r.stage.clone(),
            r.epoch.to_string(),
            r.frame.to_string(),
            c.shape.to_string(),
            c.structure.to_string(),
            c.appearance.to_string(),
            c.refinement.to_string(),
            r.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

/// Mean absolute error of the rendered frames over ground-truth foreground pixels.
pub fn foreground_l1(models: &Models, dataset: &Dataset, bootstrap: &BootstrapConfig) -> Result<f64> {
    let poses: Vec<PoseConditioning> = dataset.samples.iter().map(|s| s.pose.clone()).collect();
    let out = run_sequence(models, &poses, &dataset.background, bootstrap, OverrideStreams::default())?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (frame, sample) in out.frames.iter().zip(&dataset.samples) {
        let mask = foreground_mask(&sample.gt_shape, &dataset.labels);
        let plane = mask.bits().len();
        for (i, (a, b)) in frame.data().iter().zip(sample.frame.data()).enumerate() {
            if mask.bits()[i % plane] {
                sum += (a - b).abs() as f64;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
