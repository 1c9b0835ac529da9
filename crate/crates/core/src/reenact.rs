//! Inference over pose sequences: first-frame bootstrap, motion transfer
//! and garment editing.

use cascade_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{cascade_step, encode_shape_feedback, recurrent_stages, CascadeState, Models, Overrides};
use crate::parsing::{SegmentationLogits, SegmentationMap};
use crate::pose::{build_conditioning, normalize_poses, KeypointFrame, LimbMap, PoseConditioning, PoseStats};
use crate::structure::StructureField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { max_iters: 30, tol: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub state: CascadeState,
    /// Feedback iterations run after the initial pass from the cold state.
    pub iterations: usize,
    pub converged: bool,
    /// Change between the last two iterations.
    pub last_delta: f64,
}

/// Larger of the mean absolute changes of the two feedback grids, with the
/// shape grid compared in the encoding the shape network consumes.
pub fn state_delta(a: &CascadeState, b: &CascadeState) -> Result<f64> {
    let (ea, eb) = (encode_shape_feedback(&a.prev_shape_logits)?, encode_shape_feedback(&b.prev_shape_logits)?);
    let d1 = ea.mean_abs_diff(&eb) as f64;
    let d2 = a.prev_structure.mean_abs_diff(&b.prev_structure) as f64;
    Ok(d1.max(d2))
}

/// Runs the shape and structure stages on the first pose, starting from
/// the cold state and feeding back their own outputs until the state moves
/// by less than `tol` or `max_iters` feedback iterations have run.
pub fn bootstrap_first_frame(
    models: &Models,
    pose: &PoseConditioning,
    config: &BootstrapConfig,
    overrides: Overrides<'_>,
) -> Result<BootstrapResult> {
    let (h, w) = pose.size();
    let mut state = recurrent_stages(models, pose, &models.cold_state(h, w), overrides)?.3;
    let mut last_delta = f64::INFINITY;
    for t in 1..=config.max_iters.max(1) {
        let next = recurrent_stages(models, pose, &state, overrides)?.3;
        last_delta = state_delta(&next, &state)?;
        state = next;
        if last_delta < config.tol {
            return Ok(BootstrapResult { state, iterations: t, converged: true, last_delta });
        }
        if t == config.max_iters {
            break;
        }
    }
    Ok(BootstrapResult { state, iterations: config.max_iters.max(1), converged: false, last_delta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutput {
    pub frames: Vec<Tensor<f32>>,
    pub foregrounds: Vec<Tensor<f32>>,
    pub shape_logits: Vec<SegmentationLogits>,
    pub shapes: Vec<SegmentationMap>,
    pub structures: Vec<StructureField>,
    pub bootstrap: Option<BootstrapResult>,
}

/// Per-frame override streams, already aligned to the pose stream.
#[derive(Clone, Copy, Debug, Default)]
pub struct OverrideStreams<'a> {
    pub shape: Option<&'a [SegmentationMap]>,
    pub structure: Option<&'a [StructureField]>,
}

impl<'a> OverrideStreams<'a> {
    fn at(&self, n: usize) -> Overrides<'a> {
        Overrides { shape: self.shape.map(|s| &s[n]), structure: self.structure.map(|s| &s[n]) }
    }
}

/// Bootstraps frame 0, then runs the cascade frame by frame with feedback.
pub fn run_sequence(
    models: &Models,
    poses: &[PoseConditioning],
    background: &Tensor<f32>,
    bootstrap: &BootstrapConfig,
    overrides: OverrideStreams<'_>,
) -> Result<SequenceOutput> {
    let mut out = SequenceOutput {
        frames: Vec::with_capacity(poses.len()),
        foregrounds: Vec::new(),
        shape_logits: Vec::new(),
        shapes: Vec::new(),
        structures: Vec::new(),
        bootstrap: None,
    };
    let Some(first) = poses.first() else { return Ok(out) };
    for (name, len) in [("shape", overrides.shape.map(|s| s.len())), ("structure", overrides.structure.map(|s| s.len()))] {
        if let Some(len) = len {
            if len != poses.len() {
                return Err(Error::Edit(format!("{name} override has {len} frames for {} poses", poses.len())));
            }
        }
    }
    let boot = bootstrap_first_frame(models, first, bootstrap, overrides.at(0))?;
    let mut state = boot.state.clone();
    out.bootstrap = Some(boot);
    for (n, pose) in poses.iter().enumerate() {
        let step = cascade_step(models, pose, background, &state, overrides.at(n))?;
        out.frames.push(step.frame);
        out.foregrounds.push(step.foreground);
        out.shape_logits.extend(step.shape_logits);
        out.shapes.extend(step.shape);
        out.structures.extend(step.structure);
        state = step.next_state;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ReenactOptions {
    pub limbs: LimbMap,
    pub size: (usize, usize),
    pub bootstrap: BootstrapConfig,
}

/// Normalizes source poses onto the target actor and renders them.
pub fn reenact_sequence(
    models: &Models,
    source: &[KeypointFrame],
    source_stats: &PoseStats,
    target_stats: &PoseStats,
    background: &Tensor<f32>,
    options: &ReenactOptions,
) -> Result<SequenceOutput> {
    let normalized = normalize_poses(source, source_stats, target_stats)?;
    let poses = build_conditioning(&normalized, &options.limbs, options.size)?;
    run_sequence(models, &poses, background, &options.bootstrap, OverrideStreams::default())
}

/// Maps an override stream onto `target_len` frames by nearest index.
/// Streams may be at most one frame longer or shorter.
pub fn align_stream<T: Clone>(stream: &[T], target_len: usize) -> Result<Vec<T>> {
    if stream.len().abs_diff(target_len) > 1 || (stream.is_empty() && target_len > 0) {
        return Err(Error::Edit(format!(
            "override stream has {} frames, pose stream {target_len}",
            stream.len()
        )));
    }
    if stream.len() == target_len {
        return Ok(stream.to_vec());
    }
    let last = stream.len() - 1;
    Ok((0..target_len)
        .map(|n| {
            let idx = if target_len <= 1 {
                0
            } else {
                ((n * last) as f64 / (target_len - 1) as f64).round() as usize
            };
            stream[idx.min(last)].clone()
        })
        .collect())
}

/// Renders `poses` with the predicted shape and/or structure replaced.
pub fn swap_conditioning(
    models: &Models,
    poses: &[PoseConditioning],
    override_shape: Option<&[SegmentationMap]>,
    override_structure: Option<&[StructureField]>,
    background: &Tensor<f32>,
    bootstrap: &BootstrapConfig,
) -> Result<SequenceOutput> {
    let size = poses.first().map(|p| p.size());
    let shapes = override_shape.map(|s| align_stream(s, poses.len())).transpose()?;
    let structures = override_structure.map(|s| align_stream(s, poses.len())).transpose()?;
    if let Some(size) = size {
        if shapes.iter().flatten().any(|s| s.size() != size) || structures.iter().flatten().any(|s| s.size() != size) {
            return Err(Error::Edit(format!("override maps must be {}x{}", size.0, size.1)));
        }
    }
    if shapes.is_some() && !models.variant.has_shape() {
        return Err(Error::Edit(format!("variant {} has no shape conditioning to override", models.variant)));
    }
    if structures.is_some() && !models.variant.has_structure() {
        return Err(Error::Edit(format!("variant {} has no structure conditioning to override", models.variant)));
    }
    let streams = OverrideStreams { shape: shapes.as_deref(), structure: structures.as_deref() };
    run_sequence(models, poses, background, bootstrap, streams)
}

/// Multiplies confidence by `factor`, clamped to 1; orientation is untouched.
pub fn scale_wrinkles(field: &StructureField, factor: f64) -> Result<StructureField> {
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(Error::Edit(format!("wrinkle factor must be a non-negative number, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(field.clone());
    }
    let mut out = field.clone();
    for c in out.confidence_mut() {
        *c = ((*c as f64) * factor).min(1.0) as f32;
    }
    Ok(out)
}

/// Intersection over union of two pixel sets.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
