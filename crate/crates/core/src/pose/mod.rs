//! Pose conditioning: keypoints, temporal derivatives, normalization and
//! the skeleton/derivative rasters fed to every generator.

mod derivatives;
mod keypoints;
mod limbs;
mod normalize;
mod raster;

use cascade_autograd::Tensor;

pub use derivatives::{temporal_derivatives, DerivativeFrame};
pub use keypoints::{load_keypoints, save_keypoints, KeypointFrame, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_KEYPOINT_COUNT};
pub use limbs::{Anchors, LimbGroup, LimbMap, DERIVATIVE_CHANNELS, LIMB_GROUPS, POSE_CHANNELS};
pub use normalize::{normalize_poses, PoseStats};
pub use raster::{line_pixels, rasterize_derivatives, rasterize_skeleton};

use crate::error::{Error, Result};

/// Skeleton (9 x h x w) and derivative (36 x h x w) maps for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseConditioning {
    skeleton: Tensor<f32>,
    derivatives: Tensor<f32>,
}

impl PoseConditioning {
    pub fn new(skeleton: Tensor<f32>, derivatives: Tensor<f32>) -> Result<Self> {
        let (c1, h, w) = skeleton.dims3()?;
        let (c2, h2, w2) = derivatives.dims3()?;
        if c1 != LIMB_GROUPS || c2 != DERIVATIVE_CHANNELS {
            return Err(Error::Shape(format!(
                "pose conditioning needs {LIMB_GROUPS}+{DERIVATIVE_CHANNELS} channels, got {c1}+{c2}"
            )));
        }
        if (h, w) != (h2, w2) {
            return Err(Error::Shape(format!("skeleton {h}x{w} vs derivatives {h2}x{w2}")));
        }
        Ok(Self { skeleton, derivatives })
    }

    pub fn skeleton(&self) -> &Tensor<f32> {
        &self.skeleton
    }

    pub fn derivatives(&self) -> &Tensor<f32> {
        &self.derivatives
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.skeleton.shape();
        (s[1], s[2])
    }

    /// The 45-channel network input, skeleton channels first.
    pub fn as_input(&self) -> Tensor<f32> {
        Tensor::concat_channels(&[&self.skeleton, &self.derivatives]).expect("validated at construction")
    }

    /// Linear rescale of the derivative channels.
    pub fn scale_derivatives(&self, factor: f32) -> Self {
        Self { skeleton: self.skeleton.clone(), derivatives: self.derivatives.map(|v| v * factor) }
    }
}

/// Derivatives plus both rasters for every frame.
pub fn build_conditioning(
    frames: &[KeypointFrame],
    limbs: &LimbMap,
    size: (usize, usize),
) -> Result<Vec<PoseConditioning>> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Dimension(format!("raster size {}x{} must be positive", size.0, size.1)));
    }
    if let Some(f) = frames.iter().find(|f| f.len() != limbs.keypoint_count()) {
        return Err(Error::Schema(format!(
            "frame {} has {} keypoints, limb map expects {}",
            f.frame_index,
            f.len(),
            limbs.keypoint_count()
        )));
    }
    temporal_derivatives(frames)
        .iter()
        .zip(frames)
        .map(|(d, f)| PoseConditioning::new(rasterize_skeleton(f, limbs, size), rasterize_derivatives(f, d, limbs, size)))
        .collect()
}
