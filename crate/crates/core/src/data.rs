//! On-disk layout of a captured or synthetic sequence.
//!
//! ```text
//! <dir>/frames/frame_00000.png ...   RGB frames
//! <dir>/labels/frame_00000.png ...   indexed label maps
//! <dir>/keypoints.json               per-frame keypoint records
//! <dir>/background.png               static background plate
//! <dir>/labels.txt                   label set (optional, ATR by default)
//! ```

use std::path::Path;

use cascade_autograd::Tensor;

use crate::config::PoseConfig;
use crate::error::{Error, Result};
use crate::imageio::{list_pngs, load_rgb, load_rgb_dir, save_rgb, save_rgb_dir};
use crate::parsing::{ingest_label_map, save_label_map, LabelSet, SegmentationMap};
use crate::pose::{load_keypoints, save_keypoints, KeypointFrame};
use crate::synth::SyntheticSequence;

pub const FRAMES_DIR: &str = "frames";
pub const LABELS_DIR: &str = "labels";
pub const KEYPOINTS_FILE: &str = "keypoints.json";
pub const BACKGROUND_FILE: &str = "background.png";
pub const LABEL_SET_FILE: &str = "labels.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub frames: Vec<Tensor<f32>>,
    pub keypoints: Vec<KeypointFrame>,
    pub label_maps: Vec<SegmentationMap>,
    pub background: Tensor<f32>,
    pub labels: LabelSet,
}

impl From<SyntheticSequence> for SequenceData {
    fn from(s: SyntheticSequence) -> Self {
        Self { frames: s.frames, keypoints: s.keypoints, label_maps: s.labels, background: s.background, labels: LabelSet::atr() }
    }
}

pub fn write_sequence_dir(dir: impl AsRef<Path>, data: &SequenceData) -> Result<()> {
    let dir = dir.as_ref();
    let labels_dir = dir.join(LABELS_DIR);
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    save_rgb_dir(dir.join(FRAMES_DIR), &data.frames)?;
    for (i, m) in data.label_maps.iter().enumerate() {
        save_label_map(labels_dir.join(format!("frame_{i:05}.png")), m, &data.labels)?;
    }
    save_keypoints(dir.join(KEYPOINTS_FILE), &data.keypoints)?;
    save_rgb(dir.join(BACKGROUND_FILE), &data.background)?;
    let ls = dir.join(LABEL_SET_FILE);
    std::fs::write(&ls, data.labels.to_text()).map_err(|e| Error::io(&ls, e))
}

pub fn read_label_set(dir: &Path) -> Result<LabelSet> {
    let p = dir.join(LABEL_SET_FILE);
    if p.exists() {
        LabelSet::load(p)
    } else {
        Ok(LabelSet::atr())
    }
}

/// Reads only the keypoint stream of a sequence directory.
pub fn read_keypoints(dir: &Path, pose: &PoseConfig) -> Result<Vec<KeypointFrame>> {
    load_keypoints(dir.join(KEYPOINTS_FILE), pose.keypoint_count, pose.confidence_threshold)
}

pub fn read_background(dir: &Path) -> Result<Tensor<f32>> {
    load_rgb(dir.join(BACKGROUND_FILE))
}

pub fn read_sequence_dir(dir: impl AsRef<Path>, pose: &PoseConfig) -> Result<SequenceData> {
    let dir = dir.as_ref();
    let labels = read_label_set(dir)?;
    let frames = load_rgb_dir(dir.join(FRAMES_DIR))?;
    let background = read_background(dir)?;
    let (_, h, w) = background.dims3()?;
    let label_maps = list_pngs(dir.join(LABELS_DIR))?
        .iter()
        .map(|p| ingest_label_map(p, &labels, Some((h, w))))
        .collect::<Result<Vec<_>>>()?;
    let keypoints = read_keypoints(dir, pose)?;
    if frames.len() != label_maps.len() || frames.len() != keypoints.len() {
        return Err(Error::Dataset(format!(
            "{}: {} frames, {} label maps, {} keypoint frames",
            dir.display(),
            frames.len(),
            label_maps.len(),
            keypoints.len()
        )));
    }
    Ok(SequenceData { frames, keypoints, label_maps, background, labels })
}
