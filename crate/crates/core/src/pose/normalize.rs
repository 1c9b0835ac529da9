//! Global scale-and-translate normalization of a source actor's poses onto
//! the target actor's body proportions and placement.

use serde::{Deserialize, Serialize};

use super::keypoints::KeypointFrame;
use super::limbs::Anchors;
use crate::error::{Error, Result};

/// Per-sequence body statistics, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    /// Median ankle height (image y).
    pub ankle_y: f64,
    /// Median neck-to-hip distance.
    pub torso_height: f64,
    /// Median hip x coordinate.
    pub hip_x: f64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

impl PoseStats {
    /// Medians over frames, ignoring invalid keypoints.
    pub fn from_frames(frames: &[KeypointFrame], anchors: &Anchors) -> Result<Self> {
        let mut ankles = Vec::new();
        let mut heights = Vec::new();
        let mut hips = Vec::new();
        for f in frames {
            let ys: Vec<f64> = anchors.ankles.iter().filter_map(|&i| f.point(i)).map(|p| p[1]).collect();
            if !ys.is_empty() {
                ankles.push(ys.iter().sum::<f64>() / ys.len() as f64);
            }
            if let Some(hip) = f.point(anchors.mid_hip) {
                hips.push(hip[0]);
                if let Some(neck) = f.point(anchors.neck) {
                    heights.push(((hip[0] - neck[0]).powi(2) + (hip[1] - neck[1]).powi(2)).sqrt());
                }
            }
        }
        let missing = |what: &str| Error::Normalization(format!("no valid {what} keypoints in sequence"));
        Ok(Self {
            ankle_y: median(ankles).ok_or_else(|| missing("ankle"))?,
            torso_height: median(heights).ok_or_else(|| missing("neck/hip"))?,
            hip_x: median(hips).ok_or_else(|| missing("hip"))?,
        })
    }
}

/// Maps `y' = s (y - ankle_src) + ankle_tgt`, `x' = s (x - hip_src) + hip_tgt`
/// with `s = torso_tgt / torso_src`. Validity flags are preserved.
pub fn normalize_poses(
    source: &[KeypointFrame],
    source_stats: &PoseStats,
    target_stats: &PoseStats,
) -> Result<Vec<KeypointFrame>> {
    for (name, s) in [("source", source_stats), ("target", target_stats)] {
        if !(s.torso_height > 0.0) || !s.torso_height.is_finite() {
            return Err(Error::Normalization(format!(
                "{name} torso height {} must be positive",
                s.torso_height
            )));
        }
    }
    let scale = target_stats.torso_height / source_stats.torso_height;
    Ok(source
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for p in out.points_mut() {
                p[0] = scale * (p[0] - source_stats.hip_x) + target_stats.hip_x;
                p[1] = scale * (p[1] - source_stats.ankle_y) + target_stats.ankle_y;
            }
            out
        })
        .collect())
}
