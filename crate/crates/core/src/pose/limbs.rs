use std::path::Path;

use crate::error::{Error, Result};

/// Number of limb groups, i.e. skeleton channels.
pub const LIMB_GROUPS: usize = 9;
/// Derivative channels: x/y times first/second order times limb group.
pub const DERIVATIVE_CHANNELS: usize = 2 * 2 * LIMB_GROUPS;
/// Skeleton plus derivative channels fed to every pose-conditioned network.
pub const POSE_CHANNELS: usize = LIMB_GROUPS + DERIVATIVE_CHANNELS;

const DEFAULT_LAYOUT: &str = include_str!("../../data/limbs_127.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LimbGroup {
    pub name: String,
    pub bones: Vec<(usize, usize)>,
}

/// Keypoints used to estimate body scale and placement for pose normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Anchors {
    pub neck: usize,
    pub mid_hip: usize,
    pub ankles: Vec<usize>,
}

/// Assignment of skeleton bones to the nine limb-group channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LimbMap {
    keypoint_count: usize,
    groups: Vec<LimbGroup>,
    anchors: Anchors,
}

impl LimbMap {
    /// The shipped 127-point layout (15 body, 70 face, 2 x 21 hand points).
    pub fn default_layout() -> Self {
        Self::parse(DEFAULT_LAYOUT).expect("shipped limb layout is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the limb-map text format:
    ///
    /// ```text
    /// @keypoints 127
    /// @anchors neck=1 mid_hip=8 ankles=11,14
    /// torso: 1-2, 1-5, 1-8
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut keypoint_count = None;
        let mut anchors = None;
        let mut groups = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Config(format!("limb map line {}: {m}", lineno + 1));
            if let Some(rest) = line.strip_prefix("@keypoints") {
                keypoint_count = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|e| err(format!("bad keypoint count: {e}")))?,
                );
            } else if let Some(rest) = line.strip_prefix("@anchors") {
                anchors = Some(parse_anchors(rest).map_err(err)?);
            } else {
                let (name, bones) = line
                    .split_once(':')
                    .ok_or_else(|| err("expected `group: a-b, ...`".into()))?;
                let mut list = Vec::new();
                for pair in bones.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (a, b) = pair
                        .split_once('-')
                        .ok_or_else(|| err(format!("bad bone `{pair}`")))?;
                    let a = a.trim().parse().map_err(|_| err(format!("bad index in `{pair}`")))?;
                    let b = b.trim().parse().map_err(|_| err(format!("bad index in `{pair}`")))?;
                    list.push((a, b));
                }
                groups.push(LimbGroup {
                    name: name.trim().to_string(),
                    bones: list,
                });
            }
        }
        let keypoint_count =
            keypoint_count.ok_or_else(|| Error::Config("limb map lacks @keypoints".into()))?;
        let anchors = anchors.ok_or_else(|| Error::Config("limb map lacks @anchors".into()))?;
        Self::new(keypoint_count, groups, anchors)
    }

    pub fn new(keypoint_count: usize, groups: Vec<LimbGroup>, anchors: Anchors) -> Result<Self> {
        if groups.len() != LIMB_GROUPS {
            return Err(Error::Config(format!(
                "limb map needs exactly {LIMB_GROUPS} groups, got {}",
                groups.len()
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|o| o.name == g.name) {
                return Err(Error::Config(format!("duplicate limb group `{}`", g.name)));
            }
            for &(a, b) in &g.bones {
                if a >= keypoint_count || b >= keypoint_count {
                    return Err(Error::Config(format!(
                        "bone {a}-{b} in `{}` exceeds keypoint count {keypoint_count}",
                        g.name
                    )));
                }
            }
        }
        let mut anchor_ids = vec![anchors.neck, anchors.mid_hip];
        anchor_ids.extend(&anchors.ankles);
        if anchors.ankles.is_empty() || anchor_ids.iter().any(|&i| i >= keypoint_count) {
            return Err(Error::Config("anchor keypoints out of range".into()));
        }
        Ok(Self {
            keypoint_count,
            groups,
            anchors,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_count
    }

    pub fn groups(&self) -> &[LimbGroup] {
        &self.groups
    }

    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }
}

fn parse_anchors(rest: &str) -> std::result::Result<Anchors, String> {
    let (mut neck, mut mid_hip, mut ankles) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("bad anchor `{field}`"))?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| format!("bad anchor index `{v}`"));
        match key {
            "neck" => neck = Some(parse(value)?),
            "mid_hip" => mid_hip = Some(parse(value)?),
            "ankles" => ankles = Some(value.split(',').map(parse).collect::<std::result::Result<Vec<_>, _>>()?),
            other => return Err(format!("unknown anchor `{other}`")),
        }
    }
    Ok(Anchors {
        neck: neck.ok_or("missing neck anchor")?,
        mid_hip: mid_hip.ok_or("missing mid_hip anchor")?,
        ankles: ankles.ok_or("missing ankles anchor")?,
    })
}
