//! TOML run configuration, one section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{LimbMap, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_KEYPOINT_COUNT};
use crate::structure::GaborParams;
use crate::synth::SyntheticSceneSpec;
use crate::training::{PrepareOptions, TrainConfig, CACHE_DIR_ENV};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    pub keypoint_count: usize,
    pub confidence_threshold: f64,
    /// Limb map file; the built-in layout when absent.
    pub limbs: Option<PathBuf>,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { keypoint_count: DEFAULT_KEYPOINT_COUNT, confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD, limbs: None }
    }
}

impl PoseConfig {
    pub fn limb_map(&self) -> Result<LimbMap> {
        match &self.limbs {
            Some(p) => LimbMap::load(p),
            None => Ok(LimbMap::default_layout()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Derive the Gabor parameters from the frame height instead of using
    /// the explicit values below.
    pub scale_with_resolution: bool,
    pub kernel_size: usize,
    pub sigma: f64,
    pub wavelength: f64,
    /// Gaussian sigma in pixels for orientation smoothing of the ground truth.
    pub smoothing: f64,
    /// Overrides the cache directory from the environment.
    pub cache_dir: Option<PathBuf>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        let g = GaborParams::default();
        Self {
            scale_with_resolution: true,
            kernel_size: g.size,
            sigma: g.sigma,
            wavelength: g.wavelength,
            smoothing: 1.0,
            cache_dir: None,
        }
    }
}

impl StructureConfig {
    pub fn gabor(&self, height: usize) -> Result<GaborParams> {
        let p = if self.scale_with_resolution {
            GaborParams::for_resolution(height)
        } else {
            GaborParams { size: self.kernel_size, sigma: self.sigma, wavelength: self.wavelength }
        };
        p.validate()?;
        Ok(p)
    }

    /// Config value, then the environment, then `fallback`.
    pub fn resolve_cache_dir(&self, fallback: Option<&Path>) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .or_else(|| fallback.map(Path::to_path_buf))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub alpha: f64,
    pub comparisons_per_pair: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { alpha: 0.01, comparisons_per_pair: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pose: PoseConfig,
    pub structure: StructureConfig,
    pub training: TrainConfig,
    pub synth: SyntheticSceneSpec,
    pub study: StudyConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.synth.validate()?;
        if self.structure.smoothing < 0.0 || !self.structure.smoothing.is_finite() {
            return Err(Error::Config("structure.smoothing must be a non-negative number".into()));
        }
        if !(self.study.alpha > 0.0 && self.study.alpha < 1.0) || self.study.comparisons_per_pair == 0 {
            return Err(Error::Config("study.alpha must be in (0, 1) and comparisons_per_pair positive".into()));
        }
        Ok(())
    }

    pub fn prepare_options(&self, height: usize, fallback_cache: Option<&Path>) -> Result<PrepareOptions> {
        Ok(PrepareOptions {
            limbs: self.pose.limb_map()?,
            gabor: self.structure.gabor(height)?,
            structure_smoothing: self.structure.smoothing,
            cache_dir: self.structure.resolve_cache_dir(fallback_cache),
        })
    }
}
