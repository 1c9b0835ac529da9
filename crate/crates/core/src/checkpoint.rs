//! Binary model container: magic, format version, a JSON header describing
//! every network and tensor, then all tensor data as little-endian f32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cascade_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{ArchitectureConfig, Generator, GeneratorConfig, Head, Models, Variant};
use crate::parsing::LabelSet;
use crate::structure::GaborParams;

const MAGIC: &[u8; 4] = b"CSCK";
pub const FORMAT_VERSION: u32 = 1;
pub const LATEST_POINTER: &str = "latest";

/// Settings that must travel with the weights for inference to match training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub gabor: GaborParams,
    pub structure_smoothing: f64,
    pub height: usize,
    pub width: usize,
    /// Global epoch counter across all stages.
    pub epoch: usize,
    pub stage: String,
    pub feature_extractor: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    role: String,
    config: GeneratorConfig,
    head: Head,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    variant: Variant,
    labels: LabelSet,
    architecture: ArchitectureConfig,
    meta: CheckpointMeta,
    networks: Vec<NetworkEntry>,
}

fn networks(models: &Models) -> Vec<(&'static str, &Generator<f32>)> {
    let mut v = Vec::new();
    if let Some(g) = &models.shape {
        v.push(("shape", g));
    }
    if let Some(g) = &models.structure {
        v.push(("structure", g));
    }
    v.push(("appearance", &models.appearance));
    v.push(("refinement", &models.refinement));
    v
}

pub fn encode_checkpoint(models: &Models, meta: &CheckpointMeta) -> Vec<u8> {
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut entries = Vec::new();
    for (role, g) in networks(models) {
        let mut tensors = Vec::new();
        for (name, t) in g.param_names().iter().zip(g.params()) {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        entries.push(NetworkEntry { role: role.into(), config: *g.config(), head: g.head(), tensors });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        variant: models.variant,
        labels: models.labels.clone(),
        architecture: models.architecture,
        meta: meta.clone(),
        networks: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Models, CheckpointMeta)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    let blob = &bytes[16 + len..];
    let floats: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let mut shape = None;
    let mut structure = None;
    let mut appearance = None;
    let mut refinement = None;
    for net in header.networks {
        let params = net
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                let data = floats
                    .get(t.offset..t.offset + n)
                    .ok_or_else(|| bad(format!("tensor {} outside data blob", t.name)))?;
                Ok(Tensor::from_vec(&t.shape, data.to_vec())?)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = Generator::from_params(net.config, net.head, params)?;
        match net.role.as_str() {
            "shape" => shape = Some(g),
            "structure" => structure = Some(g),
            "appearance" => appearance = Some(g),
            "refinement" => refinement = Some(g),
            other => return Err(bad(format!("unknown network role '{other}'"))),
        }
    }
    let v = header.variant;
    if v.has_shape() != shape.is_some() || v.has_structure() != structure.is_some() {
        return Err(bad(format!("networks do not match variant {v}")));
    }
    let models = Models {
        variant: v,
        labels: header.labels,
        architecture: header.architecture,
        shape,
        structure,
        appearance: appearance.ok_or_else(|| bad("missing appearance network".into()))?,
        refinement: refinement.ok_or_else(|| bad("missing refinement network".into()))?,
    };
    Ok((models, header.meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, models: &Models, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(models, meta)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint file, or the `latest` checkpoint of a directory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Models, CheckpointMeta)> {
    let path = resolve_checkpoint(path.as_ref())?;
    decode_checkpoint(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
}

pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let pointer = path.join(LATEST_POINTER);
    let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(path.join(name.trim()))
}

pub fn epoch_file_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Writes the epoch file, repoints `latest`, and prunes to the newest `keep_last` files.
pub fn write_epoch_checkpoint(
    dir: &Path,
    models: &Models,
    meta: &CheckpointMeta,
    keep_last: Option<usize>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = epoch_file_name(meta.epoch);
    let path = dir.join(&name);
    save_checkpoint(&path, models, meta)?;
    let pointer = dir.join(LATEST_POINTER);
    fs::write(&pointer, format!("{name}\n")).map_err(|e| Error::io(&pointer, e))?;
    if let Some(keep) = keep_last {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
            })
            .collect();
        files.sort();
        let excess = files.len().saturating_sub(keep.max(1));
        for old in &files[..excess] {
            fs::remove_file(old).map_err(|e| Error::io(old, e))?;
        }
    }
    Ok(path)
}
