//! PNG frame I/O. RGB images are `3 x h x w` planar tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use cascade_autograd::Tensor;

use crate::error::{Error, Result};

pub(crate) struct RawPng {
    pub width: usize,
    pub height: usize,
    pub color: png::ColorType,
    pub depth: png::BitDepth,
    pub bytes: Vec<u8>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

pub(crate) fn read_png(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| png_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

pub(crate) fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Loads an 8-bit RGB, RGBA or grayscale PNG.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.depth != png::BitDepth::Eight {
        return Err(png_err(path, "only 8-bit images are supported"));
    }
    let stride = match raw.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    let plane = raw.width * raw.height;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let px = &raw.bytes[i * stride..];
        for c in 0..3 {
            let v = if stride >= 3 { px[c] } else { px[0] };
            data[c * plane + i] = f32::from(v) / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, raw.height, raw.width], data)?)
}

/// Quantizes to 8 bits per channel with rounding; values are clamped to `[0, 1]`.
pub fn to_rgb8(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// SHA-256 over the 8-bit quantized frames, in order, as lowercase hex.
pub fn frames_digest(frames: &[Tensor<f32>]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for f in frames {
        h.update(to_rgb8(f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_rgb(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    write_png(path.as_ref(), w, h, png::ColorType::Rgb, None, &to_rgb8(image)?)
}

/// Rec. 601 luma of an RGB tensor, shape `h x w` flattened.
pub fn luminance(image: &Tensor<f32>) -> Result<Vec<f32>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect())
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_rgb_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor<f32>>> {
    list_pngs(dir)?.iter().map(load_rgb).collect()
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn save_rgb_dir(dir: impl AsRef<Path>, frames: &[Tensor<f32>]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("frame_{i:05}.png"));
            save_rgb(&p, f).map(|_| p)
        })
        .collect()
}

/// Lossless animated PNG of a frame sequence.
#[cfg(feature = "video")]
pub fn save_apng(path: impl AsRef<Path>, frames: &[Tensor<f32>], fps: u16) -> Result<()> {
    let path = path.as_ref();
    let first = frames.first().ok_or_else(|| Error::Dataset("no frames to encode".into()))?;
    let (_, h, w) = first.dims3()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_animated(frames.len() as u32, 0).map_err(|e| png_err(path, e))?;
    enc.set_frame_delay(1, fps.max(1)).map_err(|e| png_err(path, e))?;
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    for f in frames {
        if f.dims3()? != (3, h, w) {
            return Err(Error::Shape("all frames must share one size".into()));
        }
        writer.write_image_data(&to_rgb8(f)?).map_err(|e| png_err(path, e))?;
    }
    writer.finish().map_err(|e| png_err(path, e))
}
