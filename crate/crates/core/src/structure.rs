//! Garment gradient structure: oriented Gabor responses reduced to a
//! per-pixel (orientation, confidence) field.

use std::f32::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cascade_autograd::kernels::{conv2d_forward, ConvGeometry};
use cascade_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GABOR_ORIENTATIONS: usize = 32;
const DEGENERATE_CONFIDENCE: f32 = 1e-6;
const FIELD_MAGIC: &[u8; 4] = b"CSTF";
const FIELD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    /// Odd kernel side length in pixels.
    pub size: usize,
    /// Gaussian envelope standard deviation in pixels.
    pub sigma: f64,
    /// Carrier wavelength in pixels.
    pub wavelength: f64,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self { size: 17, sigma: 3.0, wavelength: 6.0 }
    }
}

impl GaborParams {
    /// Defaults are tuned for 512-pixel frames; scale them with the frame
    /// height, keeping the carrier at least 4 pixels long.
    pub fn for_resolution(height: usize) -> Self {
        let wavelength = (6.0 * height as f64 / 512.0).max(4.0);
        let sigma = wavelength / 2.0;
        let size = 2 * (1.4 * wavelength).round() as usize + 1;
        Self { size, sigma, wavelength }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 3 || self.size % 2 == 0 {
            return Err(Error::Config(format!("Gabor kernel size must be odd and >= 3, got {}", self.size)));
        }
        if !(self.sigma > 0.0 && self.wavelength > 0.0) {
            return Err(Error::Config("Gabor sigma and wavelength must be positive".into()));
        }
        Ok(())
    }
}

/// 32 zero-mean, unit-norm even Gabor kernels at angles `i pi / 32`.
#[derive(Clone, Debug)]
pub struct GaborBank {
    params: GaborParams,
    angles: Vec<f32>,
    /// `[32, 1, size, size]`, row-major.
    weights: Vec<f32>,
}

impl GaborBank {
    pub fn new(params: GaborParams) -> Result<Self> {
        params.validate()?;
        let k = params.size;
        let half = (k / 2) as f64;
        let angles: Vec<f64> = (0..GABOR_ORIENTATIONS)
            .map(|i| i as f64 * std::f64::consts::PI / GABOR_ORIENTATIONS as f64)
            .collect();
        let mut weights = Vec::with_capacity(GABOR_ORIENTATIONS * k * k);
        for &theta in &angles {
            let (s, c) = theta.sin_cos();
            let mut kernel: Vec<f64> = (0..k * k)
                .map(|i| {
                    let (y, x) = ((i / k) as f64 - half, (i % k) as f64 - half);
                    let xr = x * c + y * s;
                    let yr = -x * s + y * c;
                    let envelope = (-(xr * xr + yr * yr) / (2.0 * params.sigma * params.sigma)).exp();
                    envelope * (2.0 * std::f64::consts::PI * xr / params.wavelength).cos()
                })
                .collect();
            let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
            kernel.iter_mut().for_each(|v| *v -= mean);
            let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
            weights.extend(kernel.iter().map(|v| (v / norm) as f32));
        }
        Ok(Self { params, angles: angles.iter().map(|&a| a as f32).collect(), weights })
    }

    pub fn params(&self) -> &GaborParams {
        &self.params
    }

    pub fn angles(&self) -> &[f32] {
        &self.angles
    }

    pub fn kernel(&self, i: usize) -> &[f32] {
        let n = self.params.size * self.params.size;
        &self.weights[i * n..(i + 1) * n]
    }

    /// All 32 responses `[32, h, w]` of a mean-subtracted, zero-padded image.
    pub fn responses(&self, image: &[f32], height: usize, width: usize) -> Vec<f32> {
        let mean = image.iter().map(|&v| v as f64).sum::<f64>() / image.len().max(1) as f64;
        let centered: Vec<f32> = image.iter().map(|&v| v - mean as f32).collect();
        let g = ConvGeometry {
            in_channels: 1,
            height,
            width,
            kernel: self.params.size,
            stride: 1,
            pad: self.params.size / 2,
        };
        conv2d_forward(&centered, &self.weights, None, GABOR_ORIENTATIONS, &g)
    }
}

/// Per-pixel orientation in `[0, pi)` and confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureField {
    height: usize,
    width: usize,
    orientation: Vec<f32>,
    confidence: Vec<f32>,
}

fn wrap_angle(a: f32) -> f32 {
    let t = a.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

impl StructureField {
    pub fn new(height: usize, width: usize, orientation: Vec<f32>, confidence: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if orientation.len() != n || confidence.len() != n {
            return Err(Error::Dimension(format!("structure grids must hold {n} values")));
        }
        if orientation.iter().any(|o| !(0.0..PI).contains(o)) {
            return Err(Error::Numeric("orientation outside [0, pi)".into()));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Numeric("confidence outside [0, 1]".into()));
        }
        Ok(Self { height, width, orientation, confidence })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, orientation: vec![0.0; height * width], confidence: vec![0.0; height * width] }
    }

    /// From a `[2, h, w]` grid; orientation is wrapped and confidence clamped.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 2 {
            return Err(Error::Shape(format!("structure grid needs 2 channels, got {c}")));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite structure values".into()));
        }
        Ok(Self {
            height: h,
            width: w,
            orientation: t.channel(0).iter().map(|&a| wrap_angle(a)).collect(),
            confidence: t.channel(1).iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = self.orientation.clone();
        data.extend_from_slice(&self.confidence);
        Tensor::from_vec(&[2, self.height, self.width], data).expect("consistent sizes")
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn orientation(&self) -> &[f32] {
        &self.orientation
    }

    pub fn confidence(&self) -> &[f32] {
        &self.confidence
    }

    pub(crate) fn confidence_mut(&mut self) -> &mut [f32] {
        &mut self.confidence
    }
}

/// Orientation of the strongest absolute response and its normalized amplitude.
pub fn extract_structure(image: &[f32], height: usize, width: usize, bank: &GaborBank) -> Result<StructureField> {
    if image.len() != height * width {
        return Err(Error::Dimension(format!("{} pixels for a {height}x{width} image", image.len())));
    }
    if image.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN pixel in structure input".into()));
    }
    let plane = height * width;
    let resp = bank.responses(image, height, width);
    let mut orientation = vec![0.0f32; plane];
    let mut confidence = vec![0.0f32; plane];
    for i in 0..plane {
        let (mut best, mut best_v) = (0, -1.0f32);
        for k in 0..GABOR_ORIENTATIONS {
            let v = resp[k * plane + i].abs();
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        orientation[i] = bank.angles[best];
        confidence[i] = best_v;
    }
    let peak = confidence.iter().copied().fold(0.0f32, f32::max);
    if peak < DEGENERATE_CONFIDENCE {
        return Ok(StructureField::zeros(height, width));
    }
    confidence.iter_mut().for_each(|c| *c = (*c / peak).min(1.0));
    Ok(StructureField { height, width, orientation, confidence })
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur restricted to in-bounds samples.
fn blur(data: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += t * data[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += t * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Confidence-weighted Gaussian smoothing of orientation in the doubled-angle
/// domain. Confidence is left untouched; pixels with no weighted support keep
/// their angle.
pub fn smooth_orientation(field: &StructureField, sigma: f64) -> StructureField {
    if !(sigma > 0.0) {
        return field.clone();
    }
    let (h, w) = field.size();
    let taps = gaussian_taps(sigma);
    let cos: Vec<f64> = field
        .orientation
        .iter()
        .zip(&field.confidence)
        .map(|(&o, &c)| c as f64 * (2.0 * o as f64).cos())
        .collect();
    let sin: Vec<f64> = field
        .orientation
        .iter()
        .zip(&field.confidence)
        .map(|(&o, &c)| c as f64 * (2.0 * o as f64).sin())
        .collect();
    let (cos, sin) = (blur(&cos, h, w, &taps), blur(&sin, h, w, &taps));
    let orientation = field
        .orientation
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            if cos[i].hypot(sin[i]) < 1e-12 {
                o
            } else {
                wrap_angle((0.5 * sin[i].atan2(cos[i])) as f32)
            }
        })
        .collect();
    StructureField { height: h, width: w, orientation, confidence: field.confidence.clone() }
}

/// Hue from orientation, saturation from confidence, full value.
pub fn visualize_structure(field: &StructureField) -> Tensor<f32> {
    let (h, w) = field.size();
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    let d = out.data_mut();
    for i in 0..plane {
        let rgb = hsv_to_rgb(field.orientation[i] / PI * 360.0, field.confidence[i], 1.0);
        for c in 0..3 {
            d[c * plane + i] = rgb[c];
        }
    }
    out
}

pub fn hsv_to_rgb(hue_deg: f32, s: f32, v: f32) -> [f32; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Binary container: magic, version, then `c h w` as u32 and f32 data, all little-endian.
pub fn save_grid(path: impl AsRef<Path>, grid: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = grid.dims3()?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut bytes = Vec::with_capacity(20 + 4 * grid.len());
    bytes.extend_from_slice(FIELD_MAGIC);
    for v in [FIELD_VERSION, c as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != FIELD_MAGIC {
        return Err(bad("not a structure grid file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != FIELD_VERSION as usize {
        return Err(bad("unsupported grid version"));
    }
    let (c, h, w) = (word(1), word(2), word(3));
    let payload = &bytes[20..];
    if payload.len() != 4 * c * h * w {
        return Err(bad("truncated grid payload"));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&[c, h, w], data)?)
}

pub fn save_structure(path: impl AsRef<Path>, field: &StructureField) -> Result<()> {
    save_grid(path, &field.to_tensor())
}

pub fn load_structure(path: impl AsRef<Path>) -> Result<StructureField> {
    StructureField::from_tensor(&load_grid(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn grating(h: usize, w: usize, theta: f32, wavelength: f32) -> Vec<f32> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32, (i % w) as f32);
                0.5 + 0.5 * (2.0 * PI * (x * theta.cos() + y * theta.sin()) / wavelength).cos()
            })
            .collect()
    }

    #[test]
    fn kernels_are_zero_mean_unit_norm() {
        let bank = GaborBank::new(GaborParams::default()).unwrap();
        for i in 0..32 {
            let k = bank.kernel(i);
            let mean: f64 = k.iter().map(|&v| v as f64).sum::<f64>() / k.len() as f64;
            let norm: f64 = k.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert!(mean.abs() < 1e-6);
            assert!((norm - 1.0).abs() < 1e-5);
        }
        assert!(bank.angles().windows(2).all(|a| a[0] < a[1]));
    }

    #[test]
    fn even_size_rejected() {
        let p = GaborParams { size: 4, ..GaborParams::default() };
        assert!(matches!(GaborBank::new(p), Err(Error::Config(_))));
    }

    #[test]
    fn resolution_scaling() {
        assert_eq!(GaborParams::for_resolution(512).wavelength, 6.0);
        assert_eq!(GaborParams::for_resolution(64).wavelength, 4.0);
        assert!(GaborParams::for_resolution(1024).validate().is_ok());
    }

    #[test]
    fn constant_image_is_degenerate() {
        let bank = GaborBank::new(GaborParams::default()).unwrap();
        let f = extract_structure(&vec![0.3; 32 * 32], 32, 32, &bank).unwrap();
        assert!(f.confidence().iter().all(|&c| c == 0.0));
        assert!(f.orientation().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn nan_rejected() {
        let bank = GaborBank::new(GaborParams::default()).unwrap();
        let mut img = vec![0.0; 16];
        img[3] = f32::NAN;
        assert!(matches!(extract_structure(&img, 4, 4, &bank), Err(Error::Numeric(_))));
    }

    #[test]
    fn confidence_peak_is_one() {
        let bank = GaborBank::new(GaborParams::default()).unwrap();
        let f = extract_structure(&grating(40, 40, 0.7, 6.0), 40, 40, &bank).unwrap();
        let peak = f.confidence().iter().copied().fold(0.0, f32::max);
        assert_eq!(peak, 1.0);
    }

    #[test]
    fn hsv_primaries() {
        let f = StructureField::new(1, 3, vec![0.0, PI / 2.0, 1.0], vec![1.0, 1.0, 0.0]).unwrap();
        let v = visualize_structure(&f);
        let px = |i: usize| [v.data()[i], v.data()[3 + i], v.data()[6 + i]];
        assert_eq!(px(0), [1.0, 0.0, 0.0]);
        let cyan = px(1);
        assert!(cyan[0].abs() < 1e-6 && (cyan[1] - 1.0).abs() < 1e-6 && (cyan[2] - 1.0).abs() < 1e-6);
        assert_eq!(px(2), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn grid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = StructureField::new(2, 3, vec![0.1, 0.2, 0.3, 3.0, 0.0, 1.5], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let p = dir.path().join("s.bin");
        save_structure(&p, &f).unwrap();
        assert_eq!(load_structure(&p).unwrap(), f);
        std::fs::write(&p, b"junk").unwrap();
        assert!(load_grid(&p).is_err());
    }

    #[test]
    fn smoothing_identities() {
        let f = StructureField::new(4, 4, vec![1.2; 16], (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        assert_eq!(smooth_orientation(&f, 0.0), f);
        let s = smooth_orientation(&f, 2.0);
        assert_eq!(s.confidence(), f.confidence());
        assert!(s.orientation().iter().all(|&o| (o - 1.2).abs() < 1e-5));
    }
}
