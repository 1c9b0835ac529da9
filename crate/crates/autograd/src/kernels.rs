//! Forward and backward kernels on raw channel-first buffers.
//!
//! These are shared by the tape ops and by callers that only need a fast
//! forward pass (filter banks), so they take slices rather than tape nodes.

use crate::float::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold zero-padded patches into a `[C*k*k, Ho*Wo]` matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = g.pad.saturating_sub(kj);
                        let hi = (g.width + g.pad).saturating_sub(kj).min(wo);
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the image.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2D convolution (cross-correlation) of one image.
///
/// `weight` is `[out, in, k, k]`; returns `[out, Ho, Wo]` data.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let cols = im2col(x, g);
    let n = g.out_pixels();
    let mut out = vec![T::zero(); out_channels * n];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    gemm(out_channels, g.patch_len(), n, weight, false, &cols, false, &mut out, bias.is_some());
    out
}

/// Gradients of [`conv2d_forward`]. Input gradient is only computed when
/// `dx` is provided.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.out_pixels();
    let k = g.patch_len();
    if let Some(db) = db {
        for (o, row) in dy.chunks(n).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols = im2col(x, g);
        gemm(out_channels, n, k, dy, false, &cols, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * n];
        gemm(k, out_channels, n, weight, true, dy, false, &mut dcols, false);
        col2im(&dcols, g, dx);
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

/// Source index into the unpadded plane for every padded pixel.
pub fn reflect_map(h: usize, w: usize, pad: usize) -> Vec<usize> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut map = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect_index(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect_index(x as isize - pad as isize, w);
            map.push(sy * w + sx);
        }
    }
    map
}

pub fn instance_norm_forward<T: Float>(x: &[T], plane: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / plane.max(1));
    let np = T::from_usize(plane).unwrap();
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let mean = src.iter().copied().sum::<T>() / np;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Float>(y: &[T], inv_std: &[T], dy: &[T], plane: usize, dx: &mut [T]) {
    let np = T::from_usize(plane).unwrap();
    for (((yc, dyc), dxc), &inv) in y
        .chunks(plane)
        .zip(dy.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .zip(inv_std)
    {
        let mean_dy = dyc.iter().copied().sum::<T>() / np;
        let mean_dyy = yc.iter().zip(dyc).map(|(&a, &b)| a * b).sum::<T>() / np;
        for ((d, &yv), &g) in dxc.iter_mut().zip(yc).zip(dyc) {
            *d += inv * (g - mean_dy - yv * mean_dyy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], oc: usize, g: &ConvGeometry) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; oc * ho * wo];
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                s += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((o * g.in_channels + c) * g.kernel + ki) * g.kernel + kj];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 3, 7), (2, 0, 1)] {
            let g = ConvGeometry { in_channels: 2, height: 7, width: 6, kernel: k, stride, pad };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let got = conv2d_forward(&x, &w, None, 3, &g);
            let want = naive_conv(&x, &w, 3, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn reflect_map_mirrors_without_repeating_edge() {
        let map = reflect_map(1, 4, 2);
        // padded row: x = -2..6 -> 2 1 0 1 2 3 2 1
        assert_eq!(&map[..8], &[2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(map.len(), 5 * 8);
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let x: Vec<f64> = (0..32).map(|i| (i as f64).powi(2)).collect();
        let (y, _) = instance_norm_forward(&x, 16, 0.0);
        for c in y.chunks(16) {
            let m: f64 = c.iter().sum::<f64>() / 16.0;
            let v: f64 = c.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
