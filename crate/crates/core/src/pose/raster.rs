//! Binary skeleton lines and bone-interpolated derivative maps.

use cascade_autograd::Tensor;

use super::derivatives::DerivativeFrame;
use super::keypoints::KeypointFrame;
use super::limbs::{LimbMap, DERIVATIVE_CHANNELS, LIMB_GROUPS};

const COORD_LIMIT: f64 = (1u64 << 20) as f64;

/// One rasterized bone: pixels in order from the first endpoint, clipped to
/// the frame, each with its position along the full unclipped line.
struct LineSpan {
    /// `(row, col, step)` with `step` in `0..=steps`.
    pixels: Vec<(usize, usize, i64)>,
    steps: i64,
}

fn snap(v: f64) -> i64 {
    v.clamp(-COORD_LIMIT, COORD_LIMIT).round() as i64
}

/// Integer line walk: one pixel per step along the major axis, the minor
/// coordinate rounded with pure integer arithmetic.
fn walk(p0: [f64; 2], p1: [f64; 2], size: (usize, usize)) -> Option<LineSpan> {
    if !(p0.iter().chain(p1.iter()).all(|v| v.is_finite())) {
        return None;
    }
    let (h, w) = (size.0 as i64, size.1 as i64);
    let (x0, y0, x1, y1) = (snap(p0[0]), snap(p0[1]), snap(p1[0]), snap(p1[1]));
    if (x0 < 0 && x1 < 0) || (y0 < 0 && y1 < 0) || (x0 >= w && x1 >= w) || (y0 >= h && y1 >= h) {
        return None;
    }
    let (dx, dy) = (x1 - x0, y1 - y0);
    let x_major = dx.abs() >= dy.abs();
    let (m0, dm, n0, dn, m_len) = if x_major { (x0, dx, y0, dy, w) } else { (y0, dy, x0, dx, h) };
    let steps = dm.abs();
    let (m_sign, n_sign) = (dm.signum(), dn.signum());
    // Restrict to steps whose major coordinate is inside the frame.
    let (lo, hi) = if m_sign >= 0 { (-m0, m_len - 1 - m0) } else { (m0 - (m_len - 1), m0) };
    let (lo, hi) = (lo.max(0), hi.min(steps));
    let mut pixels = Vec::with_capacity((hi - lo + 1).max(0) as usize);
    for i in lo..=hi {
        let m = m0 + m_sign * i;
        let n = if steps == 0 {
            n0
        } else {
            n0 + n_sign * ((2 * i * dn.abs() + steps) / (2 * steps))
        };
        let (x, y) = if x_major { (m, n) } else { (n, m) };
        if x >= 0 && x < w && y >= 0 && y < h {
            pixels.push((y as usize, x as usize, i));
        }
    }
    Some(LineSpan { pixels, steps })
}

/// In-bounds pixels `(row, col)` of the line between two points, in drawing order.
pub fn line_pixels(p0: [f64; 2], p1: [f64; 2], size: (usize, usize)) -> Vec<(usize, usize)> {
    walk(p0, p1, size)
        .map(|s| s.pixels.into_iter().map(|(r, c, _)| (r, c)).collect())
        .unwrap_or_default()
}

/// 9 x h x w binary skeleton. Bones with an invalid endpoint are skipped.
pub fn rasterize_skeleton(frame: &KeypointFrame, limbs: &LimbMap, size: (usize, usize)) -> Tensor<f32> {
    let (h, w) = size;
    let mut out = Tensor::zeros(&[LIMB_GROUPS, h, w]);
    for (g, group) in limbs.groups().iter().enumerate() {
        let plane = out.channel_mut(g);
        for &(a, b) in &group.bones {
            let (Some(pa), Some(pb)) = (frame.point(a), frame.point(b)) else { continue };
            for (r, c) in line_pixels(pa, pb, size) {
                plane[r * w + c] = 1.0;
            }
        }
    }
    out
}

/// 36 x h x w derivative maps, channel `group * 4 + [dx, dy, ddx, ddy]`.
///
/// Endpoint values are linearly interpolated along each drawn bone. A bone
/// whose derivative is invalid at either endpoint writes zeros.
pub fn rasterize_derivatives(
    frame: &KeypointFrame,
    deriv: &DerivativeFrame,
    limbs: &LimbMap,
    size: (usize, usize),
) -> Tensor<f32> {
    let (h, w) = size;
    let plane = h * w;
    let mut out = Tensor::<f32>::zeros(&[DERIVATIVE_CHANNELS, h, w]);
    let data = out.data_mut();
    for (g, group) in limbs.groups().iter().enumerate() {
        for &(a, b) in &group.bones {
            let (Some(pa), Some(pb)) = (frame.point(a), frame.point(b)) else { continue };
            let Some(span) = walk(pa, pb, size) else { continue };
            let usable = deriv.valid.get(a).copied().unwrap_or(false) && deriv.valid.get(b).copied().unwrap_or(false);
            let ends = |k: usize| [deriv.first[k][0], deriv.first[k][1], deriv.second[k][0], deriv.second[k][1]];
            let (va, vb) = if usable { (ends(a), ends(b)) } else { ([0.0; 4], [0.0; 4]) };
            for &(r, c, i) in &span.pixels {
                let t = if span.steps == 0 { 0.0 } else { i as f64 / span.steps as f64 };
                for q in 0..4 {
                    let v = va[q] + t * (vb[q] - va[q]);
                    data[(g * 4 + q) * plane + r * w + c] = v as f32;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::limbs::{Anchors, LimbGroup};

    fn single_bone_map(group: usize) -> LimbMap {
        let names = ["face", "head", "torso", "left_arm", "right_arm", "left_leg", "right_leg", "left_hand", "right_hand"];
        let groups = names
            .iter()
            .enumerate()
            .map(|(i, n)| LimbGroup { name: n.to_string(), bones: if i == group { vec![(0, 1)] } else { vec![] } })
            .collect();
        LimbMap::new(2, groups, Anchors { neck: 0, mid_hip: 1, ankles: vec![1] }).unwrap()
    }

    fn count(t: &Tensor<f32>, c: usize) -> usize {
        t.channel(c).iter().filter(|&&v| v != 0.0).count()
    }

    #[test]
    fn vertical_bone_has_eleven_pixels() {
        let f = KeypointFrame::from_points(0, vec![[10.0, 10.0], [10.0, 20.0]]);
        let s = rasterize_skeleton(&f, &single_bone_map(2), (32, 32));
        assert_eq!(count(&s, 2), 11);
        for c in (0..9).filter(|&c| c != 2) {
            assert_eq!(count(&s, c), 0);
        }
        for y in 10..=20 {
            assert_eq!(s.channel(2)[y * 32 + 10], 1.0);
        }
    }

    #[test]
    fn empty_pose_is_blank() {
        let f = KeypointFrame::new(0, vec![[1.0, 1.0]; 2], vec![false; 2]).unwrap();
        let s = rasterize_skeleton(&f, &single_bone_map(0), (8, 8));
        assert_eq!(s.sum(), 0.0);
    }

    #[test]
    fn partially_outside_bone_keeps_in_bounds_pixels() {
        // Horizontal bone from x=-5 to x=5 on row 3: oracle pixels are x in 0..=5.
        let px = line_pixels([-5.0, 3.0], [5.0, 3.0], (8, 8));
        assert_eq!(px, (0..=5).map(|x| (3, x)).collect::<Vec<_>>());
    }

    #[test]
    fn derivative_midpoint_is_interpolated() {
        let f = KeypointFrame::from_points(0, vec![[0.0, 4.0], [10.0, 4.0]]);
        let d = DerivativeFrame {
            frame_index: 0,
            first: vec![[0.0, 0.0], [10.0, 0.0]],
            second: vec![[0.0; 2]; 2],
            valid: vec![true; 2],
        };
        let out = rasterize_derivatives(&f, &d, &single_bone_map(3), (16, 16));
        let dx = out.channel(3 * 4);
        assert!((dx[4 * 16 + 5] - 5.0).abs() < 1e-6);
        assert_eq!(dx[4 * 16 + 10], 10.0);
        assert_eq!(dx[4 * 16], 0.0);
    }

    #[test]
    fn invalid_derivative_zeroes_bone() {
        let f = KeypointFrame::from_points(0, vec![[0.0, 4.0], [10.0, 4.0]]);
        let d = DerivativeFrame {
            frame_index: 0,
            first: vec![[3.0, 3.0]; 2],
            second: vec![[1.0; 2]; 2],
            valid: vec![true, false],
        };
        let map = single_bone_map(3);
        assert_eq!(rasterize_derivatives(&f, &d, &map, (16, 16)).sum(), 0.0);
        assert_eq!(count(&rasterize_skeleton(&f, &map, (16, 16)), 3), 11);
    }

    #[test]
    fn far_away_and_non_finite_bones_are_skipped() {
        assert!(line_pixels([1e300, 0.0], [1e300, 5.0], (8, 8)).is_empty());
        assert!(line_pixels([f64::NAN, 0.0], [1.0, 5.0], (8, 8)).is_empty());
        assert!(!line_pixels([-1e12, -1e12], [1e12, 1e12], (8, 8)).is_empty());
    }
}
