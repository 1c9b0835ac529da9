use super::keypoints::KeypointFrame;

/// Causal first and second temporal derivatives of every keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeFrame {
    pub frame_index: usize,
    pub first: Vec<[f64; 2]>,
    pub second: Vec<[f64; 2]>,
    /// False when the keypoint is invalid at any frame of the stencil.
    pub valid: Vec<bool>,
}

impl DerivativeFrame {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Backward differences `k[n] - k[n-1]` and `k[n] - 2 k[n-1] + k[n-2]`.
///
/// Frame 0 has zero derivatives; frame 1 has a zero second derivative.
pub fn temporal_derivatives(frames: &[KeypointFrame]) -> Vec<DerivativeFrame> {
    frames
        .iter()
        .enumerate()
        .map(|(n, cur)| {
            let k = cur.len();
            let mut first = vec![[0.0; 2]; k];
            let mut second = vec![[0.0; 2]; k];
            let mut valid = cur.valid().to_vec();
            if n >= 1 {
                let prev = &frames[n - 1];
                for i in 0..k {
                    valid[i] &= prev.valid()[i];
                    let (a, b) = (cur.points()[i], prev.points()[i]);
                    first[i] = [a[0] - b[0], a[1] - b[1]];
                }
            }
            if n >= 2 {
                let (prev, prev2) = (&frames[n - 1], &frames[n - 2]);
                for i in 0..k {
                    valid[i] &= prev2.valid()[i];
                    let (a, b, c) = (cur.points()[i], prev.points()[i], prev2.points()[i]);
                    second[i] = [a[0] - 2.0 * b[0] + c[0], a[1] - 2.0 * b[1] + c[1]];
                }
            }
            for i in 0..k {
                if !valid[i] {
                    first[i] = [0.0; 2];
                    second[i] = [0.0; 2];
                }
            }
            DerivativeFrame {
                frame_index: cur.frame_index,
                first,
                second,
                valid,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(xs: &[f64]) -> Vec<KeypointFrame> {
        xs.iter()
            .enumerate()
            .map(|(n, &x)| KeypointFrame::from_points(n, vec![[x, 2.0 * x]]))
            .collect()
    }

    #[test]
    fn constant_pose_has_zero_derivatives() {
        let d = temporal_derivatives(&track(&[4.0; 5]));
        assert_eq!(d.len(), 5);
        for f in d {
            assert_eq!(f.first[0], [0.0, 0.0]);
            assert_eq!(f.second[0], [0.0, 0.0]);
        }
    }

    #[test]
    fn linear_motion() {
        let xs: Vec<f64> = (0..6).map(|n| 3.0 * n as f64).collect();
        let d = temporal_derivatives(&track(&xs));
        assert_eq!(d[0].first[0], [0.0, 0.0]);
        for f in &d[1..] {
            assert_eq!(f.first[0], [3.0, 6.0]);
        }
        for f in &d[..2] {
            assert_eq!(f.second[0], [0.0, 0.0]);
        }
        for f in &d[2..] {
            assert_eq!(f.second[0], [0.0, 0.0]);
        }
    }

    #[test]
    fn quadratic_motion_matches_explicit_differences() {
        // Oracle: differences taken directly on the listed sequence 0, 1, 4, 9, 16, 25.
        let xs = [0.0, 1.0, 4.0, 9.0, 16.0, 25.0];
        let d = temporal_derivatives(&track(&xs));
        let expected_first = [0.0, 1.0, 3.0, 5.0, 7.0, 9.0];
        for (n, f) in d.iter().enumerate() {
            assert_eq!(f.first[0][0], expected_first[n]);
            if n >= 2 {
                assert_eq!(f.second[0][0], 2.0);
            }
        }
    }

    #[test]
    fn invalid_stencil_point_is_flagged() {
        let mut frames = track(&[0.0, 1.0, 2.0]);
        frames[0] = KeypointFrame::new(0, vec![[0.0, 0.0]], vec![false]).unwrap();
        let d = temporal_derivatives(&frames);
        assert!(!d[1].valid[0]);
        assert!(!d[2].valid[0]);
        assert_eq!(d[2].first[0], [0.0, 0.0]);
    }

    #[test]
    fn empty_sequence() {
        assert!(temporal_derivatives(&[]).is_empty());
    }
}
