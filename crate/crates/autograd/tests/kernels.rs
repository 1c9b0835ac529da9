use cascade_autograd::{Tape, Tensor};
use proptest::prelude::*;

fn grid(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Direct zero-padded cross-correlation.
#[allow(clippy::too_many_arguments)]
fn conv_loop(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], bias: &[f64], k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let o = bias.len();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((oc * c + ic) * k + ky) * k + kx] * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop(
        (c, o, h, w, k, stride, pad) in (1usize..4, 1usize..4, 3usize..9, 3usize..9, 1usize..4, 1usize..3, 0usize..3),
        seed in grid(4 * 8 * 8 + 4 * 4 * 9 + 4),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = seed[..c * h * w].to_vec();
        let wt = seed[c * h * w..c * h * w + o * c * k * k].to_vec();
        let b = seed[c * h * w + o * c * k * k..c * h * w + o * c * k * k + o].to_vec();
        let tape = Tape::new();
        let xv = tape.constant(Tensor::from_vec(&[c, h, w], x.clone()).unwrap());
        let wv = tape.constant(Tensor::from_vec(&[o, c, k, k], wt.clone()).unwrap());
        let bv = tape.constant(Tensor::from_vec(&[o], b.clone()).unwrap());
        let got = xv.conv2d(&wv, Some(&bv), stride, pad).unwrap().value();
        let want = conv_loop(&x, c, h, w, &wt, &b, k, stride, pad);
        prop_assert_eq!(got.data().len(), want.len());
        for (g, e) in got.data().iter().zip(&want) {
            prop_assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge(
        (c, h, w, pad) in (1usize..3, 3usize..7, 3usize..7, 1usize..3),
        data in grid(2 * 6 * 6),
    ) {
        prop_assume!(pad < h && pad < w);
        let x = data[..c * h * w].to_vec();
        let tape = Tape::new();
        let out = tape.constant(Tensor::from_vec(&[c, h, w], x.clone()).unwrap()).reflect_pad(pad).unwrap().value();
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        prop_assert_eq!(out.shape(), &[c, hp, wp][..]);
        for ch in 0..c {
            for y in 0..hp {
                for xx in 0..wp {
                    let sy = reflect(y as isize - pad as isize, h);
                    let sx = reflect(xx as isize - pad as isize, w);
                    prop_assert_eq!(out.data()[(ch * hp + y) * wp + xx], x[(ch * h + sy) * w + sx]);
                }
            }
        }
    }
}
