use poseview::tensor::{kernels, seeded_normal, Tensor};
use proptest::prelude::*;

/// Direct quadruple-loop cross-correlation.
fn conv_brute(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_5x5_3x3_matches_brute_force() {
    let x = seeded_normal::<f64>(&[1, 1, 5, 5], 1).unwrap();
    let w = seeded_normal::<f64>(&[1, 1, 3, 3], 2).unwrap();
    let y = x.conv2d(&w, None, 1, 0).unwrap();
    let expected = conv_brute(&x, &w, None, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn conv_exhaustive_small_shapes() {
    let mut seed = 10;
    for h in 1..=8 {
        for w in 1..=8 {
            for c in 1..=4 {
                for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 1, 0), (3, 1, 0)] {
                    if h + 2 * pad < k || w + 2 * pad < k {
                        continue;
                    }
                    seed += 1;
                    let x = seeded_normal::<f32>(&[2, c, h, w], seed).unwrap();
                    let wt = seeded_normal::<f32>(&[3, c, k, k], seed + 1000).unwrap();
                    let b = seeded_normal::<f32>(&[3], seed + 2000).unwrap();
                    let y = x.conv2d(&wt, Some(&b), stride, pad).unwrap();
                    let expected = conv_brute(&x.cast(), &wt.cast(), Some(&b.cast()), stride, pad);
                    for (a, e) in y.data().iter().zip(&expected) {
                        assert!(
                            (*a as f64 - e).abs() < 1e-4,
                            "h={h} w={w} c={c} k={k} s={stride} p={pad}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
    assert!(x.conv2d(&w, None, 1, 1).is_err());
}

#[test]
fn group_norm_groups_are_standardized() {
    let x = seeded_normal::<f64>(&[2, 6, 4, 4], 3)
        .unwrap()
        .map(|v| 3.0 * v + 1.5);
    let y = x.group_norm(3, None, None).unwrap();
    for chunk in y.data().chunks_exact(2 * 16) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn group_norm_rejects_non_dividing_groups() {
    let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
    assert!(x.group_norm(4, None, None).is_err());
}

#[test]
fn group_norm_applies_scale_and_shift() {
    let x = seeded_normal::<f64>(&[1, 2, 3, 3], 4).unwrap();
    let scale = Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap();
    let shift = Tensor::from_vec(&[2], vec![0.5, 0.0]).unwrap();
    let plain = x.group_norm(1, None, None).unwrap();
    let y = x.group_norm(1, Some(&scale), Some(&shift)).unwrap();
    for (i, (a, p)) in y.data().iter().zip(plain.data()).enumerate() {
        let c = i / 9;
        let expected = p * scale.data()[c] + shift.data()[c];
        assert!((a - expected).abs() < 1e-12);
    }
}

#[test]
fn matmul_and_bmm_agree_with_loops() {
    let a = seeded_normal::<f64>(&[2, 3, 4], 5).unwrap();
    let b = seeded_normal::<f64>(&[4, 5], 6).unwrap();
    let y = a.matmul(&b).unwrap();
    assert_eq!(y.shape(), &[2, 3, 5]);
    for r in 0..6 {
        for c in 0..5 {
            let e: f64 = (0..4)
                .map(|k| a.data()[r * 4 + k] * b.data()[k * 5 + c])
                .sum();
            assert!((y.data()[r * 5 + c] - e).abs() < 1e-12);
        }
    }
    // q·kᵀ with a broadcast key batch
    let q = seeded_normal::<f64>(&[2, 3, 4], 7).unwrap();
    let k = seeded_normal::<f64>(&[1, 5, 4], 8).unwrap();
    let l = kernels::bmm(&q, &k, false, true).unwrap();
    assert_eq!(l.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4)
                    .map(|d| q.data()[(bi * 3 + i) * 4 + d] * k.data()[j * 4 + d])
                    .sum();
                assert!((l.data()[(bi * 3 + i) * 5 + j] - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn upsample_then_pool_is_identity() {
    let x = seeded_normal::<f64>(&[2, 3, 4, 4], 9).unwrap();
    let y = x.nearest_upsample().unwrap();
    assert_eq!(y.shape(), &[2, 3, 8, 8]);
    let z = y.avgpool_downsample().unwrap();
    assert!(z.max_abs_diff(&x).unwrap() < 1e-15);
}

#[test]
fn ops_are_bitwise_deterministic() {
    let x = seeded_normal::<f32>(&[2, 4, 8, 8], 11).unwrap();
    let w = seeded_normal::<f32>(&[4, 4, 3, 3], 12).unwrap();
    let run = || {
        x.conv2d(&w, None, 1, 1)
            .unwrap()
            .group_norm(2, None, None)
            .unwrap()
            .silu()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        rows in 1usize..6,
        cols in 1usize..12,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let x = seeded_normal::<f64>(&[rows, cols], seed).unwrap().map(|v| 8.0 * v);
        let y = x.softmax_rows().unwrap();
        for row in y.data().chunks_exact(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = x.map(|v| v + shift).softmax_rows().unwrap();
        prop_assert!(shifted.max_abs_diff(&y).unwrap() < 1e-6);
    }
}
