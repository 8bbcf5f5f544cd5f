//! Kernels against naive reference loops and closed forms.

mod common;

use mokt::mixers::{discretize, expm1_over, SERIES_THRESHOLD};
use mokt::tensor::kernels::{self, conv2d, depthwise_conv2d, layer_norm, matmul, softmax};
use mokt::tensor::{Element, Mask, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (bs, m, k, n) = (3, 5, 7, 4);
    let a = Tensor::<f64>::randn([bs, m, k], 1.0, &mut r);
    let b = Tensor::<f64>::randn([bs, k, n], 1.0, &mut r);
    let mut expect = vec![0.0; bs * m * n];
    for bi in 0..bs {
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[(bi * m + i) * n + j] += a.at(&[bi, i, p]) * b.at(&[bi, p, j]);
                }
            }
        }
    }
    close(matmul(&a, &b).unwrap().data(), &expect, 1e-13);

    // a shared right operand broadcasts over the batch
    let w = Tensor::<f64>::randn([k, n], 1.0, &mut r);
    let y = matmul(&a, &w).unwrap();
    for bi in 0..bs {
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a.at(&[bi, i, p]) * w.at(&[p, j])).sum();
                assert!((y.at(&[bi, i, j]) - e).abs() < 1e-13);
            }
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = w.shape()[0];
    let cout = if depthwise { cin } else { w.shape()[3] };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * ho * wo * cout];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            if depthwise {
                                acc += x.at(&[bi, iy, ix, co]) * w.at(&[ky, kx, co]);
                            } else {
                                for ci in 0..cin {
                                    acc += x.at(&[bi, iy, ix, ci]) * w.at(&[ky, kx, ci, co]);
                                }
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn convolutions_match_naive_loops() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn([2, 9, 7, 3], 1.0, &mut r);
    for (k, stride, pad) in [(3, 2, 1), (3, 1, 1), (1, 1, 0), (4, 4, 0), (2, 2, 0)] {
        let w = Tensor::<f64>::randn([k, k, 3, 5], 1.0, &mut r);
        close(
            conv2d(&x, &w, stride, pad).unwrap().data(),
            &naive_conv(&x, &w, stride, pad, false),
            1e-13,
        );
    }
    for (k, stride, pad) in [(7, 1, 3), (3, 2, 1), (5, 1, 2)] {
        let w = Tensor::<f64>::randn([k, k, 3], 1.0, &mut r);
        close(
            depthwise_conv2d(&x, &w, stride, pad).unwrap().data(),
            &naive_conv(&x, &w, stride, pad, true),
            1e-13,
        );
    }
}

#[test]
fn softmax_and_layer_norm_match_definitions() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn([4, 6], 3.0, &mut r);
    let y = softmax(&x, None).unwrap();
    for i in 0..4 {
        let row: Vec<f64> = (0..6).map(|j| x.at(&[i, j])).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..6 {
            assert!((y.at(&[i, j]) - row[j].exp() / z).abs() < 1e-14);
        }
    }
    // causal rows renormalize over the visible prefix
    let sq = Tensor::<f64>::randn([5, 5], 1.0, &mut r);
    let yc = softmax(&sq, Some(&Mask::causal(5))).unwrap();
    for i in 0..5 {
        let z: f64 = (0..=i).map(|j| sq.at(&[i, j]).exp()).sum();
        for j in 0..5 {
            let e = if j <= i { sq.at(&[i, j]).exp() / z } else { 0.0 };
            assert!((yc.at(&[i, j]) - e).abs() < 1e-14);
        }
    }

    let gamma = Tensor::<f64>::randn([6], 1.0, &mut r);
    let beta = Tensor::<f64>::randn([6], 1.0, &mut r);
    let eps = 1e-6;
    let ln = layer_norm(&x, &gamma, &beta, eps).unwrap();
    for i in 0..4 {
        let row: Vec<f64> = (0..6).map(|j| x.at(&[i, j])).collect();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let e = (row[j] - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((ln.at(&[i, j]) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_survives_extreme_logits() {
    let x = Tensor::<f64>::new([1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
    let y = softmax(&x, None).unwrap();
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn erf_and_gelu_reference_values() {
    // erf(1), erf(0.5), erf(2) to 16 digits
    for (x, e) in [
        (1.0f64, 0.842_700_792_949_714_9),
        (0.5, 0.520_499_877_813_046_5),
        (2.0, 0.995_322_265_018_952_7),
    ] {
        assert!((Element::erf(x) - e).abs() < 1e-15);
        assert!((Element::erf(-x) + e).abs() < 1e-15);
    }
    let g = kernels::gelu(&Tensor::<f64>::new([3], vec![1.0, -1.0, 0.0]).unwrap());
    // gelu(x) = x·Φ(x) with Φ(1) = (1 + erf(1/√2))/2
    let big_phi = 0.5 * (1.0 + Element::erf(1.0f64 / 2f64.sqrt()));
    assert!((g.data()[0] - big_phi).abs() < 1e-15);
    assert!((g.data()[1] + (1.0 - big_phi)).abs() < 1e-15);
    assert_eq!(g.data()[2], 0.0);
}

#[test]
fn discretization_closed_forms() {
    // Δ = 1, A = -1: Ā = e⁻¹ and B̄ = (1 - e⁻¹)·B
    let (ab, bb) = discretize(1.0f64, -1.0, 2.0);
    assert!((ab - (-1.0f64).exp()).abs() < 1e-16);
    assert!((bb - 2.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-15);

    // the series and direct branches meet continuously at the threshold
    let t = SERIES_THRESHOLD;
    for z in [t * 0.999, t * 1.001, -t * 0.999, -t * 1.001] {
        let exact = 1.0 + z / 2.0 + z * z / 6.0;
        assert!((expm1_over(z) - exact).abs() < 1e-12, "z = {z}");
    }
    assert_eq!(expm1_over(0.0f64), 1.0);
    // tiny Δ·A: B̄ → Δ·B
    let (ab, bb) = discretize(1e-9f64, -1.0, 3.0);
    assert!((ab - 1.0).abs() < 1e-8);
    assert!((bb / 3e-9 - 1.0).abs() < 1e-9);
}

#[test]
fn vanishing_state_matrix_gives_cumulative_sum() {
    // A → 0: h_t = Σ_{s≤t} Δ_s B_s x_s and y_t = C_t · h_t
    assert!(common::vanishing_a_error(4) <= 1e-8);
}

#[test]
fn f32_kernels_track_f64() {
    let mut r = rng(5);
    let a = Tensor::<f64>::randn([4, 16, 16], 1.0, &mut r);
    let b = Tensor::<f64>::randn([16, 8], 1.0, &mut r);
    let y64 = matmul(&a, &b).unwrap();
    let y32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap().cast::<f64>();
    close(y32.data(), y64.data(), 1e-5);
}
