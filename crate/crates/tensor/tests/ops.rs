use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqlc_tensor::{conv2d_forward, conv2d_transpose_forward, Graph, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Quadruple-loop cross-correlation straight from the definition.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4("oracle").unwrap();
    let [cout, _, kh, kw] = w.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::<f32>::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
    let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
    let y = conv2d_forward(&x, &w, 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_average_preserves_constants() {
    let x = Tensor::<f32>::full(vec![1, 1, 6, 5], 2.0);
    let w = Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0);
    let y = conv2d_forward(&x, &w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 3]);
    assert!(y.data().iter().all(|v| (v - 2.0).abs() < 1e-6));
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2)] {
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let got = conv2d_forward(&x, &w, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
        // same check in single precision
        let got32 = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), stride, pad).unwrap();
        for (a, b) in got32.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}

#[test]
fn conv_transpose_unit_kernel_scatter() {
    let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
    let y = conv2d_transpose_forward(&x, &w, 2, 0, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data(), &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]);
}

/// Swaps the channel axes and rotates each spatial kernel by 180°.
fn flip_kernel(w: &Tensor<f64>) -> Tensor<f64> {
    let [a, b, kh, kw] = w.dims4("flip").unwrap();
    let mut out = vec![0.0; w.numel()];
    for i in 0..a {
        for j in 0..b {
            for y in 0..kh {
                for x in 0..kw {
                    out[((j * a + i) * kh + (kh - 1 - y)) * kw + (kw - 1 - x)] = w.data()[((i * b + j) * kh + y) * kw + x];
                }
            }
        }
    }
    Tensor::new(vec![b, a, kh, kw], out).unwrap()
}

#[test]
fn conv_transpose_stride_one_equals_flipped_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 6, 5], &mut rng);
    let w = rand_tensor(&[3, 4, 3, 3], &mut rng);
    let t = conv2d_transpose_forward(&x, &w, 1, 1, 0).unwrap();
    let c = conv2d_forward(&x, &flip_kernel(&w), 1, 1).unwrap();
    assert_eq!(t.shape(), c.shape());
    assert!(t.max_abs_diff(&c) < 1e-6);
}

#[test]
fn conv_input_gradient_is_transpose_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let w = rand_tensor(&[3, 2, 5, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.parameter(x);
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, 2, 2).unwrap();
    let upstream = rand_tensor(g.shape(y), &mut rng);
    let u = g.constant(upstream.clone());
    let prod = g.mul(y, u).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // conv2d_transpose with the same [Cout, Cin] kernel read as [Cin', Cout'].
    let back = conv2d_transpose_forward(&upstream, &w, 2, 2, 1).unwrap();
    let grad = g.grad(xv).unwrap();
    assert_eq!(back.numel(), grad.len());
    for (a, b) in back.data().iter().zip(grad) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f32>::uniform(vec![4, 3, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform(vec![8, 3, 5, 5], -1.0, 1.0, &mut rng);
    let a = conv2d_forward(&x, &w, 2, 2).unwrap();
    let b = conv2d_forward(&x, &w, 2, 2).unwrap();
    assert_eq!(a.data(), b.data());
}

/// GDN denominators `sqrt(beta_c + Σ_k gamma_ck x_k²)` per pixel.
fn gdn_norm(x: &[f64], beta: &[f64], gamma: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for p in 0..hw {
            let s: f64 = (0..c).map(|k| gamma[ci * c + k] * x[k * hw + p] * x[k * hw + p]).sum();
            out[ci * hw + p] = (beta[ci] + s).sqrt();
        }
    }
    out
}

#[test]
fn inverse_gdn_recovers_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, hw) = (4, 9);
    let x = rand_tensor(&[1, c, 3, 3], &mut rng);
    let beta = Tensor::<f64>::uniform(vec![c], 0.5, 1.5, &mut rng);
    let gamma = Tensor::<f64>::uniform(vec![c, c], 0.0, 0.05, &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let b = g.constant(beta.clone());
    let gm = g.constant(gamma.clone());
    let y = g.gdn(xv, b, gm, false).unwrap();
    let y = g.value(y).data().to_vec();

    // Solve x = y · norm(x) by fixed-point iteration.
    let mut est = y.clone();
    for _ in 0..200 {
        let n = gdn_norm(&est, beta.data(), gamma.data(), c, hw);
        est = y.iter().zip(&n).map(|(a, b)| a * b).collect();
    }
    for (a, b) in est.iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }

    // With the same norm, the inverse flag multiplies it back exactly.
    let zero = g.constant(Tensor::zeros(vec![c, c]));
    let fwd = g.gdn(xv, b, zero, false).unwrap();
    let inv = g.gdn(fwd, b, zero, true).unwrap();
    assert!(g.value(inv).max_abs_diff(&x) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        seed in 0u64..1000,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 5usize..10,
        w in 5usize..10,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = k / 2;
        let x = rand_tensor(&[2, cin, h, w], &mut rng);
        let kern = rand_tensor(&[cout, cin, k, k], &mut rng);
        let cx = conv2d_forward(&x, &kern, stride, pad).unwrap();
        let y = rand_tensor(cx.shape(), &mut rng);
        // choose output padding so the transpose lands on the original extent
        let [_, _, oh, ow] = cx.dims4("t").unwrap();
        let out_pad_h = h + 2 * pad - ((oh - 1) * stride + k);
        let out_pad_w = w + 2 * pad - ((ow - 1) * stride + k);
        prop_assume!(out_pad_h == out_pad_w && out_pad_h < stride.max(1));
        let ty = conv2d_transpose_forward(&y, &kern, stride, pad, out_pad_h).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        let lhs = dot(&cx, &y);
        let rhs = dot(&x, &ty);
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
    }
}
