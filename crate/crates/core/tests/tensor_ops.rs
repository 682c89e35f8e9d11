use crackseg_core::tensor::{grad_check, Mode, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct sliding-window cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * wd + ix as usize;
                                acc += xd[xi] * wdat[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    t(&[n, o, oh, ow], &out)
}

fn forward(f: impl FnOnce(&mut Tape<f64>) -> Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).unwrap().clone()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let y = forward(|tp| {
        let (xv, wv) = (tp.constant(x.clone()), tp.constant(t(&[1, 1, 1, 1], &[1.0])));
        tp.conv2d(xv, wv, None, 1, 0).unwrap()
    });
    assert!(y.bitwise_eq(&x));
}

#[test]
fn conv_diagonal_kernel_example() {
    let y = forward(|tp| {
        let x = tp.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tp.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        tp.conv2d(x, w, None, 1, 0).unwrap()
    });
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[6., 8., 12., 14.]);
}

#[test]
fn conv_zero_weight_annihilates() {
    let y = forward(|tp| {
        let x = tp.constant(random(&[2, 3, 5, 5], 1));
        let w = tp.constant(Tensor::zeros([4, 3, 3, 3]));
        tp.conv2d(x, w, None, 1, 1).unwrap()
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_sliding_window_oracle() {
    for (stride, pad, seed) in [(1, 0, 2), (1, 1, 3), (2, 1, 4), (2, 3, 5)] {
        let x = random(&[2, 3, 9, 7], seed);
        let w = random(&[4, 3, 3, 3], seed + 100);
        let y = forward(|tp| {
            let (xv, wv) = (tp.constant(x.clone()), tp.constant(w.clone()));
            tp.conv2d(xv, wv, None, stride, pad).unwrap()
        });
        assert!(max_abs_diff(&y, &conv_oracle(&x, &w, stride, pad)) < 1e-12);
    }
}

#[test]
fn conv_transpose_single_pixel_broadcast() {
    let y = forward(|tp| {
        let x = tp.constant(t(&[1, 1, 1, 1], &[5.0]));
        let w = tp.constant(Tensor::ones([1, 1, 2, 2]));
        tp.conv_transpose2d(x, w, None, 2).unwrap()
    });
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 5.0));
}

#[test]
fn conv_transpose_single_tap_scatters() {
    let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
    for tap in 0..4 {
        let mut w = vec![0.0; 4];
        w[tap] = 3.0;
        let y = forward(|tp| {
            let (xv, wv) = (tp.constant(x.clone()), tp.constant(t(&[1, 1, 2, 2], &w)));
            tp.conv_transpose2d(xv, wv, None, 2).unwrap()
        });
        let (ty, tx) = (tap / 2, tap % 2);
        let mut expect = vec![0.0; 16];
        for iy in 0..2 {
            for ix in 0..2 {
                expect[(2 * iy + ty) * 4 + 2 * ix + tx] = 3.0 * x.data()[iy * 2 + ix];
            }
        }
        assert_eq!(y.data(), expect.as_slice(), "tap {tap}");
    }
}

#[test]
fn conv_transpose_is_the_input_gradient_of_strided_conv() {
    // conv2d(z; w, stride 2) maps N×O×2H×2W to N×I×H×W with the same I×O×2×2 weight.
    let x = random(&[2, 3, 4, 5], 11);
    let w = random(&[3, 4, 2, 2], 12);
    let z = random(&[2, 4, 8, 10], 13);
    let up = forward(|tp| {
        let (xv, wv) = (tp.constant(x.clone()), tp.constant(w.clone()));
        tp.conv_transpose2d(xv, wv, None, 2).unwrap()
    });
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone(), true);
    let wv = tape.constant(w.clone());
    let down = tape.conv2d(zv, wv, None, 2, 0).unwrap();
    let xv = tape.constant(x.clone());
    let prod = tape.mul(down, xv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let down_val = tape.value(down).unwrap().clone();
    let grads = tape.backward(loss).unwrap();
    assert!(max_abs_diff(grads.wrt(zv).unwrap(), &up) < 1e-10);
    // <convT(x), z> = <x, conv(z)>
    let lhs = up.dot(&z).unwrap();
    let rhs = x.dot(&down_val).unwrap();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

fn bn(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mode: Mode) -> Tensor<f64> {
    let c = gamma.len();
    forward(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(t(&[c], gamma));
        let b = tp.constant(t(&[c], beta));
        let (rm, rv) = (Tensor::zeros([c]), Tensor::ones([c]));
        tp.batch_norm(xv, g, b, &rm, &rv, mode, 1e-5).unwrap().0
    })
}

fn channel_stats(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
    let (n, c, h, w) = y.dims4().unwrap();
    let vals: Vec<f64> = (0..n)
        .flat_map(|b| y.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].to_vec())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

#[test]
fn batch_norm_fixed_point() {
    // Two samples ±1 in every position: zero mean, unit biased variance.
    let x = Tensor::from_fn([2, 2, 2, 2], |i| if i < 8 { 1.0 } else { -1.0 });
    let y = bn(&x, &[1.0, 1.0], &[0.0, 0.0], Mode::Train);
    assert!(max_abs_diff(&y, &x) < 1e-5);
}

#[test]
fn batch_norm_zero_gamma_gives_beta() {
    let y = bn(&random(&[2, 3, 4, 4], 21), &[0.0; 3], &[0.5, -1.0, 2.0], Mode::Train);
    for ch in 0..3 {
        let (mean, std) = channel_stats(&y, ch);
        assert_eq!(mean, [0.5, -1.0, 2.0][ch]);
        assert_eq!(std, 0.0);
    }
}

#[test]
fn batch_norm_output_statistics() {
    let gamma = [1.5, -0.7, 0.3];
    let beta = [0.2, -0.4, 1.1];
    let y = bn(&random(&[2, 3, 4, 4], 22).map(|v| 3.0 * v + 1.0), &gamma, &beta, Mode::Train);
    for ch in 0..3 {
        let (mean, std) = channel_stats(&y, ch);
        assert!((mean - beta[ch]).abs() < 1e-4);
        assert!((std - gamma[ch].abs()).abs() < 1e-4, "{std}");
    }
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let x = random(&[1, 2, 3, 3], 23);
    let y = forward(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(t(&[2], &[2.0, 1.0]));
        let b = tp.constant(t(&[2], &[0.0, 1.0]));
        let rm = t(&[2], &[0.5, -0.5]);
        let rv = t(&[2], &[4.0, 0.25]);
        tp.batch_norm(xv, g, b, &rm, &rv, Mode::Eval, 0.0).unwrap().0
    });
    for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
        let expect = if i < 9 { 2.0 * (xi - 0.5) / 2.0 } else { (xi + 0.5) / 0.5 + 1.0 };
        assert!((yi - expect).abs() < 1e-12);
    }
}

#[test]
fn relu_and_sigmoid_values() {
    let r = forward(|tp| {
        let x = tp.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        tp.relu(x).unwrap()
    });
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    let s = forward(|tp| {
        let x = tp.constant(t(&[1], &[0.0]));
        tp.sigmoid(x).unwrap()
    });
    assert_eq!(s.data(), &[0.5]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[0.0]), true);
    let s = tape.sigmoid(x).unwrap();
    let loss = tape.sum(s).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!((g.wrt(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    let err = grad_check(
        |tp, v| {
            let s = tp.sigmoid(v[0])?;
            tp.sum(s)
        },
        &[t(&[1], &[0.0])],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn max_pool_small_example() {
    let y = forward(|tp| {
        let x = tp.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        tp.max_pool2d(x, 2, 2, 0).unwrap()
    });
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([1, 1, 4, 4], 2.0), true);
    let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 2.0));
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut expect = vec![0.0; 16];
    for (wy, wx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        expect[wy * 4 + wx] = 1.0;
    }
    assert_eq!(g.wrt(x).unwrap().data(), expect.as_slice());
}

#[test]
fn max_pool_matches_window_scan() {
    let x = random(&[1, 2, 6, 6], 31);
    let y = forward(|tp| {
        let xv = tp.constant(x.clone());
        tp.max_pool2d(xv, 3, 2, 1).unwrap()
    });
    assert_eq!(y.shape(), &[1, 2, 3, 3]);
    for c in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        if (0..6).contains(&iy) && (0..6).contains(&ix) {
                            best = best.max(x.data()[c * 36 + iy as usize * 6 + ix as usize]);
                        }
                    }
                }
                assert_eq!(y.data()[c * 9 + oy * 3 + ox], best);
            }
        }
    }
}

#[test]
fn global_average_of_constant() {
    let y = forward(|tp| {
        let x = tp.constant(Tensor::full([2, 3, 5, 4], 1.75));
        tp.global_avg_pool(x).unwrap()
    });
    assert_eq!(y.shape(), &[2, 3, 1, 1]);
    assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
}

#[test]
fn concat_shapes_and_gradient_split() {
    let mut tape = Tape::new();
    let a = tape.leaf(random(&[1, 2, 4, 4], 41), true);
    let b = tape.leaf(random(&[1, 3, 4, 4], 42), true);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).unwrap().shape(), &[1, 5, 4, 4]);
    let loss = tape.sum(c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.wrt(b).unwrap().data().iter().all(|&v| v == 1.0));
    assert_eq!(g.wrt(b).unwrap().shape(), &[1, 3, 4, 4]);
}

#[test]
fn channel_broadcast_mul_gradient() {
    let x = random(&[2, 3, 4, 4], 51);
    let s = random(&[2, 3, 1, 1], 52);
    let up = random(&[2, 3, 4, 4], 53);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.leaf(s.clone(), true);
    let m = tape.mul(xv, sv).unwrap();
    let uv = tape.constant(up.clone());
    let weighted = tape.mul(m, uv).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let g = tape.backward(loss).unwrap();
    let gs = g.wrt(sv).unwrap();
    for nc in 0..6 {
        let expect: f64 = (0..16).map(|i| up.data()[nc * 16 + i] * x.data()[nc * 16 + i]).sum();
        assert!((gs.data()[nc] - expect).abs() < 1e-12);
    }
    let err = grad_check(
        |tp, v| {
            let m = tp.mul(v[0], v[1])?;
            let u = tp.constant(up.clone());
            let w = tp.mul(m, u)?;
            tp.sum(w)
        },
        &[x, s],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_of_sum_and_relu_sum() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[3, 4], 61), true);
    let loss = tape.sum(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
    let r = tape.relu(x).unwrap();
    let loss = tape.sum(r).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn conv_gradient_check() {
    let err = grad_check(
        |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y2 = tp.mul(y, y)?;
            tp.sum(y2)
        },
        &[random(&[2, 3, 8, 8], 71), random(&[2, 3, 3, 3], 72), random(&[2], 73)],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_norm_train_gradient_check() {
    let weights = random(&[2, 2, 4, 4], 83);
    let err = grad_check(
        |tp, v| {
            let (rm, rv) = (Tensor::zeros([2]), Tensor::ones([2]));
            let (y, _) = tp.batch_norm(v[0], v[1], v[2], &rm, &rv, Mode::Train, 1e-5)?;
            let w = tp.constant(weights.clone());
            let yw = tp.mul(y, w)?;
            tp.sum(yw)
        },
        &[random(&[2, 2, 4, 4], 81), t(&[2], &[1.2, -0.8]), t(&[2], &[0.1, 0.3])],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_oracle(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = random(&[n, c, h, w], seed);
        let wt = random(&[o, c, k, k], seed ^ 0x5a5a);
        let y = forward(|tp| {
            let (xv, wv) = (tp.constant(x.clone()), tp.constant(wt.clone()));
            tp.conv2d(xv, wv, None, stride, pad).unwrap()
        });
        prop_assert!(max_abs_diff(&y, &conv_oracle(&x, &wt, stride, pad)) < 1e-12);
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let len = v.len();
        let once = forward(|tp| { let x = tp.constant(t(&[len], &v)); tp.relu(x).unwrap() });
        let twice = forward(|tp| {
            let x = tp.constant(once.clone());
            tp.relu(x).unwrap()
        });
        prop_assert!(once.bitwise_eq(&twice));
        prop_assert!(once.data().iter().all(|&y| y >= 0.0));
    }

    #[test]
    fn sigmoid_stays_inside_the_unit_interval(v in prop::collection::vec(-800.0f64..800.0, 1..40)) {
        let len = v.len();
        let y = forward(|tp| { let x = tp.constant(t(&[len], &v)); tp.sigmoid(x).unwrap() });
        prop_assert!(y.data().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn add_gradient_is_ones_for_both_inputs(seed in any::<u64>()) {
        let mut tape = Tape::new();
        let a = tape.leaf(random(&[2, 3], seed), true);
        let b = tape.leaf(random(&[2, 3], seed.wrapping_add(1)), true);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 1.0));
        prop_assert!(g.wrt(b).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
