//! Operator-level oracles: every tape op against an independent
//! straight-line reimplementation, plus the backward-pass contracts.

use facexfer::autodiff::ops::{self, Activation};
use facexfer::autodiff::{gradcheck, Tape, Tensor};
use facexfer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Direct quadruple-loop convolution, no lowering, no GEMM.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let h2 = (h + 2 * pad - k) / stride + 1;
    let w2 = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * h2 * w2];
    for o in 0..c_out {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data()[c * h * wd + iy as usize * wd + ix as usize]
                                * w.data()[((o * c_in + c) * k + ki) * k + kj];
                        }
                    }
                }
                out[(o * h2 + oy) * w2 + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, h2, w2], out).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![0.0]).unwrap();
    let y = ops::conv2d(&x, &w, &b, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[1.0]);
}

#[test]
fn conv2d_sums_ones() {
    let x = Tensor::full(&[1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let b = Tensor::new(vec![1], vec![0.0]).unwrap();
    let y = ops::conv2d(&x, &w, &b, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert!((y.data()[0] - 9.0).abs() < 1e-15);
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    let mut r = rng(11);
    let x = Tensor::rand_uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let got = ops::conv2d(&x, &w, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let x = Tensor::full(&[2, 4, 4], 0.0);
    let w = Tensor::full(&[3, 1, 3, 3], 0.0);
    let b = Tensor::full(&[3], 0.0);
    match ops::conv2d(&x, &w, &b, 1, 1) {
        Err(Error::Dim(_)) => {}
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv2d_output_dims_follow_contract() {
    let x = Tensor::full(&[1, 96, 96], 0.5);
    let w = Tensor::full(&[1, 1, 3, 3], 0.1);
    let b = Tensor::full(&[1], 0.0);
    let y = ops::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 48, 48]);
    let y = ops::conv2d(&x, &w, &b, 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 96, 96]);
}

// ---------------------------------------------------------------------------
// instance_norm
// ---------------------------------------------------------------------------

#[test]
fn instance_norm_constant_channel_goes_to_zero() {
    let x = Tensor::full(&[1, 4, 4], 3.7);
    let g = Tensor::full(&[1], 1.0);
    let b = Tensor::full(&[1], 0.0);
    let y = ops::instance_norm(&x, &g, &b, 1e-5).unwrap();
    for v in y.data() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn instance_norm_standardized_input_stays_put() {
    // Channel of {-1, +1}: already zero-mean unit-variance, so eps -> 0
    // leaves it unchanged.
    let x = Tensor::new(vec![1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let g = Tensor::full(&[1], 1.0);
    let b = Tensor::full(&[1], 0.0);
    let y = ops::instance_norm(&x, &g, &b, 1e-12).unwrap();
    for (got, want) in y.data().iter().zip(x.data()) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn instance_norm_output_moments() {
    // Wide inputs keep the eps term far below the 1e-6 variance tolerance.
    let mut r = rng(5);
    let x = Tensor::rand_uniform(&[2, 4, 4], -20.0, 20.0, &mut r);
    let g = Tensor::full(&[2], 1.0);
    let b = Tensor::full(&[2], 0.0);
    let y = ops::instance_norm(&x, &g, &b, 1e-5).unwrap();
    for c in 0..2 {
        let plane = &y.data()[c * 16..(c + 1) * 16];
        let mu = plane.iter().sum::<f64>() / 16.0;
        let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-10, "channel {c} mean {mu}");
        assert!((var - 1.0).abs() < 1e-6, "channel {c} variance {var}");
    }
}

// ---------------------------------------------------------------------------
// activations / softmax / pooling / fc
// ---------------------------------------------------------------------------

#[test]
fn leaky_relu_definition() {
    let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = ops::pointwise_activation(Activation::LeakyRelu(0.2), &x).unwrap();
    assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero() {
    let x = Tensor::scalar(0.0);
    let y = ops::pointwise_activation(Activation::Sigmoid, &x).unwrap();
    assert_eq!(y.item(), 0.5);
}

#[test]
fn relu_gradient_masks_negative_side() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-3.0, 5.0]).unwrap());
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn softmax_uniform_and_stability() {
    let x = Tensor::full(&[6], 0.0);
    let y = ops::softmax(&x).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }
    let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
    let y = ops::softmax(&x).unwrap();
    assert!(y.data()[0] > 1.0 - 1e-12 && y.data()[1] < 1e-12);
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_matches_direct_exp_sum() {
    let mut r = rng(3);
    let x = Tensor::rand_uniform(&[6], -3.0, 3.0, &mut r);
    let y = ops::softmax(&x).unwrap();
    let ex: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let s: f64 = ex.iter().sum();
    for (got, want) in y.data().iter().zip(ex.iter().map(|v| v / s)) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn global_avg_pool_means() {
    let x = Tensor::full(&[3, 4, 4], 1.0);
    let y = ops::global_avg_pool(&x).unwrap();
    assert_eq!(y.data(), &[1.0, 1.0, 1.0]);

    let x = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
    let y = ops::global_avg_pool(&x).unwrap();
    assert_eq!(y.data(), &[1.0]);
}

#[test]
fn global_avg_pool_gradcheck() {
    let mut r = rng(17);
    let x = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(
        |tape, x| {
            let p = tape.global_avg_pool(x)?;
            let sq = tape.square(p)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn fully_connected_identity_and_sum() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let zero = Tensor::full(&[3], 0.0);
    let y = ops::fully_connected(&x, &eye, &zero).unwrap();
    assert_eq!(y.data(), x.data());

    let ones = Tensor::full(&[1, 3], 1.0);
    let b = Tensor::full(&[1], 0.0);
    let y = ops::fully_connected(&x, &ones, &b).unwrap();
    assert_eq!(y.data(), &[6.0]);
}

#[test]
fn fully_connected_matches_dot_product_loop() {
    let mut r = rng(23);
    let x = Tensor::rand_uniform(&[7], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[4, 7], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[4], -1.0, 1.0, &mut r);
    let y = ops::fully_connected(&x, &w, &b).unwrap();
    for m in 0..4 {
        let mut acc = b.data()[m];
        for n in 0..7 {
            acc += w.data()[m * 7 + n] * x.data()[n];
        }
        assert!((y.data()[m] - acc).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// upsample2x
// ---------------------------------------------------------------------------

#[test]
fn upsample2x_replicates_blocks() {
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::upsample2x(&x).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4]);
    let want = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(y.data(), &want);

    let z = Tensor::zeros(&[2, 3, 3]);
    let y = ops::upsample2x(&z).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn upsample2x_gradcheck() {
    let mut r = rng(31);
    let x = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(
        |tape, x| {
            let u = tape.upsample2x(x)?;
            let sq = tape.square(u)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// ---------------------------------------------------------------------------
// circular convolution
// ---------------------------------------------------------------------------

fn circ_oracle(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = a.len();
    let mut out = vec![0.0; d];
    for k in 0..d {
        for j in 0..d {
            out[k] += a[j] * b[(k + d - j) % d];
        }
    }
    out
}

#[test]
fn circular_convolve_delta_cases() {
    let b = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d0 = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let y = ops::circular_convolve(&d0, &b).unwrap();
    assert!(y.max_abs_diff(&b) < 1e-12);

    let d1 = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let y = ops::circular_convolve(&d1, &b).unwrap();
    let want = Tensor::new(vec![4], vec![4.0, 1.0, 2.0, 3.0]).unwrap();
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn circular_convolve_matches_direct_sum_for_all_small_lengths() {
    let mut r = rng(41);
    for d in 1..=32usize {
        let a = Tensor::rand_uniform(&[d], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[d], -1.0, 1.0, &mut r);
        let got = ops::circular_convolve(&a, &b).unwrap();
        let want = circ_oracle(a.data(), b.data());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "length {d}");
        }
    }
}

#[test]
fn circular_convolve_gradcheck() {
    let mut r = rng(43);
    let a = Tensor::rand_uniform(&[6], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[6], -1.0, 1.0, &mut r);
    let builder = |tape: &mut Tape, ids: &[facexfer::autodiff::NodeId]| {
        let c = tape.circular_convolve(ids[0], ids[1])?;
        let sq = tape.square(c)?;
        tape.sum(sq)
    };
    let err = facexfer::autodiff::gradcheck_multi(&builder, &[a, b], 1e-5).unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

// ---------------------------------------------------------------------------
// backward contracts
// ---------------------------------------------------------------------------

#[test]
fn fanout_accumulates_both_paths() {
    // loss = sum(x*x) + sum(2x) uses x twice; gradient must be 2x + 2.
    let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let sq = tape.square(xid).unwrap();
    let s1 = tape.sum(sq).unwrap();
    let doubled = tape.scale(xid, 2.0).unwrap();
    let s2 = tape.sum(doubled).unwrap();
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(xid).unwrap();
    for (gi, xi) in g.iter().zip(x.data()) {
        assert!((gi - (2.0 * xi + 2.0)).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 1.0));
    let y = tape.square(x).unwrap();
    match tape.backward(y) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn backward_rejects_second_run() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 1.0));
    let y = tape.square(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    match tape.backward(s) {
        Err(Error::State(_)) => {}
        other => panic!("expected state error, got {other:?}"),
    }
    tape.reset_grads();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 3.0));
    let c = tape.constant(Tensor::full(&[2], 2.0));
    let y = tape.mul_elem(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    assert!(tape.grad(c).is_none());
}

// ---------------------------------------------------------------------------
// composite gradcheck and determinism
// ---------------------------------------------------------------------------

#[test]
fn conv_norm_activation_chain_gradcheck() {
    let mut r = rng(53);
    let x = Tensor::rand_uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::rand_uniform(&[3], -0.1, 0.1, &mut r);
    let gamma = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut r);
    let beta = Tensor::rand_uniform(&[3], -0.2, 0.2, &mut r);
    let builder = |tape: &mut Tape, ids: &[facexfer::autodiff::NodeId]| {
        let c = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
        let n = tape.instance_norm(c, ids[3], ids[4], 1e-5)?;
        let a = tape.leaky_relu(n, 0.2)?;
        tape.sum(a)
    };
    let err =
        facexfer::autodiff::gradcheck_multi(&builder, &[x, w, b, gamma, beta], 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut r = rng(61);
    let x = Tensor::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::rand_uniform(&[4], -0.1, 0.1, &mut r);
    let y1 = ops::conv2d(&x, &w, &b, 2, 1).unwrap();
    let y2 = ops::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(y1.data(), y2.data());
    let s1 = ops::softmax(&Tensor::new(vec![4], y1.data()[..4].to_vec()).unwrap()).unwrap();
    let s2 = ops::softmax(&Tensor::new(vec![4], y2.data()[..4].to_vec()).unwrap()).unwrap();
    assert_eq!(s1.data(), s2.data());
}

#[test]
fn overflow_is_an_error_not_silent() {
    // exp overflow inside square: huge finite inputs squared overflow to inf.
    let x = Tensor::full(&[2], 1e200);
    let mut tape = Tape::new();
    let xid = tape.leaf(x);
    match tape.square(xid) {
        Err(Error::NonFinite(_)) => {}
        other => panic!("expected non-finite error, got {other:?}"),
    }
}
