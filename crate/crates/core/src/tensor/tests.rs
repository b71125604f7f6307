use super::*;
use crate::rng::SplitMix64;
use approx::assert_relative_eq;

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

fn rand_vec32(rng: &mut SplitMix64, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64() as f32).collect()
}

/// Direct convolution by four nested loops; the oracle for conv2d.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &[f32],
    ishape: [usize; 4],
    kernels: &[f32],
    kshape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let [b, c, h, w] = ishape;
    let [f, _, kh, kw] = kshape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input
                                    [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernels[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn leaf_validates_shape() {
    let mut tape: Tape<f32> = Tape::new();
    assert!(tape.leaf(&[2, 2], vec![1.0; 3], false).is_err());
    assert!(tape.leaf(&[2, 0], vec![], false).is_err());
    let id = tape.leaf(&[2, 2], vec![1.0; 4], true).unwrap();
    assert_eq!(tape.shape(id), &[2, 2]);
    assert!(tape.tensor(id).requires_grad());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn strict_mode_rejects_non_finite() {
    let mut tape: Tape<f32> = Tape::strict();
    assert!(tape.leaf(&[1], vec![f32::NAN], false).is_err());
    let mut lax: Tape<f32> = Tape::new();
    assert!(lax.leaf(&[1], vec![f32::NAN], false).is_ok());

    // An op that produces infinity trips the strict check.
    let mut t: Tape<f32> = Tape::strict();
    let x = t.leaf(&[1, 1, 1, 1], vec![f32::MAX], false).unwrap();
    let k = t.leaf(&[1, 1, 1, 1], vec![f32::MAX], false).unwrap();
    assert!(t.conv2d(x, k, 1, 0).is_err());
}

#[test]
fn conv2d_scalar_product() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 1, 1], vec![2.0], false).unwrap();
    let k = tape.leaf(&[1, 1, 1, 1], vec![3.0], false).unwrap();
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.data(y), &[6.0]);
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = SplitMix64::new(11);
    let data = rand_vec32(&mut rng, 16, -2.0, 2.0);
    let mut delta = vec![0.0f32; 9];
    delta[4] = 1.0;
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 4, 4], data.clone(), false).unwrap();
    let k = tape.leaf(&[1, 1, 3, 3], delta, false).unwrap();
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.data(y), data.as_slice());
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = SplitMix64::new(22);
    let input = rand_vec32(&mut rng, 25, -1.0, 1.0);
    let kernels = rand_vec32(&mut rng, 9, -1.0, 1.0);
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 5, 5], input.clone(), false).unwrap();
    let k = tape.leaf(&[1, 1, 3, 3], kernels.clone(), false).unwrap();
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    let want = conv_oracle(&input, [1, 1, 5, 5], &kernels, [1, 1, 3, 3], 1, 0);
    for (a, b) in tape.data(y).iter().zip(want.iter()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn conv2d_random_shapes_match_oracle() {
    let mut rng = SplitMix64::new(33);
    for _ in 0..25 {
        let b = 1 + rng.next_below(2) as usize;
        let c = 1 + rng.next_below(3) as usize;
        let f = 1 + rng.next_below(3) as usize;
        let h = 3 + rng.next_below(6) as usize;
        let w = 3 + rng.next_below(6) as usize;
        let k = 1 + rng.next_below(3.min(h.min(w) as u64)) as usize;
        let stride = 1 + rng.next_below(2) as usize;
        let pad = rng.next_below(2) as usize;
        let input = rand_vec32(&mut rng, b * c * h * w, -1.0, 1.0);
        let kernels = rand_vec32(&mut rng, f * c * k * k, -1.0, 1.0);
        let mut tape: Tape<f32> = Tape::new();
        let xi = tape.leaf(&[b, c, h, w], input.clone(), false).unwrap();
        let ki = tape.leaf(&[f, c, k, k], kernels.clone(), false).unwrap();
        let y = tape.conv2d(xi, ki, stride, pad).unwrap();
        let want = conv_oracle(&input, [b, c, h, w], &kernels, [f, c, k, k], stride, pad);
        for (a, bb) in tape.data(y).iter().zip(want.iter()) {
            assert!((a - bb).abs() <= 1e-5, "{a} vs {bb}");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 2, 4, 4], vec![0.0; 32], false).unwrap();
    let k = tape.leaf(&[1, 3, 3, 3], vec![0.0; 27], false).unwrap();
    let err = tape.conv2d(x, k, 1, 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('2') && msg.contains('3'), "message should carry dims: {msg}");
}

#[test]
fn maxpool_two_by_two() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.data(y), &[4.0]);
}

#[test]
fn maxpool_constant_input() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 4, 4], vec![7.5; 16], false).unwrap();
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 7.5));
}

#[test]
fn maxpool_matches_sliding_window_oracle() {
    let mut rng = SplitMix64::new(44);
    let input = rand_vec32(&mut rng, 36, -3.0, 3.0);
    let (window, stride) = (3, 1);
    let oh = (6 - window) / stride + 1;
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 6, 6], input.clone(), false).unwrap();
    let y = tape.maxpool2d(x, window, stride).unwrap();
    for oy in 0..oh {
        for ox in 0..oh {
            let mut best = f32::NEG_INFINITY;
            for ky in 0..window {
                for kx in 0..window {
                    best = best.max(input[(oy * stride + ky) * 6 + ox * stride + kx]);
                }
            }
            assert_eq!(tape.data(y)[oy * oh + ox], best);
        }
    }
}

#[test]
fn maxpool_rejects_oversized_window() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 2, 2], vec![0.0; 4], false).unwrap();
    assert!(tape.maxpool2d(x, 3, 1).is_err());
}

#[test]
fn maxpool_tie_routes_gradient_to_first() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 2, 2], vec![1.0; 4], true).unwrap();
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = SplitMix64::new(55);
    let (b, c, h, w) = (4, 3, 5, 5);
    let input = rand_vec32(&mut rng, b * c * h * w, 10.0, 30.0);
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[b, c, h, w], input, false).unwrap();
    let g = tape.leaf(&[c], vec![1.0; c], false).unwrap();
    let be = tape.leaf(&[c], vec![0.0; c], false).unwrap();
    let mut stats = BnStats::new(c);
    let y = tape.batchnorm(x, g, be, &mut stats, BnMode::Train, 0.1, 1e-5).unwrap();
    let out = tape.data(y);
    let m = (b * h * w) as f64;
    for ch in 0..c {
        let mut mean = 0.0f64;
        let mut var = 0.0f64;
        for bi in 0..b {
            for i in 0..h * w {
                mean += out[((bi * c + ch) * h * w) + i] as f64;
            }
        }
        mean /= m;
        for bi in 0..b {
            for i in 0..h * w {
                let d = out[((bi * c + ch) * h * w) + i] as f64 - mean;
                var += d * d;
            }
        }
        var /= m;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
    }
    // Running stats moved toward the batch statistics.
    assert!(stats.mean.iter().all(|&v| v > 0.0));
}

#[test]
fn batchnorm_infer_is_exact_affine() {
    let (b, c, h, w) = (1, 2, 2, 2);
    let input: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let mut stats = BnStats::new(c);
    stats.mean = vec![1.5, -0.5];
    stats.var = vec![4.0, 0.25];
    let gamma = [2.0f32, 0.5];
    let beta = [1.0f32, -1.0];
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[b, c, h, w], input.clone(), false).unwrap();
    let g = tape.leaf(&[c], gamma.to_vec(), false).unwrap();
    let be = tape.leaf(&[c], beta.to_vec(), false).unwrap();
    let y = tape.batchnorm(x, g, be, &mut stats, BnMode::Infer, 0.1, 1e-5).unwrap();
    let eps = 1e-5f32;
    for ch in 0..c {
        for i in 0..h * w {
            let xi = input[ch * h * w + i];
            let want = gamma[ch] * (xi - stats.mean[ch]) / (stats.var[ch] + eps).sqrt()
                + beta[ch];
            let got = tape.data(y)[ch * h * w + i];
            assert_relative_eq!(got, want, max_relative = 1e-6);
        }
    }
}

#[test]
fn batchnorm_zero_variance_channel_stays_finite() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[1, 1, 2, 2], vec![5.0; 4], true).unwrap();
    let g = tape.leaf(&[1], vec![1.0], false).unwrap();
    let be = tape.leaf(&[1], vec![0.0], false).unwrap();
    let mut stats = BnStats::new(1);
    let y = tape.batchnorm(x, g, be, &mut stats, BnMode::Train, 0.1, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|v| v.is_finite()));
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(66);
    let (b, c, h, w) = (2, 2, 3, 3);
    let point = rand_vec(&mut rng, b * c * h * w, -1.0, 1.0);
    let weights = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let f = move |tape: &mut Tape<f64>, x: TensorId| {
        let g = tape.leaf(&[c], vec![1.2, 0.7], false)?;
        let be = tape.leaf(&[c], vec![0.1, -0.3], false)?;
        let mut stats = BnStats::new(c);
        let y = tape.batchnorm(x, g, be, &mut stats, BnMode::Train, 0.1, 1e-5)?;
        let flat = tape.flatten(y)?;
        let wid = tape.leaf(&[c * h * w, 1], weights.clone(), false)?;
        let bid = tape.leaf(&[1], vec![0.0], false)?;
        let z = tape.dense(flat, wid, bid)?;
        tape.sum(z)
    };
    let err = finite_diff_check(f, &[b, c, h, w], &point, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn dense_identity_and_bias() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
    let eye = tape
        .leaf(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let zero = tape.leaf(&[3], vec![0.0; 3], false).unwrap();
    let y = tape.dense(x, eye, zero).unwrap();
    assert_eq!(tape.data(y), tape.data(x));

    let zeros = tape.leaf(&[3, 2], vec![0.0; 6], false).unwrap();
    let bias = tape.leaf(&[2], vec![0.5, -1.5], false).unwrap();
    let z = tape.dense(x, zeros, bias).unwrap();
    assert_eq!(tape.data(z), &[0.5, -1.5, 0.5, -1.5]);
}

#[test]
fn dense_matches_matmul_oracle() {
    let mut rng = SplitMix64::new(77);
    let a = rand_vec32(&mut rng, 6, -1.0, 1.0);
    let w = rand_vec32(&mut rng, 6, -1.0, 1.0);
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[2, 3], a.clone(), false).unwrap();
    let wid = tape.leaf(&[3, 2], w.clone(), false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    let y = tape.dense(x, wid, b).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut want = 0.0f32;
            for p in 0..3 {
                want += a[i * 3 + p] * w[p * 2 + j];
            }
            assert!((tape.data(y)[i * 2 + j] - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn dense_rejects_dimension_mismatch() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    let w = tape.leaf(&[4, 2], vec![0.0; 8], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    assert!(tape.dense(x, w, b).is_err());
}

#[test]
fn relu_basics() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

    let p = tape.leaf(&[3], vec![0.5, 1.0, 9.0], false).unwrap();
    let q = tape.relu(p).unwrap();
    assert_eq!(tape.data(q), tape.data(p));
}

#[test]
fn relu_gradient_away_from_zero() {
    let point = vec![0.7f64, -1.3, 2.2, -0.4];
    let f = |tape: &mut Tape<f64>, x: TensorId| {
        let y = tape.relu(x)?;
        tape.sum(y)
    };
    let err = finite_diff_check(f, &[4], &point, 1e-6).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape: Tape<f32> = Tape::new();
    let logits = tape.leaf(&[1, 2], vec![0.3, 0.3], false).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
    assert_relative_eq!(tape.scalar(loss), std::f32::consts::LN_2, max_relative = 1e-6);
}

#[test]
fn cross_entropy_saturates_to_zero() {
    let mut tape: Tape<f32> = Tape::new();
    let logits = tape.leaf(&[1, 2], vec![20.0, 0.0], false).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!(tape.scalar(loss) < 1e-8);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape: Tape<f32> = Tape::new();
    let raw = vec![0.2f32, -0.7, 1.1, 0.4, 0.0, -0.3];
    let logits = tape.leaf(&[2, 3], raw.clone(), true).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[2, 0]).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(logits).unwrap();
    for bi in 0..2 {
        let row = &raw[bi * 3..(bi + 1) * 3];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - mx).exp()).collect();
        let denom: f32 = exps.iter().sum();
        let label = [2usize, 0][bi];
        for j in 0..3 {
            let p = exps[j] / denom;
            let onehot = if j == label { 1.0 } else { 0.0 };
            let want = (p - onehot) / 2.0;
            assert_relative_eq!(grad[bi * 3 + j], want, max_relative = 1e-5, epsilon = 1e-7);
        }
    }
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape: Tape<f32> = Tape::new();
    let logits = tape.leaf(&[1, 2], vec![0.0, 0.0], false).unwrap();
    assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[2, 3], vec![0.1; 6], true).unwrap();
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_skips_untracked_leaves() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&[2, 2], vec![1.0; 4], true).unwrap();
    let w = tape.leaf(&[2, 2], vec![0.5; 4], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    let y = tape.dense(x, w, b).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_some());
    assert!(tape.grad(w).is_none());
    assert!(tape.grad(b).is_none());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = SplitMix64::new(88);
    let build = |rng: &mut SplitMix64| {
        let input = rand_vec32(rng, 2 * 8, -1.0, 1.0);
        let w1 = rand_vec32(rng, 8 * 4, -0.5, 0.5);
        let w2 = rand_vec32(rng, 4 * 2, -0.5, 0.5);
        (input, w1, w2)
    };
    let (input, w1, w2) = build(&mut rng);
    let run = |input: &[f32], w1: &[f32], w2: &[f32]| -> (Vec<u32>, Vec<u32>) {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&[2, 8], input.to_vec(), true).unwrap();
        let w1 = tape.leaf(&[8, 4], w1.to_vec(), true).unwrap();
        let b1 = tape.leaf(&[4], vec![0.0; 4], true).unwrap();
        let w2 = tape.leaf(&[4, 2], w2.to_vec(), true).unwrap();
        let b2 = tape.leaf(&[2], vec![0.0; 2], true).unwrap();
        let h = tape.dense(x, w1, b1).unwrap();
        let h = tape.relu(h).unwrap();
        let out = tape.dense(h, w2, b2).unwrap();
        let loss = tape.softmax_cross_entropy(out, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let gx: Vec<u32> = tape.grad(x).unwrap().iter().map(|v| v.to_bits()).collect();
        let gw: Vec<u32> = tape.grad(w1).unwrap().iter().map(|v| v.to_bits()).collect();
        // Running backward twice on the same tape must not change anything.
        tape.backward(loss).unwrap();
        let gx2: Vec<u32> = tape.grad(x).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(gx, gx2);
        (gx, gw)
    };
    let a = run(&input, &w1, &w2);
    let b = run(&input, &w1, &w2);
    assert_eq!(a, b);
}

#[test]
fn stacked_dense_relu_matches_finite_differences_on_parameters() {
    let mut rng = SplitMix64::new(99);
    let input = rand_vec(&mut rng, 2 * 6, -1.0, 1.0);
    let w1 = rand_vec(&mut rng, 6 * 5, -0.6, 0.6);
    let b1 = rand_vec(&mut rng, 5, -0.2, 0.2);
    let w2 = rand_vec(&mut rng, 5 * 2, -0.6, 0.6);
    let b2 = rand_vec(&mut rng, 2, -0.2, 0.2);

    // One closure per checked parameter; everything else is a constant.
    macro_rules! check_param {
        ($shape:expr, $point:expr, $build:expr) => {{
            let err = finite_diff_check($build, $shape, $point, 1e-6).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }};
    }

    let (i2, w12, b12, w22, b22) = (input.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone());
    check_param!(&[6, 5], &w1, move |tape: &mut Tape<f64>, wid: TensorId| {
        let x = tape.leaf(&[2, 6], i2.clone(), false)?;
        let b1 = tape.leaf(&[5], b12.clone(), false)?;
        let w2 = tape.leaf(&[5, 2], w22.clone(), false)?;
        let b2 = tape.leaf(&[2], b22.clone(), false)?;
        let h = tape.dense(x, wid, b1)?;
        let h = tape.relu(h)?;
        let out = tape.dense(h, w2, b2)?;
        tape.softmax_cross_entropy(out, &[0, 1])
    });
    let _keep = w12;

    let (i3, w13, b13, w23, b23) = (input.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone());
    check_param!(&[5], &b1, move |tape: &mut Tape<f64>, bid: TensorId| {
        let x = tape.leaf(&[2, 6], i3.clone(), false)?;
        let w1 = tape.leaf(&[6, 5], w13.clone(), false)?;
        let w2 = tape.leaf(&[5, 2], w23.clone(), false)?;
        let b2 = tape.leaf(&[2], b23.clone(), false)?;
        let h = tape.dense(x, w1, bid)?;
        let h = tape.relu(h)?;
        let out = tape.dense(h, w2, b2)?;
        tape.softmax_cross_entropy(out, &[0, 1])
    });
    let _keep = b13;

    let (i4, w14, b14, w24, b24) = (input.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone());
    check_param!(&[5, 2], &w2, move |tape: &mut Tape<f64>, wid: TensorId| {
        let x = tape.leaf(&[2, 6], i4.clone(), false)?;
        let w1 = tape.leaf(&[6, 5], w14.clone(), false)?;
        let b1 = tape.leaf(&[5], b14.clone(), false)?;
        let b2 = tape.leaf(&[2], b24.clone(), false)?;
        let h = tape.dense(x, w1, b1)?;
        let h = tape.relu(h)?;
        let out = tape.dense(h, wid, b2)?;
        tape.softmax_cross_entropy(out, &[0, 1])
    });
    let _keep = w24;

    check_param!(&[2], &b2, move |tape: &mut Tape<f64>, bid: TensorId| {
        let x = tape.leaf(&[2, 6], input.clone(), false)?;
        let w1 = tape.leaf(&[6, 5], w1.clone(), false)?;
        let b1 = tape.leaf(&[5], b1.clone(), false)?;
        let w2 = tape.leaf(&[5, 2], w2.clone(), false)?;
        let h = tape.dense(x, w1, b1)?;
        let h = tape.relu(h)?;
        let out = tape.dense(h, w2, bid)?;
        tape.softmax_cross_entropy(out, &[0, 1])
    });
}

#[test]
fn finite_diff_check_linear_is_exact() {
    let point = vec![0.4f64, -1.2, 3.3];
    let f = |tape: &mut Tape<f64>, x: TensorId| tape.sum(x);
    let err = finite_diff_check(f, &[3], &point, 1e-5).unwrap();
    assert!(err < 1e-10, "linear fn should be near machine epsilon, got {err}");
}

#[test]
fn finite_diff_check_quadratic_closed_form() {
    // f(x) = sum(x_i^2) at the all-ones point: analytic gradient 2*ones.
    let point = vec![1.0f64; 4];
    let f = |tape: &mut Tape<f64>, x: TensorId| {
        let sq = tape.square(x)?;
        tape.sum(sq)
    };
    let err = finite_diff_check(f, &[4], &point, 1e-6).unwrap();
    assert!(err < 1e-6, "quadratic check error {err}");

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[4], point, true).unwrap();
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(x).unwrap() {
        assert_relative_eq!(g, 2.0, max_relative = 1e-12);
    }
}

#[test]
fn finite_diff_check_full_small_cnn() {
    let mut rng = SplitMix64::new(123);
    let (b, c, h, w) = (2, 1, 8, 8);
    let point = rand_vec(&mut rng, b * c * h * w, 0.0, 1.0);
    let kernels = rand_vec(&mut rng, 2 * 1 * 3 * 3, -0.5, 0.5);
    let wfc = rand_vec(&mut rng, 2 * 3 * 3 * 2, -0.4, 0.4);
    let f = move |tape: &mut Tape<f64>, x: TensorId| {
        let k = tape.leaf(&[2, 1, 3, 3], kernels.clone(), false)?;
        let conv = tape.conv2d(x, k, 1, 0)?; // [b,2,6,6]
        let g = tape.leaf(&[2], vec![1.1, 0.9], false)?;
        let be = tape.leaf(&[2], vec![0.05, -0.05], false)?;
        let mut stats = BnStats::new(2);
        let bn = tape.batchnorm(conv, g, be, &mut stats, BnMode::Train, 0.1, 1e-5)?;
        let act = tape.relu(bn)?;
        let pool = tape.maxpool2d(act, 2, 2)?; // [b,2,3,3]
        let flat = tape.flatten(pool)?; // [b,18]
        let wid = tape.leaf(&[18, 2], wfc.clone(), false)?;
        let bid = tape.leaf(&[2], vec![0.0, 0.0], false)?;
        let logits = tape.dense(flat, wid, bid)?;
        tape.softmax_cross_entropy(logits, &[0, 1])
    };
    let err = finite_diff_check(f, &[b, c, h, w], &point, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Adding a per-row constant to the logits leaves the loss unchanged.
        #[test]
        fn cross_entropy_shift_invariance(
            raw in proptest::collection::vec(-10.0f32..10.0, 6),
            shifts in proptest::collection::vec(-20.0f32..20.0, 2),
        ) {
            let mut tape: Tape<f32> = Tape::new();
            let logits = tape.leaf(&[2, 3], raw.clone(), false).unwrap();
            let base = tape.softmax_cross_entropy(logits, &[1, 2]).unwrap();
            let shifted: Vec<f32> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| v + shifts[i / 3])
                .collect();
            let logits2 = tape.leaf(&[2, 3], shifted, false).unwrap();
            let moved = tape.softmax_cross_entropy(logits2, &[1, 2]).unwrap();
            let (a, b) = (tape.scalar(base), tape.scalar(moved));
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }

        /// Relu never produces negatives and is idempotent.
        #[test]
        fn relu_range_and_idempotence(raw in proptest::collection::vec(-5.0f32..5.0, 12)) {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&[12], raw, false).unwrap();
            let y = tape.relu(x).unwrap();
            prop_assert!(tape.data(y).iter().all(|&v| v >= 0.0));
            let z = tape.relu(y).unwrap();
            prop_assert_eq!(tape.data(y), tape.data(z));
        }
    }
}
