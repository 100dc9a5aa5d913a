//! Finite-difference checks of every layer's backward pass in f64.

use super::*;
use crate::rng;
use rand_chacha::ChaCha8Rng;

fn randn_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng::normal_f64(rng)).collect())
}

/// Weighted-sum loss turns any output tensor into a scalar.
fn loss_of(y: &Tensor<f64>, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn assert_close(a: f64, b: f64, tag: &str) {
    let denom = a.abs().max(b.abs()).max(1e-6);
    assert!(
        (a - b).abs() / denom < 1e-6,
        "{tag}: analytic {a} vs numeric {b}"
    );
}

/// Central-difference check of dLoss/dx for a forward closure.
fn check_input_grad(
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    forward: &mut dyn FnMut(&Tensor<f64>) -> f64,
    eps: f64,
    tag: &str,
) {
    let mut x = x0.clone();
    for i in 0..x0.numel() {
        x.data_mut()[i] = x0.data()[i] + eps;
        let fp = forward(&x);
        x.data_mut()[i] = x0.data()[i] - eps;
        let fm = forward(&x);
        x.data_mut()[i] = x0.data()[i];
        assert_close(analytic.data()[i], (fp - fm) / (2.0 * eps), &format!("{tag}[{i}]"));
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut r = rng::stream(1, "conv-test");
    let mut conv = Conv3d::<f64>::new(2, 3, 3, 1);
    for v in conv.w.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.3;
    }
    for v in conv.b.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.1;
    }
    let x = randn_tensor(&[2, 2, 4, 4, 4], &mut r);
    let (y, cache) = conv.forward_cached(&x);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();

    let gy = Tensor::from_vec(y.shape(), w.clone());
    conv.gw.fill(0.0);
    conv.gb.fill(0.0);
    let gx = conv.backward(&gy, &cache);

    let mut fwd = |xp: &Tensor<f64>| loss_of(&conv.forward(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-5, "conv gx");

    // weight gradient, spot-checked on every 7th coordinate
    let w0 = conv.w.clone();
    for i in (0..conv.w.numel()).step_by(7) {
        let mut cp = conv.clone();
        cp.w.data_mut()[i] = w0.data()[i] + 1e-5;
        let fp = loss_of(&cp.forward(&x), &w);
        cp.w.data_mut()[i] = w0.data()[i] - 1e-5;
        let fm = loss_of(&cp.forward(&x), &w);
        assert_close(conv.gw.data()[i], (fp - fm) / 2e-5, &format!("conv gw[{i}]"));
    }
    for i in 0..conv.b.numel() {
        let mut cp = conv.clone();
        cp.b.data_mut()[i] += 1e-5;
        let fp = loss_of(&cp.forward(&x), &w);
        cp.b.data_mut()[i] -= 2e-5;
        let fm = loss_of(&cp.forward(&x), &w);
        assert_close(conv.gb.data()[i], (fp - fm) / 2e-5, &format!("conv gb[{i}]"));
    }
}

#[test]
fn conv1x1_gradients_match_finite_differences() {
    let mut r = rng::stream(2, "conv1-test");
    let mut conv = Conv3d::<f64>::new(3, 2, 1, 0);
    for v in conv.w.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.5;
    }
    let x = randn_tensor(&[1, 3, 3, 3, 3], &mut r);
    let (y, cache) = conv.forward_cached(&x);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    let gx = conv.backward(&Tensor::from_vec(y.shape(), w.clone()), &cache);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&conv.forward(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-5, "conv1x1 gx");
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut r = rng::stream(3, "deconv-test");
    let mut deconv = ConvTranspose3d::<f64>::new(3, 2, 2);
    for v in deconv.w.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.4;
    }
    for v in deconv.b.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.1;
    }
    let x = randn_tensor(&[2, 3, 3, 3, 3], &mut r);
    let (y, cache) = deconv.forward_cached(&x);
    assert_eq!(y.shape(), &[2, 2, 6, 6, 6]);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    deconv.gw.fill(0.0);
    let gx = deconv.backward(&Tensor::from_vec(y.shape(), w.clone()), &cache);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&deconv.forward(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-5, "deconv gx");

    let w0 = deconv.w.clone();
    for i in (0..deconv.w.numel()).step_by(5) {
        let mut cp = deconv.clone();
        cp.w.data_mut()[i] = w0.data()[i] + 1e-5;
        let fp = loss_of(&cp.forward(&x), &w);
        cp.w.data_mut()[i] = w0.data()[i] - 1e-5;
        let fm = loss_of(&cp.forward(&x), &w);
        assert_close(deconv.gw.data()[i], (fp - fm) / 2e-5, &format!("deconv gw[{i}]"));
    }
}

#[test]
fn batchnorm_train_gradients_match_finite_differences() {
    let mut r = rng::stream(4, "bn-test");
    let mut bn = BatchNorm3d::<f64>::new(3);
    for v in bn.gamma.data_mut() {
        *v = 0.5 + rng::uniform_f64(&mut r);
    }
    for v in bn.beta.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.2;
    }
    let x = randn_tensor(&[2, 3, 3, 3, 3], &mut r);
    let (y, cache) = bn.forward_train(&x, false);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    bn.ggamma.fill(0.0);
    bn.gbeta.fill(0.0);
    let gx = bn.backward(&Tensor::from_vec(y.shape(), w.clone()), &cache);

    let mut bn2 = bn.clone();
    let mut fwd = |xp: &Tensor<f64>| loss_of(&bn2.forward_train(xp, false).0, &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-5, "bn gx");

    for i in 0..3 {
        let mut cp = bn.clone();
        cp.gamma.data_mut()[i] += 1e-6;
        let fp = loss_of(&cp.forward_train(&x, false).0, &w);
        cp.gamma.data_mut()[i] -= 2e-6;
        let fm = loss_of(&cp.forward_train(&x, false).0, &w);
        assert_close(bn.ggamma.data()[i], (fp - fm) / 2e-6, &format!("bn ggamma[{i}]"));

        let mut cp = bn.clone();
        cp.beta.data_mut()[i] += 1e-6;
        let fp = loss_of(&cp.forward_train(&x, false).0, &w);
        cp.beta.data_mut()[i] -= 2e-6;
        let fm = loss_of(&cp.forward_train(&x, false).0, &w);
        assert_close(bn.gbeta.data()[i], (fp - fm) / 2e-6, &format!("bn gbeta[{i}]"));
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut bn = BatchNorm3d::<f64>::new(1);
    bn.run_mean.data_mut()[0] = 2.0;
    bn.run_var.data_mut()[0] = 4.0;
    let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![2.0, 4.0]);
    let y = bn.forward_eval(&x);
    assert!((y.data()[0] - 0.0).abs() < 1e-6);
    assert!((y.data()[1] - 1.0).abs() < 1e-3); // 2/sqrt(4+eps)
}

#[test]
fn maxpool_halves_even_sides_and_routes_gradients() {
    let mut r = rng::stream(5, "pool-test");
    let pool = MaxPool3d::new();
    // Distinct values separated by 0.01 so no argmax flips under the
    // finite-difference perturbation.
    let n = 2 * 2 * 8 * 8 * 8;
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    rng::shuffle(&mut r, &mut vals);
    let x = Tensor::from_vec(&[2, 2, 8, 8, 8], vals);
    let (y, cache) = pool.forward(&x);
    assert_eq!(y.shape(), &[2, 2, 4, 4, 4]);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    let gx = pool.backward(&Tensor::from_vec(y.shape(), w.clone()), &cache);
    // Piecewise-linear function: a larger step is exact and avoids
    // cancellation noise in fp - fm.
    let mut fwd = |xp: &Tensor<f64>| loss_of(&pool.forward(xp).0, &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-3, "pool gx");
}

#[test]
fn dropout_is_inverted_and_mask_replays() {
    let d = Dropout::new(0.5);
    let x = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 1.0);
    let mut r1 = rng::stream(6, "drop");
    let (y1, cache) = d.forward(&x, &mut r1);
    let mut r2 = rng::stream(6, "drop");
    let (y2, _) = d.forward(&x, &mut r2);
    assert_eq!(y1.data(), y2.data(), "same stream must replay the same mask");
    let kept: Vec<f64> = y1.data().iter().copied().filter(|&v| v != 0.0).collect();
    assert!(kept.iter().all(|&v| (v - 2.0).abs() < 1e-12), "inverted scaling by 1/keep");
    let gy = Tensor::full(&[1, 1, 4, 4, 4], 1.0);
    let gx = d.backward(&gy, &cache);
    for i in 0..gx.numel() {
        let expect = if y1.data()[i] != 0.0 { 2.0 } else { 0.0 };
        assert_eq!(gx.data()[i], expect);
    }
}

#[test]
fn linear_and_gap_gradients() {
    let mut r = rng::stream(7, "lin-test");
    let mut lin = Linear::<f64>::new(6, 2);
    for v in lin.w.data_mut() {
        *v = rng::normal_f64(&mut r) * 0.3;
    }
    let x = randn_tensor(&[3, 6], &mut r);
    let (y, cache) = lin.forward_cached(&x);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    let gx = lin.backward(&Tensor::from_vec(y.shape(), w.clone()), &cache);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&lin.forward(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-6, "linear gx");

    let xg = randn_tensor(&[2, 3, 2, 2, 2], &mut r);
    let yg = global_avg_pool(&xg);
    assert_eq!(yg.shape(), &[2, 3]);
    let wg: Vec<f64> = (0..yg.numel()).map(|_| rng::normal_f64(&mut r)).collect();
    let gxg = global_avg_pool_backward(&Tensor::from_vec(yg.shape(), wg.clone()), xg.shape());
    let mut fwd = |xp: &Tensor<f64>| loss_of(&global_avg_pool(xp), &wg);
    check_input_grad(&xg, &gxg, &mut fwd, 1e-6, "gap gx");
}

#[test]
fn activation_gradients() {
    let mut r = rng::stream(8, "act-test");
    let x = randn_tensor(&[1, 2, 2, 2, 2], &mut r);
    let w: Vec<f64> = (0..x.numel()).map(|_| rng::normal_f64(&mut r)).collect();

    let y = sigmoid(&x);
    let gx = sigmoid_backward(&Tensor::from_vec(y.shape(), w.clone()), &y);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&sigmoid(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-6, "sigmoid gx");

    let y = relu(&x);
    let gx = relu_backward(&Tensor::from_vec(y.shape(), w.clone()), &y);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&relu(xp), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-6, "relu gx");

    let slope = 0.2;
    let y = leaky_relu(&x, slope);
    let gx = leaky_relu_backward(&Tensor::from_vec(y.shape(), w.clone()), &y, slope);
    let mut fwd = |xp: &Tensor<f64>| loss_of(&leaky_relu(xp, slope), &w);
    check_input_grad(&x, &gx, &mut fwd, 1e-6, "leaky gx");
}

#[test]
fn adam_matches_reference_update() {
    // Single scalar parameter, two steps, compared against hand-computed
    // Adam with bias correction.
    let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]);
    let mut opt = Adam::new(0.1, &[vec![1]]);
    let g1 = Tensor::from_vec(&[1], vec![0.5]);
    opt.step(&mut [&mut p], &[&g1]);
    // m=0.05, v=0.00025; mhat=0.5, vhat=0.25 -> step = 0.1*0.5/(0.5+1e-8)
    assert!((p.data()[0] - (1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8))).abs() < 1e-12);
    let g2 = Tensor::from_vec(&[1], vec![-0.25]);
    let before = p.data()[0];
    opt.step(&mut [&mut p], &[&g2]);
    let m = 0.9 * 0.05 + 0.1 * (-0.25);
    let v = 0.999 * 0.00025 + 0.001 * 0.0625;
    let mhat = m / (1.0 - 0.9f64.powi(2));
    let vhat = v / (1.0 - 0.999f64.powi(2));
    assert!((p.data()[0] - (before - 0.1 * mhat / (vhat.sqrt() + 1e-8))).abs() < 1e-12);
}

#[test]
fn channel_cat_and_split_roundtrip() {
    let mut r = rng::stream(9, "cat-test");
    let a = randn_tensor(&[2, 3, 2, 2, 2], &mut r);
    let b = randn_tensor(&[2, 2, 2, 2, 2], &mut r);
    let c = Tensor::cat_channels(&a, &b);
    assert_eq!(c.shape(), &[2, 5, 2, 2, 2]);
    let (a2, b2) = c.split_channels(3);
    assert_eq!(a.data(), a2.data());
    assert_eq!(b.data(), b2.data());
}
