use niff_tensor::gradcheck::{check_gradients, numeric_gradient};
use niff_tensor::{Result, Sgd, SgdConfig, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let col = t(&[2, 1], &[3.0, 4.0]);
    assert_eq!(eye.matmul(&col).unwrap().data(), &[3.0, 4.0]);
    let row = t(&[1, 2], &[1.0, 2.0]);
    let out = row.matmul(&col).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 3]);
    assert!(matches!(a.matmul(&b), Err(TensorError::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    // Finite-difference oracle, frozen against the closed form ones(3×2)·bᵀ.
    let numeric = numeric_gradient(|xs| xs[0].matmul(&b)?.sum().item(), &[a.clone()], 1e-5).unwrap();
    let mut closed = vec![0.0; 12];
    for i in 0..3 {
        for k in 0..4 {
            closed[i * 4 + k] = b.data()[k * 2] + b.data()[k * 2 + 1];
        }
    }
    assert_close(&numeric[0], &closed, 1e-8);

    let leaf = a.with_requires_grad(true);
    leaf.matmul(&b).unwrap().sum().backward().unwrap();
    assert_close(&leaf.grad().unwrap(), &closed, 1e-12);
}

#[test]
fn conv_scalar_kernel_doubles_input() {
    let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let w = t(&[1, 1, 1, 1], &[2.0]);
    let y = x.conv2d(&w, None, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0]);
}

#[test]
fn conv_all_ones_counts_overlaps() {
    let x = Tensor::ones(vec![1, 1, 3, 3]);
    let w = Tensor::ones(vec![1, 1, 3, 3]);
    let y = x.conv2d(&w, None, 1).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_is_cross_correlation() {
    // An asymmetric kernel picks the right-hand neighbour without flipping.
    let x = t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]);
    let mut k = vec![0.0; 9];
    k[5] = 1.0; // centre row, right column
    let w = t(&[1, 1, 3, 3], &k);
    let y = x.conv2d(&w, None, 1).unwrap();
    assert_eq!(y.data(), &[2.0, 3.0, 0.0]);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let x = Tensor::zeros(vec![1, 2, 3, 3]);
    let w = Tensor::zeros(vec![1, 3, 3, 3]);
    assert!(matches!(x.conv2d(&w, None, 1), Err(TensorError::Dimension(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    let report = check_gradients(
        |xs| {
            let y = xs[0].conv2d(&xs[1], Some(&xs[2]), 1)?;
            // Weighted sum so every output position matters differently.
            let weights: Vec<f64> = (0..y.numel()).map(|i| ((i % 7) as f64 - 3.0) * 0.3).collect();
            y.mul(&Tensor::new(y.shape().to_vec(), weights)?).map(|p| p.sum())
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn softmax_relu_pool_examples() {
    let s = t(&[3], &[0.0, 0.0, 0.0]).softmax().unwrap();
    assert_close(s.data(), &[1.0 / 3.0; 3], 1e-15);
    assert_eq!(t(&[2], &[-1.0, 2.0]).relu().data(), &[0.0, 2.0]);
    let pooled = Tensor::full(vec![2, 3, 4, 4], 1.5).avg_pool2d().unwrap();
    assert_eq!(pooled.shape(), &[2, 3]);
    assert_close(pooled.data(), &[1.5; 6], 1e-15);
}

#[test]
fn softmax_empty_axis_is_dimension_error() {
    let e = Tensor::new(vec![2, 0], vec![]).unwrap();
    assert!(matches!(e.softmax(), Err(TensorError::Dimension(_))));
    assert!(matches!(e.log_softmax(), Err(TensorError::Dimension(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::param(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(x.relu().backward(), Err(TensorError::Contract(_))));
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    x.sum().backward().unwrap();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 5.0, 7.0]);
    x.zero_grad();
    assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
}

#[test]
fn backward_populates_intermediates() {
    let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let h = x.mul_scalar(3.0);
    h.square().sum().backward().unwrap();
    assert_eq!(h.grad().unwrap(), vec![6.0, 12.0]);
    assert_eq!(x.grad().unwrap(), vec![18.0, 36.0]);
}

#[test]
fn mse_gradient_is_two_diff_over_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 2]);
    let y = random(&mut rng, &[3, 2]);
    let mse = |xs: &[Tensor]| -> Result<Tensor> { xs[0].sub(&y)?.square().mean() };
    let numeric = numeric_gradient(|xs| mse(xs)?.item(), &[x.clone()], 1e-5).unwrap();
    let closed: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * (a - b) / 6.0).collect();
    assert_close(&numeric[0], &closed, 1e-9);
    let leaf = x.with_requires_grad(true);
    mse(&[leaf.clone()]).unwrap().backward().unwrap();
    assert_close(&leaf.grad().unwrap(), &closed, 1e-14);
}

fn sgd(lr: f64, momentum: f64, wd: f64) -> Sgd {
    Sgd::new(SgdConfig::new(lr, momentum, wd).unwrap()).unwrap()
}

#[test]
fn sgd_single_plain_step() {
    let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
    p.set_grad(Some(vec![1.0])).unwrap();
    sgd(1.0, 0.0, 0.0).step(&mut [&mut p]).unwrap();
    assert_eq!(p.data(), &[-1.0]);
    assert_eq!(p.grad().unwrap(), vec![1.0], "grads survive the step");
}

#[test]
fn sgd_momentum_second_displacement() {
    let (lr, g) = (0.1, 2.0);
    let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
    p.set_grad(Some(vec![g])).unwrap();
    let mut opt = sgd(lr, 0.9, 0.0);
    opt.step(&mut [&mut p]).unwrap();
    let after_one = p.data()[0];
    opt.step(&mut [&mut p]).unwrap();
    let second = after_one - p.data()[0];
    assert!((second - lr * 1.9 * g).abs() < 1e-15);
}

#[test]
fn sgd_quadratic_bowl_shrinks_monotonically() {
    let mut x = Tensor::param(vec![1], vec![1.0]).unwrap();
    let mut opt = sgd(0.1, 0.0, 0.0);
    let mut prev = 1.0_f64;
    for _ in 0..50 {
        x.zero_grad();
        x.square().sum().backward().unwrap();
        opt.step(&mut [&mut x]).unwrap();
        let now = x.data()[0].abs();
        assert!(now < prev);
        prev = now;
    }
    // x_{t+1} = 0.8 x_t
    assert!((prev - 0.8f64.powi(50)).abs() < 1e-12);
}

#[test]
fn sgd_missing_grad_is_contract_error() {
    let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
    assert!(matches!(sgd(0.1, 0.0, 0.0).step(&mut [&mut p]), Err(TensorError::Contract(_))));
}

#[test]
fn sgd_config_rejects_nonpositive_lr() {
    assert!(SgdConfig::new(0.0, 0.0, 0.0).is_err());
    assert!(SgdConfig::new(0.1, 1.0, 0.0).is_err());
    assert!(SgdConfig::new(0.1, 0.5, -1.0).is_err());
}

#[test]
fn frozen_leaf_gets_no_grad() {
    let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let x = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
    x.mul(&w).unwrap().sum().backward().unwrap();
    assert!(w.grad().is_none());
    assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
}
