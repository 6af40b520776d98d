use niff_tensor::Tensor;

use crate::error::{NiffError, Result};

/// Default variance floor applied to both sides of the KL.
pub const KL_EPS: f64 = 1e-8;

fn check(mu: &[f64], var: &[f64], mu_fake: &[f64], var_fake: &[f64], eps: f64) -> Result<()> {
    let d = mu.len();
    if var.len() != d || mu_fake.len() != d || var_fake.len() != d {
        return Err(NiffError::Dimension(format!(
            "KL inputs have lengths {}, {}, {}, {}",
            d,
            var.len(),
            mu_fake.len(),
            var_fake.len()
        )));
    }
    if d == 0 {
        return Err(NiffError::Dimension("KL over an empty feature vector".into()));
    }
    if !(eps > 0.0) {
        return Err(NiffError::Contract(format!("KL eps must be positive, got {eps}")));
    }
    if let Some(v) = var.iter().chain(var_fake).find(|v| !(**v >= 0.0)) {
        return Err(NiffError::Contract(format!("negative variance {v} in KL")));
    }
    Ok(())
}

/// Mean over dimensions of `KL(N(μ, σ²) ‖ N(μ̃, σ̃²))`: recorded statistics
/// against generated ones. Both variances are floored at `eps`.
pub fn kl_gaussian_diag(mu: &[f64], var: &[f64], mu_fake: &[f64], var_fake: &[f64], eps: f64) -> Result<f64> {
    check(mu, var, mu_fake, var_fake, eps)?;
    let mut total = 0.0;
    for i in 0..mu.len() {
        let v = var[i].max(eps);
        let vf = var_fake[i].max(eps);
        let dm = mu_fake[i] - mu[i];
        total += 0.5 * (vf / v).ln() - 0.5 * (1.0 - (v + dm * dm) / vf);
    }
    Ok(total / mu.len() as f64)
}

/// Differentiable form of [`kl_gaussian_diag`] where the generated mean and
/// variance are `[d]` tensors and the recorded side is constant.
pub fn kl_gaussian_diag_tensor(mu: &[f64], var: &[f64], mu_fake: &Tensor, var_fake: &Tensor, eps: f64) -> Result<Tensor> {
    check(mu, var, mu_fake.data(), var_fake.data(), eps)?;
    let d = mu.len();
    let mu_c = Tensor::new(vec![d], mu.to_vec())?;
    let var_floor: Vec<f64> = var.iter().map(|v| v.max(eps)).collect();
    let ln_var = Tensor::new(vec![d], var_floor.iter().map(|v| v.ln()).collect())?;
    let var_c = Tensor::new(vec![d], var_floor)?;
    let vf = var_fake.clamp_min(eps);
    let log_ratio = vf.ln().sub(&ln_var)?.mul_scalar(0.5);
    let dm2 = mu_fake.sub(&mu_c)?.square();
    let quad = var_c.add(&dm2)?.div(&vf)?.mul_scalar(0.5);
    Ok(log_ratio.add(&quad)?.add_scalar(-0.5).mean()?)
}

/// Batch mean and Bessel-corrected variance of `N×d` rows, each `[d]`.
pub fn batch_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, _] = *x.shape() else {
        return Err(NiffError::Dimension(format!("batch moments need N×d rows, got {:?}", x.shape())));
    };
    if n < 2 {
        return Err(NiffError::InsufficientBatch(n));
    }
    let mean = x.mean_rows()?;
    let centered = x.add_bias(&mean.neg())?;
    let var = centered.square().sum_rows()?.mul_scalar(1.0 / (n - 1) as f64);
    Ok((mean, var))
}
