//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so these checks are independent
//! of the reverse-mode code they validate.

use crate::error::Result;
use crate::tensor::Tensor;

/// Numerical gradient of a scalar function with respect to every element of
/// every input, by central differences.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[j] += delta;
                let mut probe = inputs.to_vec();
                probe[which] = Tensor::new(input.shape().to_vec(), data)?;
                f(&probe)
            };
            *slot = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Analytic gradients through [`Tensor::backward`] on fresh leaf copies.
pub fn analytic_gradient<F>(f: F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().with_requires_grad(true)).collect();
    f(&leaves)?.backward()?;
    Ok(leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Compares analytic and numerical gradients of `f` at `inputs`.
///
/// Relative error uses a floor of `1e-3` on the magnitude so that
/// near-zero gradients are compared on an absolute scale.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(|xs| f(xs)?.item(), inputs, step)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&a, &n)) in a.iter().zip(n).enumerate() {
            let err = relative_error(a, n, 1e-3);
            report.checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
