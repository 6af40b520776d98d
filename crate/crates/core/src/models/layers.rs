use niff_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{NiffError, Result};

/// Kaiming-uniform (fan-in, ReLU gain) draw of `n` weights.
pub(crate) fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(NiffError::Contract(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: Tensor::param(
                vec![c_out, c_in, kernel, kernel],
                kaiming_uniform(rng, fan_in, c_out * fan_in),
            )?,
            bias: Tensor::param(vec![c_out], vec![0.0; c_out])?,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.padding)?)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Normalization with fixed statistics and affine parameters.
///
/// Nothing here is a trainable tensor, so no optimizer can touch it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl FrozenNorm {
    /// Statistics standing in for a normalization layer pretrained elsewhere:
    /// they do not describe the base data.
    pub fn pretrained_like(rng: &mut impl Rng, channels: usize) -> Self {
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> {
            let u = Uniform::new(lo, hi).expect("valid range");
            (0..channels).map(|_| u.sample(rng)).collect()
        };
        Self {
            running_mean: draw(-0.1, 0.1),
            running_var: draw(0.5, 1.5),
            scale: draw(0.8, 1.2),
            shift: draw(-0.1, 0.1),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// `y = (x − mean)/sqrt(var + eps)·scale + shift`, as a per-channel affine map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a: Vec<f64> = self
            .scale
            .iter()
            .zip(&self.running_var)
            .map(|(s, v)| s / (v + self.eps).sqrt())
            .collect();
        let b: Vec<f64> = self
            .shift
            .iter()
            .zip(&self.running_mean)
            .zip(&a)
            .map(|((sh, m), a)| sh - m * a)
            .collect();
        let bias = Tensor::new(vec![b.len()], b)?;
        Ok(x.scale_channels(&a)?.add_bias(&bias)?)
    }
}

/// Fully connected output layer whose rows are grouped per class, split
/// into the base block and an optional block appended for novel classes.
///
/// Class `c` owns rows `[c·k, (c+1)·k)` of the concatenated weight, where `k`
/// is `rows_per_class` (1 for the classifier, 4 for the box regressor).
#[derive(Debug, Clone)]
pub struct SplitLinear {
    pub rows_per_class: usize,
    pub base_weight: Tensor,
    pub base_bias: Tensor,
    pub novel: Option<(Tensor, Tensor)>,
}

impl SplitLinear {
    pub fn new(rng: &mut impl Rng, dim: usize, classes: usize, rows_per_class: usize) -> Result<Self> {
        let rows = classes * rows_per_class;
        Ok(Self {
            rows_per_class,
            base_weight: Tensor::param(vec![rows, dim], kaiming_uniform(rng, dim, rows * dim))?,
            base_bias: Tensor::param(vec![rows], vec![0.0; rows])?,
            novel: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.base_weight.shape()[1]
    }

    pub fn base_classes(&self) -> usize {
        self.base_weight.shape()[0] / self.rows_per_class
    }

    pub fn novel_classes(&self) -> usize {
        self.novel
            .as_ref()
            .map_or(0, |(w, _)| w.shape()[0] / self.rows_per_class)
    }

    /// Appends rows for `classes` novel classes with the given initial weights.
    pub fn extend(&mut self, classes: usize, weights: Vec<f64>) -> Result<()> {
        let rows = classes * self.rows_per_class;
        self.novel = Some((
            Tensor::param(vec![rows, self.dim()], weights)?,
            Tensor::param(vec![rows], vec![0.0; rows])?,
        ));
        Ok(())
    }

    fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&w.transpose()?)?.add_bias(b)?)
    }

    /// `x` is `N×d`; output is `N×(rows_per_class·classes)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let base = Self::affine(x, &self.base_weight, &self.base_bias)?;
        match &self.novel {
            None => Ok(base),
            Some((w, b)) => Ok(Tensor::concat_cols(&[base, Self::affine(x, w, b)?])?),
        }
    }

    /// Rows `[c·k, (c+1)·k)` of the base weight block, detached.
    pub fn base_rows(&self, class: usize) -> &[f64] {
        let d = self.dim();
        let k = self.rows_per_class;
        &self.base_weight.data()[class * k * d..(class + 1) * k * d]
    }
}
