use niff_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{kaiming_uniform, Conv2dLayer};
use super::Parameterized;
use crate::error::{NiffError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub trunk_channels: usize,
    /// Number of trunk conv blocks (L).
    pub layers: usize,
    /// Trunk kernel size (K).
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub num_classes: usize,
    /// Negative slope of the trunk activations.
    pub slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            z_dim: 100,
            trunk_channels: 8,
            layers: 5,
            kernel: 3,
            height: 5,
            width: 5,
            out_channels: 32,
            num_classes: 8,
            slope: 0.2,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("z_dim", self.z_dim),
            ("trunk_channels", self.trunk_channels),
            ("height", self.height),
            ("width", self.width),
            ("out_channels", self.out_channels),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(NiffError::Contract(format!("generator {name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(NiffError::Contract(format!("generator kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn linear_out(&self) -> usize {
        self.trunk_channels * self.height * self.width
    }
}

/// Noise → linear → reshape → L conv blocks (shared trunk) → one 1×1 conv
/// head per class.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    spec: GeneratorSpec,
    /// `(trunk·h·w)×z_dim`.
    pub linear_weight: Tensor,
    pub linear_bias: Tensor,
    pub trunk: Vec<Conv2dLayer>,
    pub heads: Vec<Conv2dLayer>,
}

impl GeneratorModel {
    pub fn new(spec: &GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let m = spec.linear_out();
        let linear_weight = Tensor::param(vec![m, spec.z_dim], kaiming_uniform(rng, spec.z_dim, m * spec.z_dim))?;
        let linear_bias = Tensor::param(vec![m], vec![0.0; m])?;
        let trunk = (0..spec.layers)
            .map(|_| Conv2dLayer::new(rng, spec.trunk_channels, spec.trunk_channels, spec.kernel))
            .collect::<Result<_>>()?;
        let heads = (0..spec.num_classes)
            .map(|_| Conv2dLayer::new(rng, spec.trunk_channels, spec.out_channels, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            linear_weight,
            linear_bias,
            trunk,
            heads,
        })
    }

    pub(crate) fn from_parts(
        spec: GeneratorSpec,
        linear_weight: Tensor,
        linear_bias: Tensor,
        trunk: Vec<Conv2dLayer>,
        heads: Vec<Conv2dLayer>,
    ) -> Self {
        Self {
            spec,
            linear_weight,
            linear_bias,
            trunk,
            heads,
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// `f_c = G(c, z)`. A `z_dim` vector gives one `out×h×w` map; an
    /// `n×z_dim` batch gives `n×out×h×w`.
    pub fn forward(&self, class_id: usize, z: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        if class_id >= s.num_classes {
            return Err(NiffError::Contract(format!(
                "class {class_id} has no generator head (classes 0..{})",
                s.num_classes
            )));
        }
        let (batch, single) = match z.shape() {
            [d] if *d == s.z_dim => (z.reshape(vec![1, s.z_dim])?, true),
            [_, d] if *d == s.z_dim => (z.clone(), false),
            other => {
                return Err(NiffError::Dimension(format!(
                    "noise must be [{0}] or [n×{0}], got {other:?}",
                    s.z_dim
                )))
            }
        };
        let n = batch.shape()[0];
        let mut h = batch
            .matmul(&self.linear_weight.transpose()?)?
            .add_bias(&self.linear_bias)?
            .leaky_relu(s.slope)
            .reshape(vec![n, s.trunk_channels, s.height, s.width])?;
        for conv in &self.trunk {
            h = conv.forward(&h)?.leaky_relu(s.slope);
        }
        let out = self.heads[class_id].forward(&h)?;
        if single {
            Ok(out.reshape(vec![s.out_channels, s.height, s.width])?)
        } else {
            Ok(out)
        }
    }

    /// Copy whose parameters carry no gradient tracking.
    pub fn frozen(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            *p = p.detach();
        }
        out
    }
}

/// `n×z_dim` i.i.d. standard-normal noise.
pub fn sample_noise(rng: &mut impl Rng, n: usize, z_dim: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(NiffError::Contract("noise batch must have at least one row".into()));
    }
    let data = (0..n * z_dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(vec![n, z_dim], data)?)
}

impl Parameterized for GeneratorModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("linear.weight".to_string(), &self.linear_weight),
            ("linear.bias".to_string(), &self.linear_bias),
        ];
        for (i, c) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}.weight"), &c.weight));
            out.push((format!("trunk{i}.bias"), &c.bias));
        }
        for (i, c) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.weight"), &c.weight));
            out.push((format!("head{i}.bias"), &c.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.linear_weight, &mut self.linear_bias];
        for c in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            z_dim: 6,
            trunk_channels: 3,
            layers: 2,
            kernel: 3,
            height: 2,
            width: 3,
            out_channels: 4,
            num_classes: 3,
            slope: 0.2,
        }
    }

    #[test]
    fn full_size_dimensions() {
        let spec = GeneratorSpec {
            z_dim: 100,
            trunk_channels: 8,
            layers: 5,
            kernel: 3,
            height: 7,
            width: 7,
            out_channels: 1024,
            num_classes: 2,
            slope: 0.2,
        };
        assert_eq!(spec.linear_out(), 392);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorModel::new(&spec, &mut r).unwrap();
        assert_eq!(g.linear_weight.shape(), &[392, 100]);
        assert_eq!(g.trunk.len(), 5);
        let z = sample_noise(&mut r, 1, 100).unwrap().reshape(vec![100]).unwrap();
        assert_eq!(g.forward(1, &z).unwrap().shape(), &[1024, 7, 7]);
    }

    #[test]
    fn classes_differ_and_forward_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let g = GeneratorModel::new(&small(), &mut r).unwrap();
        let z = sample_noise(&mut r, 2, 6).unwrap();
        let a = g.forward(0, &z).unwrap();
        assert_eq!(a.shape(), &[2, 4, 2, 3]);
        assert_ne!(a.to_vec(), g.forward(1, &z).unwrap().to_vec());
        assert_eq!(a.to_vec(), g.forward(0, &z).unwrap().to_vec());
    }

    #[test]
    fn bad_class_or_noise() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let g = GeneratorModel::new(&small(), &mut r).unwrap();
        assert!(matches!(g.forward(3, &Tensor::zeros(vec![6])), Err(NiffError::Contract(_))));
        assert!(matches!(g.forward(0, &Tensor::zeros(vec![5])), Err(NiffError::Dimension(_))));
    }

    #[test]
    fn noise_is_reproducible_and_standard() {
        let draw = |s| sample_noise(&mut ChaCha8Rng::seed_from_u64(s), 1000, 100).unwrap().to_vec();
        assert_eq!(draw(5), draw(5));
        let x = draw(6);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02, "mean {mean} var {var}");
        assert_eq!(sample_noise(&mut ChaCha8Rng::seed_from_u64(0), 1, 7).unwrap().shape(), &[1, 7]);
        assert!(sample_noise(&mut ChaCha8Rng::seed_from_u64(0), 0, 7).is_err());
    }
}
