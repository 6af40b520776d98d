use niff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{config_err, NiffError, Result};

/// Parameters of the synthetic instance-feature task.
///
/// Each class is a mixture of Gaussian components over `C×H×W` maps. A
/// component mean is a class-level per-channel level broadcast over space,
/// plus a component offset and a small spatial pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_base: usize,
    pub num_novel: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub components: usize,
    /// Std of the per-channel class levels.
    pub class_scale: f64,
    /// Std of per-channel component offsets around the class level.
    pub component_scale: f64,
    /// Std of the fixed spatial pattern of each component.
    pub spatial_scale: f64,
    /// Per-element instance noise std (each component scales it by U(0.8, 1.2)).
    pub noise_scale: f64,
    pub reg_noise: f64,
    /// Novel-class shots K.
    pub shots: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_base: 8,
            num_novel: 3,
            channels: 32,
            height: 5,
            width: 5,
            components: 2,
            class_scale: 0.15,
            component_scale: 0.15,
            spatial_scale: 0.15,
            noise_scale: 1.0,
            reg_noise: 0.05,
            shots: 10,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("task.num_base", self.num_base),
            ("task.num_novel", self.num_novel),
            ("task.channels", self.channels),
            ("task.height", self.height),
            ("task.width", self.width),
            ("task.components", self.components),
            ("task.shots", self.shots),
        ] {
            if v == 0 {
                return config_err(field, "must be at least 1");
            }
        }
        for (field, v) in [
            ("task.class_scale", self.class_scale),
            ("task.component_scale", self.component_scale),
            ("task.spatial_scale", self.spatial_scale),
            ("task.noise_scale", self.noise_scale),
            ("task.reg_noise", self.reg_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(field, format!("must be a finite nonnegative number, got {v}"));
            }
        }
        if !(self.class_scale > 0.0) {
            return config_err("task.class_scale", "must be positive so classes differ");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn instance_size(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Which labelled split to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Base,
    Novel,
}

/// Independent sample streams of one task; the same stream always yields
/// the same data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataStream {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    /// Component means, each `C·H·W` long.
    pub means: Vec<Vec<f64>>,
    /// Per-component noise std.
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
    /// `4×C` map from the pooled component mean to the regression target.
    pub reg_map: Vec<f64>,
    pub reg_bias: [f64; 4],
}

impl ClassMixture {
    /// Mixture mean map.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.means[0].len()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

/// Materialized class mixtures for a [`SyntheticTaskSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// Base classes first, then novel classes; index = label.
    pub classes: Vec<ClassMixture>,
}

fn pooled(map: &[f64], channels: usize) -> Vec<f64> {
    let hw = map.len() / channels;
    map.chunks_exact(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (c, hw) = (spec.channels, spec.height * spec.width);
        let normal = |s: f64| Normal::new(0.0, s).expect("validated std");
        let jitter = Uniform::new(0.8, 1.2).expect("valid range");
        let mut classes = Vec::with_capacity(spec.num_classes());
        for _ in 0..spec.num_classes() {
            let level: Vec<f64> = (0..c).map(|_| normal(spec.class_scale).sample(&mut rng)).collect();
            let mut means = Vec::with_capacity(spec.components);
            let mut scales = Vec::with_capacity(spec.components);
            let mut weights = Vec::with_capacity(spec.components);
            for _ in 0..spec.components {
                let mut m = Vec::with_capacity(c * hw);
                for &l in &level {
                    let offset = normal(spec.component_scale).sample(&mut rng);
                    for _ in 0..hw {
                        m.push(l + offset + normal(spec.spatial_scale).sample(&mut rng));
                    }
                }
                means.push(m);
                scales.push(spec.noise_scale * jitter.sample(&mut rng));
                weights.push(rng.random_range(0.5..1.5));
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let reg_scale = 1.0 / (c as f64).sqrt();
            let reg_map = (0..4 * c).map(|_| normal(reg_scale).sample(&mut rng)).collect();
            let reg_bias = std::array::from_fn(|_| normal(0.5).sample(&mut rng));
            classes.push(ClassMixture {
                means,
                scales,
                weights,
                reg_map,
                reg_bias,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            classes,
        })
    }

    /// Label range of a split: base `0..|C_b|`, novel `|C_b|..|C_b|+|C_n|`.
    pub fn labels(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Base => 0..self.spec.num_base,
            Split::Novel => self.spec.num_base..self.spec.num_classes(),
        }
    }

    fn stream_rng(&self, split: Split, stream: DataStream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let id = match (split, stream) {
            (Split::Base, DataStream::Train) => 1,
            (Split::Base, DataStream::Test) => 2,
            (Split::Novel, DataStream::Train) => 3,
            (Split::Novel, DataStream::Test) => 4,
        };
        rng.set_stream(id);
        rng
    }

    fn draw(&self, label: usize, rng: &mut impl Rng, feats: &mut Vec<f64>, targets: &mut Vec<f64>) {
        let class = &self.classes[label];
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = class.weights[0];
        while u >= acc && k + 1 < class.weights.len() {
            k += 1;
            acc += class.weights[k];
        }
        let (mean, scale) = (&class.means[k], class.scales[k]);
        for &m in mean {
            let e: f64 = StandardNormal.sample(rng);
            feats.push(m + scale * e);
        }
        let c = self.spec.channels;
        let p = pooled(mean, c);
        for j in 0..4 {
            let row = &class.reg_map[j * c..(j + 1) * c];
            let e: f64 = StandardNormal.sample(rng);
            targets.push(row.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + class.reg_bias[j] + self.spec.reg_noise * e);
        }
    }

    /// `n_per_class` instances of every class in `split`, grouped by class.
    pub fn sample(&self, split: Split, stream: DataStream, n_per_class: usize) -> Result<LabeledBatch> {
        if n_per_class == 0 {
            return Err(NiffError::Contract("need at least one instance per class".into()));
        }
        let mut rng = self.stream_rng(split, stream);
        let labels: Vec<usize> = self.labels(split).flat_map(|c| std::iter::repeat_n(c, n_per_class)).collect();
        let mut feats = Vec::with_capacity(labels.len() * self.spec.instance_size());
        let mut targets = Vec::with_capacity(labels.len() * 4);
        for &l in &labels {
            self.draw(l, &mut rng, &mut feats, &mut targets);
        }
        let s = &self.spec;
        LabeledBatch::new(
            Tensor::new(vec![labels.len(), s.channels, s.height, s.width], feats)?,
            labels,
            targets,
        )
    }
}

/// Reproducible labelled batch of `n_per_class` instances per class of `split`.
pub fn make_synthetic_data(spec: &SyntheticTaskSpec, split: Split, stream: DataStream, n_per_class: usize) -> Result<LabeledBatch> {
    SyntheticTask::new(spec)?.sample(split, stream, n_per_class)
}
