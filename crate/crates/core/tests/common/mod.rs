#![allow(dead_code)]

use niff_core::models::{GeneratorModel, GeneratorSpec, HeadModel, HeadSpec, Parameterized};
use niff_core::stats::{SitePlacement, StatsSnapshot};
use niff_core::LabeledBatch;
use niff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 3 base classes, 4×3×3 inputs, pooled dim 4.
pub fn head_spec() -> HeadSpec {
    HeadSpec {
        in_channels: 4,
        height: 3,
        width: 3,
        hidden: vec![5, 4],
        kernel: 3,
        num_base: 3,
        num_novel: 0,
    }
}

pub fn gen_spec() -> GeneratorSpec {
    GeneratorSpec {
        z_dim: 4,
        trunk_channels: 3,
        layers: 2,
        kernel: 3,
        height: 3,
        width: 3,
        out_channels: 4,
        num_classes: 3,
        slope: 0.2,
    }
}

pub fn teacher(seed: u64) -> HeadModel {
    HeadModel::build_teacher(&head_spec(), &mut rng(seed)).unwrap().frozen()
}

pub fn generator(seed: u64) -> GeneratorModel {
    GeneratorModel::new(&gen_spec(), &mut rng(seed)).unwrap()
}

/// Random features for the given labels, with random regression targets.
pub fn batch(labels: &[usize], r: &mut impl Rng) -> LabeledBatch {
    let n = labels.len();
    let feats = (0..n * 36).map(|_| r.random_range(-1.5..1.5)).collect();
    let targets = (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect();
    LabeledBatch::new(Tensor::new(vec![n, 4, 3, 3], feats).unwrap(), labels.to_vec(), targets).unwrap()
}

/// Forged-style batch: base labels, no targets.
pub fn forged(labels: &[usize], r: &mut impl Rng) -> LabeledBatch {
    let b = batch(labels, r);
    LabeledBatch::new(b.features, b.labels, Vec::new()).unwrap()
}

/// Copy of `model` whose parameters are replaced, in `params_mut` order.
pub fn with_params<M: Parameterized + Clone>(model: &M, xs: &[Tensor]) -> M {
    let mut m = model.clone();
    for (p, x) in m.params_mut().into_iter().zip(xs) {
        *p = x.clone();
    }
    m
}

pub fn param_values<M: Parameterized>(model: &M) -> Vec<Tensor> {
    model.named_params().into_iter().map(|(_, p)| p.detach()).collect()
}

/// Adds uniform noise of size `scale` to every parameter.
pub fn perturb<M: Parameterized + Clone>(model: &M, scale: f64, r: &mut impl Rng) -> M {
    let xs: Vec<Tensor> = param_values(model)
        .into_iter()
        .map(|p| {
            let data = p.data().iter().map(|v| v + r.random_range(-scale..scale)).collect();
            Tensor::new(p.shape().to_vec(), data).unwrap().with_requires_grad(true)
        })
        .collect();
    with_params(model, &xs)
}

/// Snapshot of `head` recorded over `per_class` random instances per class.
pub fn snapshot(head: &HeadModel, per_class: usize, class_wise: bool, seed: u64) -> StatsSnapshot {
    let sites = SitePlacement::default().sites(head.num_blocks());
    let mut ws = head.watchers(&sites, class_wise).unwrap();
    let labels: Vec<usize> = (0..head.num_base()).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let b = batch(&labels, &mut rng(seed));
    head.forward_observed(&b.features, &b.labels, &mut ws).unwrap();
    ws.snapshot().unwrap()
}

/// A few-second end-to-end configuration: 4 base and 2 novel classes over
/// 6×3×3 features.
pub fn small_config() -> niff_core::pipeline::ExperimentConfig {
    let mut c = niff_core::pipeline::ExperimentConfig::default();
    c.task.num_base = 4;
    c.task.num_novel = 2;
    c.task.channels = 6;
    c.task.height = 3;
    c.task.width = 3;
    c.task.class_scale = 1.5;
    c.task.component_scale = 0.3;
    c.task.spatial_scale = 0.3;
    c.task.shots = 5;
    c.head.hidden = vec![8, 12];
    c.generator.z_dim = 8;
    c.generator.trunk_channels = 4;
    c.generator.layers = 2;
    c.base.epochs = 30;
    c.base.train_per_class = 100;
    c.base.test_per_class = 60;
    c.generator_training.iterations = 60;
    c.generator_training.n_per_class = 12;
    c.generator_training.probe_per_class = 30;
    c.finetune.iterations = 40;
    c.eval.test_per_class = 40;
    c
}
