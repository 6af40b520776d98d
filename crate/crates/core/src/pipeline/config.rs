use std::path::Path;

use niff_tensor::SgdConfig;
use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticTaskSpec;
use crate::error::{config_err, NiffError, Result};
use crate::losses::{FisherMode, LossSwitches};
use crate::models::{GeneratorSpec, HeadSpec};
use crate::stats::{Placement, SitePlacement};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    fn check(&self, section: &str) -> Result<SgdConfig> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(&format!("{section}.lr"), format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(&format!("{section}.momentum"), format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err(
                &format!("{section}.weight_decay"),
                format!("must be nonnegative, got {}", self.weight_decay),
            );
        }
        Ok(SgdConfig::new(self.lr, self.momentum, self.weight_decay)?)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub kernel: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 64],
            kernel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub trunk_channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let g = GeneratorSpec::default();
        Self {
            z_dim: g.z_dim,
            trunk_channels: g.trunk_channels,
            layers: g.layers,
            kernel: g.kernel,
            slope: g.slope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub placement: Placement,
    /// Watch the logits and probabilities as well.
    pub softmax_sites: bool,
    pub class_wise: bool,
    /// Include the post-softmax site in the KL term.
    pub kl_post_softmax: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            placement: Placement::Both,
            softmax_sites: true,
            class_wise: true,
            kl_post_softmax: true,
        }
    }
}

impl StatsConfig {
    pub fn placement(&self) -> SitePlacement {
        SitePlacement {
            blocks: self.placement,
            softmax: self.softmax_sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Held-out accuracy the teacher must reach.
    pub min_accuracy: f64,
    pub optimizer: OptimConfig,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            train_per_class: 150,
            test_per_class: 100,
            min_accuracy: 0.95,
            optimizer: OptimConfig {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 5e-5,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTrainConfig {
    pub iterations: usize,
    /// Features forged per class per iteration (N).
    pub n_per_class: usize,
    pub lambda_kl: f64,
    /// Features per class used to measure forged class probability.
    pub probe_per_class: usize,
    /// Global gradient-norm clip applied before each step; 0 disables it.
    pub max_grad_norm: f64,
    pub optimizer: OptimConfig,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            n_per_class: 75,
            lambda_kl: 5.0,
            probe_per_class: 100,
            max_grad_norm: 5.0,
            optimizer: OptimConfig {
                lr: 1e-2,
                momentum: 0.9,
                weight_decay: 5e-5,
            },
        }
    }
}

/// Source of base-class replay during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    /// New noise every iteration.
    Fresh,
    /// One forged batch drawn before training and reused.
    Fixed,
    /// No replay.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    Ewc,
    Mewc,
}

impl Regularizer {
    pub fn fisher_mode(&self) -> Option<FisherMode> {
        match self {
            Regularizer::None => None,
            Regularizer::Ewc => Some(FisherMode::Full),
            Regularizer::Mewc => Some(FisherMode::LayerMean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// Learning-rate factor for parameters that existed before finetuning.
    pub base_lr_scale: f64,
    pub lambda_f: f64,
    pub lambda_ewc: f64,
    pub regularizer: Regularizer,
    pub replay: ReplayMode,
    pub switches: LossSwitches,
    pub optimizer: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            base_lr_scale: 0.1,
            lambda_f: 0.1,
            lambda_ewc: 0.01,
            regularizer: Regularizer::Mewc,
            replay: ReplayMode::Fresh,
            switches: LossSwitches::all_on(),
            optimizer: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-5,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub test_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_per_class: 100 }
    }
}

/// Everything needed to run an experiment, loadable from TOML.
///
/// Keys mirror the field names; unknown keys are rejected. The top-level
/// `seed` drives model initialization and noise; `task.seed` fixes the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: SyntheticTaskSpec,
    pub head: HeadConfig,
    pub generator: GeneratorConfig,
    pub stats: StatsConfig,
    pub base: BaseTrainConfig,
    pub generator_training: GenTrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: SyntheticTaskSpec::default(),
            head: HeadConfig::default(),
            generator: GeneratorConfig::default(),
            stats: StatsConfig::default(),
            base: BaseTrainConfig::default(),
            generator_training: GenTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn nonneg(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        config_err(field, format!("must be a finite nonnegative number, got {v}"))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        config_err(field, "must be at least 1")
    }
}

impl ExperimentConfig {
    /// Paper-sized shapes (1024×7×7 features, 60 + 20 classes). Only
    /// sensible for shape checks on a CPU.
    pub fn paper_shapes() -> Self {
        let mut cfg = Self::default();
        cfg.task.channels = 1024;
        cfg.task.height = 7;
        cfg.task.width = 7;
        cfg.task.num_base = 60;
        cfg.task.num_novel = 20;
        cfg.head.hidden = vec![1024];
        cfg.generator_training.n_per_class = 10;
        cfg
    }

    /// Same configuration with both the experiment and task seeds set.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.task.seed = seed;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // Serde names the offending key in backticks for unknown fields.
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<config>".to_string());
            NiffError::Config { field, reason: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.head.hidden.is_empty() {
            return config_err("head.hidden", "needs at least one conv block");
        }
        if self.head.hidden.contains(&0) {
            return config_err("head.hidden", "block widths must be positive");
        }
        if self.head.kernel % 2 == 0 {
            return config_err("head.kernel", "must be odd");
        }
        let g = &self.generator;
        at_least_one("generator.z_dim", g.z_dim)?;
        at_least_one("generator.trunk_channels", g.trunk_channels)?;
        if g.kernel % 2 == 0 {
            return config_err("generator.kernel", "must be odd");
        }
        nonneg("generator.slope", g.slope)?;
        let b = &self.base;
        at_least_one("base.epochs", b.epochs)?;
        at_least_one("base.batch_size", b.batch_size)?;
        if b.train_per_class < 2 {
            return config_err("base.train_per_class", "needs at least 2 samples per class for variances");
        }
        at_least_one("base.test_per_class", b.test_per_class)?;
        if !(0.0..=1.0).contains(&b.min_accuracy) {
            return config_err("base.min_accuracy", "must lie in [0, 1]");
        }
        b.optimizer.check("base.optimizer")?;
        let gt = &self.generator_training;
        at_least_one("generator_training.iterations", gt.iterations)?;
        if gt.n_per_class < 2 {
            return config_err("generator_training.n_per_class", "needs at least 2 features per class");
        }
        at_least_one("generator_training.probe_per_class", gt.probe_per_class)?;
        nonneg("generator_training.lambda_kl", gt.lambda_kl)?;
        nonneg("generator_training.max_grad_norm", gt.max_grad_norm)?;
        gt.optimizer.check("generator_training.optimizer")?;
        let f = &self.finetune;
        at_least_one("finetune.iterations", f.iterations)?;
        nonneg("finetune.base_lr_scale", f.base_lr_scale)?;
        nonneg("finetune.lambda_f", f.lambda_f)?;
        nonneg("finetune.lambda_ewc", f.lambda_ewc)?;
        f.optimizer.check("finetune.optimizer")?;
        at_least_one("eval.test_per_class", self.eval.test_per_class)?;
        Ok(())
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            in_channels: self.task.channels,
            height: self.task.height,
            width: self.task.width,
            hidden: self.head.hidden.clone(),
            kernel: self.head.kernel,
            num_base: self.task.num_base,
            num_novel: 0,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            z_dim: self.generator.z_dim,
            trunk_channels: self.generator.trunk_channels,
            layers: self.generator.layers,
            kernel: self.generator.kernel,
            height: self.task.height,
            width: self.task.width,
            out_channels: self.task.channels,
            num_classes: self.task.num_base,
            slope: self.generator.slope,
        }
    }
}
