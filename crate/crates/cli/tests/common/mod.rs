#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use niff_core::pipeline::ExperimentConfig;

/// A few-second configuration: 4 base and 2 novel classes over 6×3×3 features.
pub fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
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

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

pub fn niff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_niff")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Runs a command that must succeed.
pub fn ok(args: &[&str]) -> Output {
    let out = niff(args);
    assert_eq!(
        code(&out),
        0,
        "niff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
