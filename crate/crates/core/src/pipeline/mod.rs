//! Synthetic task, stage drivers and experiment runners.

mod config;
mod experiment;
mod stages;
mod synthetic;

pub use config::{
    BaseTrainConfig, EvalConfig, ExperimentConfig, FinetuneConfig, GenTrainConfig, GeneratorConfig, HeadConfig,
    OptimConfig, Regularizer, ReplayMode, StatsConfig,
};
pub use experiment::{
    finetune_and_evaluate, prepare, run_base_stage, run_generator_stage, run_seeds, stage_rng, write_ablation_csv,
    write_feature_dump, AblationRow, EvalData, PreparedExperiment, SeedResult, Stage, Variant, VariantOutcome,
};
pub use stages::{
    accuracy, base_train, clip_grad_norm, evaluate, forge_batch, forged_confidence, novel_finetune, train_generator, weighted_overall,
    BaseOutcome, EvalReport, FinetuneRun, ForgedConfidence, GeneratorRun, GradientCombiner, SumCombiner,
};
pub use synthetic::{make_synthetic_data, ClassMixture, DataStream, Split, SyntheticTask, SyntheticTaskSpec};
