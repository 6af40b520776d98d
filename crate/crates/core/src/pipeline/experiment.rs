use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FinetuneConfig, Regularizer, ReplayMode};
use super::stages::{
    base_train, evaluate, forge_batch, novel_finetune, train_generator, BaseOutcome, EvalReport, FinetuneRun,
    GeneratorRun, SumCombiner,
};
use super::synthetic::{DataStream, Split, SyntheticTask};
use crate::batch::LabeledBatch;
use crate::error::Result;
use crate::losses::LossSwitches;
use crate::models::{GeneratorModel, HeadModel};

/// Independent random streams of one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TeacherInit,
    BaseTrain,
    GeneratorInit,
    GeneratorTrain,
    StudentInit,
    Finetune,
    Dump,
}

pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stage {
        Stage::TeacherInit => 10,
        Stage::BaseTrain => 11,
        Stage::GeneratorInit => 12,
        Stage::GeneratorTrain => 13,
        Stage::StudentInit => 14,
        Stage::Finetune => 15,
        Stage::Dump => 16,
    });
    rng
}

/// The novel shots and the held-out test splits of a task.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub novel_train: LabeledBatch,
    pub base_test: LabeledBatch,
    pub novel_test: LabeledBatch,
}

impl EvalData {
    pub fn new(task: &SyntheticTask, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            novel_train: task.sample(Split::Novel, DataStream::Train, cfg.task.shots)?,
            base_test: task.sample(Split::Base, DataStream::Test, cfg.eval.test_per_class)?,
            novel_test: task.sample(Split::Novel, DataStream::Test, cfg.eval.test_per_class)?,
        })
    }
}

/// Stage-I artifacts of one seed, shared by every finetuning variant.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub cfg: ExperimentConfig,
    pub task: SyntheticTask,
    pub base: BaseOutcome,
    pub generator: GeneratorRun,
    pub data: EvalData,
}

/// Base training on freshly drawn base data.
pub fn run_base_stage(cfg: &ExperimentConfig, task: &SyntheticTask) -> Result<(LabeledBatch, BaseOutcome)> {
    let train = task.sample(Split::Base, DataStream::Train, cfg.base.train_per_class)?;
    let heldout = task.sample(Split::Base, DataStream::Test, cfg.base.test_per_class)?;
    let teacher = HeadModel::build_teacher(&cfg.head_spec(), &mut stage_rng(cfg.seed, Stage::TeacherInit))?;
    let outcome = base_train(
        teacher,
        &train,
        &heldout,
        &cfg.stats,
        &cfg.base,
        &mut stage_rng(cfg.seed, Stage::BaseTrain),
    )?;
    Ok((train, outcome))
}

/// Stage I given the base artifacts.
pub fn run_generator_stage(cfg: &ExperimentConfig, base: &BaseOutcome) -> Result<GeneratorRun> {
    let g = GeneratorModel::new(&cfg.generator_spec(), &mut stage_rng(cfg.seed, Stage::GeneratorInit))?;
    train_generator(
        &base.snapshot,
        &base.teacher,
        g,
        &cfg.stats,
        &cfg.generator_training,
        &mut stage_rng(cfg.seed, Stage::GeneratorTrain),
    )
}

/// Base training and generator training; base data is dropped afterwards.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedExperiment> {
    cfg.validate()?;
    let task = SyntheticTask::new(&cfg.task)?;
    let (_, base) = run_base_stage(cfg, &task)?;
    let generator = run_generator_stage(cfg, &base)?;
    let data = EvalData::new(&task, cfg)?;
    Ok(PreparedExperiment {
        cfg: cfg.clone(),
        task,
        base,
        generator,
        data,
    })
}

/// One finetuning setup to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub finetune: FinetuneConfig,
}

impl Variant {
    /// The configured method: replay, distillation and the configured penalty.
    pub fn niff(cfg: &ExperimentConfig) -> Self {
        Self {
            name: "niff".into(),
            finetune: cfg.finetune.clone(),
        }
    }

    /// Novel-only finetuning without replay, distillation or penalty.
    pub fn plain(cfg: &ExperimentConfig) -> Self {
        let mut f = cfg.finetune.clone();
        f.replay = ReplayMode::None;
        f.switches = LossSwitches::all_off();
        f.regularizer = Regularizer::None;
        Self {
            name: "plain".into(),
            finetune: f,
        }
    }

    /// The configured method, replaying one forged batch drawn up front.
    pub fn fixed_replay(cfg: &ExperimentConfig) -> Self {
        let mut f = cfg.finetune.clone();
        f.replay = ReplayMode::Fixed;
        Self {
            name: "fixed-replay".into(),
            finetune: f,
        }
    }

    pub fn with_regularizer(cfg: &ExperimentConfig, reg: Regularizer, lambda_ewc: f64) -> Self {
        let mut f = cfg.finetune.clone();
        f.regularizer = reg;
        f.lambda_ewc = lambda_ewc;
        let tag = match reg {
            Regularizer::None => "none",
            Regularizer::Ewc => "ewc",
            Regularizer::Mewc => "mewc",
        };
        Self {
            name: format!("{tag}@{lambda_ewc}"),
            finetune: f,
        }
    }

    pub fn with_switches(cfg: &ExperimentConfig, switches: LossSwitches) -> Self {
        let mut f = cfg.finetune.clone();
        f.switches = switches;
        Self {
            name: switches.label(),
            finetune: f,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub report: EvalReport,
    pub run: FinetuneRun,
}

/// Finetunes a fresh student from Stage-I artifacts and evaluates it.
///
/// Every variant of a seed starts from the same student initialization and
/// the same finetuning noise stream.
pub fn finetune_and_evaluate(
    cfg: &ExperimentConfig,
    teacher: &HeadModel,
    generator: Option<&GeneratorModel>,
    fisher: Option<&crate::losses::FisherInfo>,
    data: &EvalData,
    finetune: &FinetuneConfig,
) -> Result<(FinetuneRun, EvalReport)> {
    let student = HeadModel::clone_student(teacher, cfg.task.num_novel, &mut stage_rng(cfg.seed, Stage::StudentInit))?;
    let run = novel_finetune(
        student,
        teacher,
        generator,
        &data.novel_train,
        fisher,
        finetune,
        &SumCombiner,
        &mut stage_rng(cfg.seed, Stage::Finetune),
    )?;
    let mut report = evaluate(&run.student, &data.base_test, &data.novel_test)?;
    report.loss_curve = run.curve.clone();
    Ok((run, report))
}

impl PreparedExperiment {
    pub fn run_variant(&self, v: &Variant) -> Result<VariantOutcome> {
        let (run, report) = finetune_and_evaluate(
            &self.cfg,
            &self.base.teacher,
            Some(&self.generator.generator),
            Some(&self.base.fisher),
            &self.data,
            &v.finetune,
        )?;
        Ok(VariantOutcome {
            name: v.name.clone(),
            report,
            run,
        })
    }

    /// Evaluation of the teacher extended with untrained novel rows.
    pub fn teacher_report(&self) -> Result<EvalReport> {
        let s = HeadModel::clone_student(&self.base.teacher, self.cfg.task.num_novel, &mut stage_rng(self.cfg.seed, Stage::StudentInit))?;
        evaluate(&s, &self.data.base_test, &self.data.novel_test)
    }

    /// One row per loss-switch combination (all eight).
    pub fn ablation(&self) -> Result<Vec<AblationRow>> {
        LossSwitches::matrix()
            .into_iter()
            .map(|s| {
                let out = self.run_variant(&Variant::with_switches(&self.cfg, s))?;
                Ok(AblationRow::new(self.cfg.seed, s, &out.report))
            })
            .collect()
    }

    /// Teacher-pooled features of real base test instances and of forged
    /// instances, as CSV rows `source,label,f0..f{d-1}`.
    pub fn write_feature_dump(&self, per_class: usize, w: impl Write) -> Result<()> {
        let forged = forge_batch(&self.generator.generator, per_class, &mut stage_rng(self.cfg.seed, Stage::Dump))?;
        let idx: Vec<usize> = self
            .data
            .base_test
            .indices_by_class(self.cfg.task.num_base)
            .into_iter()
            .flat_map(|v| v.into_iter().take(per_class))
            .collect();
        let real = self.data.base_test.select(&idx)?;
        write_feature_dump(&self.base.teacher, &[("real", &real), ("forged", &forged)], w)
    }
}

/// Writes pooled head features of each labelled source batch as CSV.
pub fn write_feature_dump(head: &HeadModel, sources: &[(&str, &LabeledBatch)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = head.feature_dim();
    let mut header = vec!["source".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for (name, batch) in sources {
        let pooled = head.forward(&batch.features, &[])?.pooled;
        for (row, l) in pooled.data().chunks_exact(d).zip(&batch.labels) {
            let mut rec = vec![name.to_string(), l.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub conf: bool,
    pub feat_distill: bool,
    pub reg_l1: bool,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub overall: f64,
    pub base_reg_mae: f64,
    pub novel_reg_mae: f64,
}

impl AblationRow {
    pub fn new(seed: u64, s: LossSwitches, r: &EvalReport) -> Self {
        Self {
            seed,
            conf: s.conf,
            feat_distill: s.feat_distill,
            reg_l1: s.reg_l1,
            base_acc: r.base_acc,
            novel_acc: r.novel_acc,
            overall: r.overall,
            base_reg_mae: r.base_reg_mae,
            novel_reg_mae: r.novel_reg_mae,
        }
    }
}

pub fn write_ablation_csv(rows: &[AblationRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Results of every variant for one seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub generator_kl_reduction: f64,
    pub forged_confidence: f64,
    pub outcomes: Vec<VariantOutcome>,
}

impl SeedResult {
    pub fn report(&self, name: &str) -> Option<&EvalReport> {
        self.outcomes.iter().find(|o| o.name == name).map(|o| &o.report)
    }
}

/// Prepares each seed and runs `variants(cfg)` on it. Seeds run in parallel
/// and share nothing.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    variants: impl Fn(&ExperimentConfig) -> Vec<Variant> + Sync,
) -> Result<Vec<SeedResult>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = cfg.with_seed(seed);
            let prepared = prepare(&cfg)?;
            let outcomes = variants(&cfg)
                .iter()
                .map(|v| prepared.run_variant(v))
                .collect::<Result<_>>()?;
            Ok(SeedResult {
                seed,
                generator_kl_reduction: prepared.generator.kl_reduction(),
                forged_confidence: prepared.generator.confidence.mean,
                outcomes,
            })
        })
        .collect()
}
