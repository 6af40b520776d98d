use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use niff_core::losses::{FisherInfo, KdLossBreakdown, LossSwitches};
use niff_core::models::{GeneratorModel, HeadModel, ModelCheckpoint};
use niff_core::pipeline::{
    base_train, evaluate, finetune_and_evaluate, forge_batch, novel_finetune, stage_rng, train_generator,
    write_ablation_csv, write_feature_dump, AblationRow, DataStream, EvalData, EvalReport, ExperimentConfig, Regularizer,
    Split, Stage, SumCombiner, SyntheticTask, Variant,
};
use niff_core::{LabeledBatch, NiffError};
use serde::{Deserialize, Serialize};

use crate::manifest::{sha256_hex, RunManifest, Workspace};
use crate::CliError;

/// Forged and real instances per base class in the feature dump.
const DUMP_PER_CLASS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "niff", version, about = "Data-free feature forging for few-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher head on base data; record statistics and Fisher.
    BaseTrain(SetupArgs),
    /// Train the feature generator from the recorded statistics.
    TrainGenerator(StageArgs),
    /// Finetune a student on the novel shots.
    Finetune(VariantArgs),
    /// Evaluate a finetuned student on held-out base and novel data.
    Evaluate(VariantArgs),
    /// Finetune and evaluate all eight loss-switch combinations.
    Ablate(StageArgs),
    /// Every stage, then NIFF and plain finetuning with evaluation.
    Run(SetupArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Desk,
    PaperShapes,
}

#[derive(Debug, Args)]
pub struct SetupArgs {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the experiment and task seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Delete the base data files once base training is done.
    #[arg(long)]
    pub data_free: bool,
    /// Default shapes when no config is given.
    #[arg(long, value_enum, default_value = "desk", conflicts_with = "config")]
    pub scale: Scale,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Must match the config recorded by base-train.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Must match the recorded seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VariantArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long, value_enum, default_value = "niff")]
    pub variant: VariantName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantName {
    /// Replay, distillation and the configured penalty.
    Niff,
    /// Novel data only.
    Plain,
    /// One forged batch reused every iteration.
    FixedReplay,
    /// Full-diagonal EWC penalty.
    Ewc,
    /// Layer-mean EWC penalty.
    Mewc,
    /// No penalty.
    None,
}

impl VariantName {
    pub fn tag(self) -> &'static str {
        match self {
            VariantName::Niff => "niff",
            VariantName::Plain => "plain",
            VariantName::FixedReplay => "fixed-replay",
            VariantName::Ewc => "ewc",
            VariantName::Mewc => "mewc",
            VariantName::None => "none",
        }
    }

    pub fn variant(self, cfg: &ExperimentConfig) -> Variant {
        let reg = |r| Variant::with_regularizer(cfg, r, cfg.finetune.lambda_ewc);
        match self {
            VariantName::Niff => Variant::niff(cfg),
            VariantName::Plain => Variant::plain(cfg),
            VariantName::FixedReplay => Variant::fixed_replay(cfg),
            VariantName::Ewc => reg(Regularizer::Ewc),
            VariantName::Mewc => reg(Regularizer::Mewc),
            VariantName::None => reg(Regularizer::None),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::BaseTrain(a) => {
            let mut ws = cmd_base_train(&a)?;
            ws.finish()
        }
        Command::TrainGenerator(a) => {
            let mut ws = open_stage(&a, "train-generator")?;
            cmd_train_generator(&mut ws)?;
            ws.finish()
        }
        Command::Finetune(a) => {
            let mut ws = open_stage(&a.stage, &format!("finetune-{}", a.variant.tag()))?;
            cmd_finetune(&mut ws, a.variant)?;
            ws.finish()
        }
        Command::Evaluate(a) => {
            let mut ws = open_stage(&a.stage, &format!("evaluate-{}", a.variant.tag()))?;
            cmd_evaluate(&mut ws, a.variant)?;
            ws.finish()
        }
        Command::Ablate(a) => {
            let mut ws = open_stage(&a, "ablate")?;
            cmd_ablate(&mut ws)?;
            ws.finish()
        }
        Command::Run(a) => {
            let mut ws = cmd_base_train(&a)?;
            ws.next_stage("train-generator")?;
            cmd_train_generator(&mut ws)?;
            for v in [VariantName::Niff, VariantName::Plain] {
                ws.next_stage(&format!("finetune-{}", v.tag()))?;
                cmd_finetune(&mut ws, v)?;
                ws.next_stage(&format!("evaluate-{}", v.tag()))?;
                cmd_evaluate(&mut ws, v)?;
            }
            ws.finish()
        }
    }
}

fn parse_config_file(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_toml_str(&text)?)
}

pub fn resolve_config(a: &SetupArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&a.config, a.scale) {
        (Some(p), _) => parse_config_file(p)?,
        (None, Scale::Desk) => ExperimentConfig::default(),
        (None, Scale::PaperShapes) => ExperimentConfig::paper_shapes(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_stage(a: &StageArgs, stage: &str) -> Result<Workspace, CliError> {
    let mut ws = Workspace::open(&a.out, stage)?;
    let stored = load_config(&mut ws)?;
    let mismatch = |what: &str| CliError::Artifact(format!("{what} differs from the one recorded by base-train"));
    if let Some(p) = &a.config {
        let mut given = parse_config_file(p)?;
        if let Some(s) = a.seed {
            given = given.with_seed(s);
        }
        if given != stored {
            return Err(mismatch("config"));
        }
    } else if a.seed.is_some_and(|s| s != stored.seed) {
        return Err(mismatch("seed"));
    }
    Ok(ws)
}

fn load_config(ws: &mut Workspace) -> Result<ExperimentConfig, CliError> {
    let bytes = ws.read("config")?;
    if sha256_hex(&bytes) != ws.manifest.config_hash {
        return Err(CliError::Artifact("config artifact does not match the manifest config hash".into()));
    }
    let text = String::from_utf8(bytes).map_err(|e| CliError::Artifact(format!("config is not utf-8: {e}")))?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| CliError::Artifact(format!("recorded config is invalid: {e}")))
}

fn load_head(ws: &mut Workspace, key: &str, cfg: &ExperimentConfig, num_novel: usize) -> Result<HeadModel, CliError> {
    let ck = ModelCheckpoint::from_bytes(&ws.read(key)?)?;
    let head = HeadModel::from_checkpoint(&ck, false)?;
    let mut want = cfg.head_spec();
    want.num_novel = num_novel;
    if head.spec() != &want {
        return Err(CliError::Artifact(format!("`{key}` architecture does not match the config")));
    }
    Ok(head)
}

fn load_generator(ws: &mut Workspace, cfg: &ExperimentConfig) -> Result<GeneratorModel, CliError> {
    let g = GeneratorModel::from_checkpoint(&ModelCheckpoint::from_bytes(&ws.read("generator")?)?, false)?;
    if g.spec() != &cfg.generator_spec() {
        return Err(CliError::Artifact("generator architecture does not match the config".into()));
    }
    Ok(g)
}

fn load_fisher(ws: &mut Workspace) -> Result<FisherInfo, CliError> {
    Ok(FisherInfo::from_bytes(&ws.read("fisher")?)?)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    Ok((serde_json::to_string_pretty(v).map_err(NiffError::from)? + "\n").into_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    pub heldout_accuracy: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub initial_kl: f64,
    pub final_kl: f64,
    pub kl_reduction: f64,
    pub final_ce: f64,
    pub confidence_mean: f64,
    pub confidence_min: f64,
    pub confidence_per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub variant: String,
    pub curve: Vec<KdLossBreakdown>,
    pub penalty_curve: Vec<f64>,
    pub forged_counts: Vec<usize>,
}

/// Writes base data to disk, trains the teacher from the files, and records
/// teacher, statistics and Fisher. With `--data-free` the data files are
/// deleted before the command returns.
pub fn cmd_base_train(a: &SetupArgs) -> Result<Workspace, CliError> {
    let cfg = resolve_config(a)?;
    let mut ws = Workspace::create(&a.out, RunManifest::new(cfg.seed, a.data_free), "base-train")?;
    let text = cfg.to_toml_string();
    ws.manifest.config_hash = sha256_hex(text.as_bytes());
    ws.write("config", "config.toml", text.as_bytes())?;

    let task = SyntheticTask::new(&cfg.task)?;
    let train = task.sample(Split::Base, DataStream::Train, cfg.base.train_per_class)?;
    let heldout = task.sample(Split::Base, DataStream::Test, cfg.base.test_per_class)?;
    ws.write("base_train_data", "base_train.niffdata", &train.to_bytes()?)?;
    ws.write("base_heldout_data", "base_heldout.niffdata", &heldout.to_bytes()?)?;
    drop((train, heldout));

    let train = LabeledBatch::from_bytes(&ws.read("base_train_data")?)?;
    let heldout = LabeledBatch::from_bytes(&ws.read("base_heldout_data")?)?;
    let teacher = HeadModel::build_teacher(&cfg.head_spec(), &mut stage_rng(cfg.seed, Stage::TeacherInit))?;
    let out = base_train(teacher, &train, &heldout, &cfg.stats, &cfg.base, &mut stage_rng(cfg.seed, Stage::BaseTrain))?;

    ws.write("teacher", "teacher.ckpt", &out.teacher.to_checkpoint().to_bytes()?)?;
    ws.write("stats", "stats.snap", &out.snapshot.to_bytes()?)?;
    ws.write("fisher", "fisher.bin", &out.fisher.to_bytes()?)?;
    let report = BaseReport {
        heldout_accuracy: out.heldout_accuracy,
        loss_curve: out.loss_curve,
    };
    ws.write("base_report", "base_report.json", &json(&report)?)?;
    if a.data_free {
        ws.delete("base_train_data")?;
        ws.delete("base_heldout_data")?;
    }
    println!("base-train: held-out base accuracy {:.4}", report.heldout_accuracy);
    Ok(ws)
}

pub fn cmd_train_generator(ws: &mut Workspace) -> Result<(), CliError> {
    let cfg = load_config(ws)?;
    let teacher = load_head(ws, "teacher", &cfg, 0)?;
    let snapshot = niff_core::stats::StatsSnapshot::from_bytes(&ws.read("stats")?)?;
    let g = GeneratorModel::new(&cfg.generator_spec(), &mut stage_rng(cfg.seed, Stage::GeneratorInit))?;
    let run = train_generator(
        &snapshot,
        &teacher,
        g,
        &cfg.stats,
        &cfg.generator_training,
        &mut stage_rng(cfg.seed, Stage::GeneratorTrain),
    )?;
    ws.write("generator", "generator.ckpt", &run.generator.to_checkpoint().to_bytes()?)?;

    let mut curve = String::from("iteration,kl_term,ce_term,total\n");
    for (i, b) in run.curve.iter().enumerate() {
        curve.push_str(&format!("{i},{},{},{}\n", b.kl_term, b.ce_term, b.total));
    }
    ws.write("generator_curve", "generator_curve.csv", curve.as_bytes())?;
    let report = GeneratorReport {
        initial_kl: run.initial_kl(),
        final_kl: run.final_loss.kl_term,
        kl_reduction: run.kl_reduction(),
        final_ce: run.final_loss.ce_term,
        confidence_mean: run.confidence.mean,
        confidence_min: run.confidence.min,
        confidence_per_class: run.confidence.per_class.clone(),
    };
    ws.write("generator_report", "generator_report.json", &json(&report)?)?;

    // Real base features come from the regenerated test stream, never from
    // the base training files.
    let task = SyntheticTask::new(&cfg.task)?;
    let real = task.sample(Split::Base, DataStream::Test, DUMP_PER_CLASS)?;
    let forged = forge_batch(&run.generator, DUMP_PER_CLASS, &mut stage_rng(cfg.seed, Stage::Dump))?;
    let mut dump = Vec::new();
    write_feature_dump(&teacher, &[("real", &real), ("forged", &forged)], &mut dump)?;
    ws.write("feature_dump", "feature_dump.csv", &dump)?;
    println!(
        "train-generator: KL {:.4} -> {:.4} ({:.1}x), forged confidence {:.4}",
        report.initial_kl, report.final_kl, report.kl_reduction, report.confidence_mean
    );
    Ok(())
}

pub fn cmd_finetune(ws: &mut Workspace, v: VariantName) -> Result<(), CliError> {
    let cfg = load_config(ws)?;
    let variant = v.variant(&cfg);
    let teacher = load_head(ws, "teacher", &cfg, 0)?;
    let replay = variant.finetune.replay != niff_core::pipeline::ReplayMode::None;
    let generator = if replay { Some(load_generator(ws, &cfg)?) } else { None };
    let fisher = match variant.finetune.regularizer {
        Regularizer::None => None,
        _ => Some(load_fisher(ws)?),
    };
    let data = EvalData::new(&SyntheticTask::new(&cfg.task)?, &cfg)?;
    let student = HeadModel::clone_student(&teacher, cfg.task.num_novel, &mut stage_rng(cfg.seed, Stage::StudentInit))?;
    let run = novel_finetune(
        student,
        &teacher,
        generator.as_ref(),
        &data.novel_train,
        fisher.as_ref(),
        &variant.finetune,
        &SumCombiner,
        &mut stage_rng(cfg.seed, Stage::Finetune),
    )?;
    let tag = v.tag();
    ws.write(&format!("student/{tag}"), &format!("student-{tag}.ckpt"), &run.student.to_checkpoint().to_bytes()?)?;
    let log = FinetuneLog {
        variant: variant.name,
        curve: run.curve,
        penalty_curve: run.penalty_curve,
        forged_counts: run.forged_counts,
    };
    ws.write(&format!("finetune_log/{tag}"), &format!("finetune-{tag}.json"), &json(&log)?)?;
    println!("finetune {tag}: {} iterations", log.curve.len());
    Ok(())
}

pub fn cmd_evaluate(ws: &mut Workspace, v: VariantName) -> Result<(), CliError> {
    let cfg = load_config(ws)?;
    let tag = v.tag();
    let student = load_head(ws, &format!("student/{tag}"), &cfg, cfg.task.num_novel)?;
    let log: FinetuneLog = serde_json::from_slice(&ws.read(&format!("finetune_log/{tag}"))?)
        .map_err(|e| CliError::Artifact(format!("malformed finetune log: {e}")))?;
    let data = EvalData::new(&SyntheticTask::new(&cfg.task)?, &cfg)?;
    let mut report = evaluate(&student, &data.base_test, &data.novel_test)?;
    report.loss_curve = log.curve;
    ws.write(&format!("report/{tag}"), &format!("report-{tag}.json"), report.to_json()?.as_bytes())?;
    let mut curve = Vec::new();
    report.write_curve_csv(&mut curve)?;
    ws.write(&format!("curve/{tag}"), &format!("curve-{tag}.csv"), &curve)?;
    print_report(tag, &report);
    Ok(())
}

fn print_report(tag: &str, r: &EvalReport) {
    println!(
        "evaluate {tag}: base {:.4} novel {:.4} overall {:.4}",
        r.base_acc, r.novel_acc, r.overall
    );
}

pub fn cmd_ablate(ws: &mut Workspace) -> Result<(), CliError> {
    let cfg = load_config(ws)?;
    let teacher = load_head(ws, "teacher", &cfg, 0)?;
    let generator = load_generator(ws, &cfg)?;
    let fisher = load_fisher(ws)?;
    let data = EvalData::new(&SyntheticTask::new(&cfg.task)?, &cfg)?;
    let rows = LossSwitches::matrix()
        .into_iter()
        .map(|s| {
            let v = Variant::with_switches(&cfg, s);
            let (_, report) = finetune_and_evaluate(&cfg, &teacher, Some(&generator), Some(&fisher), &data, &v.finetune)?;
            println!("ablate {}: base {:.4} novel {:.4}", s.label(), report.base_acc, report.novel_acc);
            Ok(AblationRow::new(cfg.seed, s, &report))
        })
        .collect::<Result<Vec<_>, NiffError>>()?;
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv)?;
    ws.write("ablation", "ablation.csv", &csv)?;
    Ok(())
}
