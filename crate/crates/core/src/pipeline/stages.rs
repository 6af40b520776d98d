use niff_tensor::{Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{BaseTrainConfig, FinetuneConfig, GenTrainConfig, ReplayMode, StatsConfig};
use crate::batch::LabeledBatch;
use crate::error::{NiffError, Result};
use crate::losses::{
    compute_fisher, ewc_penalty, novel_loss, supervised_from_output, FisherInfo, FisherMode, GenLossBreakdown,
    GeneratorObjective, KdLossBreakdown,
};
use crate::models::{is_novel_param, sample_noise, GeneratorModel, HeadModel, Parameterized};
use crate::stats::StatsSnapshot;

/// Rows per forward pass when only inference is needed.
const EVAL_CHUNK: usize = 256;

/// Runs `model` over `batch` in chunks and returns (logits, reg) rows.
fn infer(model: &HeadModel, batch: &LabeledBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut logits = Vec::new();
    let mut reg = Vec::new();
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = batch.select(chunk)?;
        let out = model.forward(&part.features, &[])?;
        logits.extend_from_slice(out.logits.data());
        reg.extend_from_slice(out.reg.data());
    }
    Ok((logits, reg))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `batch` whose argmax over all of the model's classes is the label.
pub fn accuracy(model: &HeadModel, batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(NiffError::Contract("accuracy of an empty split".into()));
    }
    let (logits, _) = infer(model, batch)?;
    let c = model.num_classes();
    let hits = logits
        .chunks_exact(c)
        .zip(&batch.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BaseOutcome {
    /// Frozen teacher.
    pub teacher: HeadModel,
    pub snapshot: StatsSnapshot,
    /// Full-diagonal Fisher; collapse with [`FisherInfo::to_layer_mean`] for mEWC.
    pub fisher: FisherInfo,
    pub heldout_accuracy: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains the head on base data, then makes one pass over the training data
/// at the converged parameters to record the watcher statistics and the
/// Fisher information.
pub fn base_train(
    mut teacher: HeadModel,
    train: &LabeledBatch,
    heldout: &LabeledBatch,
    stats: &StatsConfig,
    cfg: &BaseTrainConfig,
    rng: &mut impl Rng,
) -> Result<BaseOutcome> {
    if train.is_empty() || !train.has_targets() {
        return Err(NiffError::Contract("base training needs labelled data with targets".into()));
    }
    teacher = teacher.with_trainable(true);
    let mut opt = Sgd::new(cfg.optimizer.sgd())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = train.select(chunk)?;
            teacher.zero_grad();
            let out = teacher.forward(&b.features, &[])?;
            let (ce, reg) = supervised_from_output(&out, &b)?;
            let loss = ce.add(&reg)?;
            let v = loss.item()?;
            if !v.is_finite() {
                return Err(NiffError::Training(format!(
                    "base loss became {v} in epoch {epoch}; lower base.optimizer.lr"
                )));
            }
            loss.backward()?;
            opt.step(&mut teacher.params_mut())?;
            total += v;
            batches += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    let teacher = teacher.frozen();
    let heldout_accuracy = accuracy(&teacher, heldout)?;
    if heldout_accuracy < cfg.min_accuracy {
        return Err(NiffError::Training(format!(
            "teacher reached {:.1}% held-out base accuracy, below the required {:.1}%; \
             try more base.epochs, a different base.optimizer.lr, or better separated classes (task.class_scale)",
            100.0 * heldout_accuracy,
            100.0 * cfg.min_accuracy
        )));
    }
    let sites = stats.placement().sites(teacher.num_blocks());
    let mut watchers = teacher.watchers(&sites, stats.class_wise)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let b = train.select(chunk)?;
        teacher.forward_observed(&b.features, &b.labels, &mut watchers)?;
    }
    let snapshot = watchers.snapshot()?;
    let fisher = compute_fisher(&teacher, train, FisherMode::Full)?;
    Ok(BaseOutcome {
        teacher,
        snapshot,
        fisher,
        heldout_accuracy,
        loss_curve,
    })
}

/// How confidently the frozen head classifies forged features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgedConfidence {
    /// Mean over classes of the mean probability of the source class.
    pub mean: f64,
    /// Lowest per-class mean probability.
    pub min: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorRun {
    pub generator: GeneratorModel,
    /// Loss at each iteration, measured before that iteration's update.
    pub curve: Vec<GenLossBreakdown>,
    /// Loss of the trained generator on fresh noise.
    pub final_loss: GenLossBreakdown,
    pub confidence: ForgedConfidence,
}

impl GeneratorRun {
    pub fn initial_kl(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |b| b.kl_term)
    }

    pub fn kl_reduction(&self) -> f64 {
        self.initial_kl() / self.final_loss.kl_term
    }
}

/// Mean teacher probability of each class on `per_class` forged features.
pub fn forged_confidence(g: &GeneratorModel, teacher: &HeadModel, per_class: usize, rng: &mut impl Rng) -> Result<ForgedConfidence> {
    let batch = forge_batch(g, per_class, rng)?;
    let (logits, _) = infer(teacher, &batch)?;
    let c = teacher.num_classes();
    let probs = Tensor::new(vec![batch.len(), c], logits)?.softmax()?;
    let mut per = vec![0.0; g.num_classes()];
    for (row, &l) in probs.data().chunks_exact(c).zip(&batch.labels) {
        per[l] += row[l] / per_class as f64;
    }
    Ok(ForgedConfidence {
        mean: per.iter().sum::<f64>() / per.len() as f64,
        min: per.iter().copied().fold(f64::INFINITY, f64::min),
        per_class: per,
    })
}

/// Rescales all gradients of `model` so their joint L2 norm is at most
/// `max_norm` (no-op when `max_norm` is 0). Returns the norm before clipping.
pub fn clip_grad_norm(model: &impl Parameterized, max_norm: f64) -> Result<f64> {
    let params = model.named_params();
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in &params {
            if let Some(g) = p.grad() {
                p.set_grad(Some(g.into_iter().map(|x| x * s).collect()))?;
            }
        }
    }
    Ok(norm)
}

/// Stage I: trains a generator against the frozen teacher and the snapshot.
pub fn train_generator(
    snapshot: &StatsSnapshot,
    teacher: &HeadModel,
    mut generator: GeneratorModel,
    stats: &StatsConfig,
    cfg: &GenTrainConfig,
    rng: &mut impl Rng,
) -> Result<GeneratorRun> {
    let teacher = teacher.frozen();
    let objective = GeneratorObjective::new(snapshot, &teacher, cfg.lambda_kl, stats.kl_post_softmax)?;
    let mut opt = Sgd::new(cfg.optimizer.sgd())?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        generator.zero_grad();
        let b = objective.step(&generator, rng, cfg.n_per_class, true)?;
        if !b.total.is_finite() {
            return Err(NiffError::Diverged {
                iteration: it,
                last_good: it.checked_sub(1),
            });
        }
        curve.push(b);
        clip_grad_norm(&generator, cfg.max_grad_norm)?;
        opt.step(&mut generator.params_mut())?;
    }
    generator.clear_grads();
    let generator = generator.frozen();
    let final_loss = objective.step(&generator, rng, cfg.n_per_class, false)?;
    if !final_loss.total.is_finite() {
        return Err(NiffError::Diverged {
            iteration: cfg.iterations,
            last_good: cfg.iterations.checked_sub(1),
        });
    }
    let confidence = forged_confidence(&generator, &teacher, cfg.probe_per_class, rng)?;
    Ok(GeneratorRun {
        generator,
        curve,
        final_loss,
        confidence,
    })
}

/// Exactly `k` forged features for every base class, from fresh noise.
pub fn forge_batch(g: &GeneratorModel, k: usize, rng: &mut impl Rng) -> Result<LabeledBatch> {
    if k == 0 {
        return Err(NiffError::Contract("forge at least one feature per class".into()));
    }
    let g = g.frozen();
    let mut feats = Vec::with_capacity(g.num_classes());
    let mut labels = Vec::with_capacity(g.num_classes() * k);
    for c in 0..g.num_classes() {
        let z = sample_noise(rng, k, g.spec().z_dim)?;
        feats.push(g.forward(c, &z)?);
        labels.extend(std::iter::repeat_n(c, k));
    }
    LabeledBatch::new(Tensor::concat_rows(&feats)?, labels, Vec::new())
}

/// Merges the gradients of the replay part and the novel part of the loss
/// into the gradients that are applied. One entry per parameter.
pub trait GradientCombiner: Sync {
    fn combine(&self, replay: Vec<Vec<f64>>, novel: Vec<Vec<f64>>) -> Vec<Vec<f64>>;
}

/// Applies the plain sum, as if both parts were one loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct SumCombiner;

impl GradientCombiner for SumCombiner {
    fn combine(&self, mut replay: Vec<Vec<f64>>, novel: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for (r, n) in replay.iter_mut().zip(novel) {
            for (a, b) in r.iter_mut().zip(n) {
                *a += b;
            }
        }
        replay
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub student: HeadModel,
    pub curve: Vec<KdLossBreakdown>,
    /// Penalty value per iteration (zero without a regularizer).
    pub penalty_curve: Vec<f64>,
    /// Forged features replayed per base class over the run.
    pub forged_counts: Vec<usize>,
}

fn take_grads(model: &HeadModel) -> Vec<Vec<f64>> {
    model
        .named_params()
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

/// Stage II: finetunes the student on the fixed novel shots while replaying
/// forged base features (when a generator is given) under the configured
/// losses and Fisher penalty.
pub fn novel_finetune(
    student: HeadModel,
    teacher: &HeadModel,
    generator: Option<&GeneratorModel>,
    novel: &LabeledBatch,
    fisher: Option<&FisherInfo>,
    cfg: &FinetuneConfig,
    combiner: &dyn GradientCombiner,
    rng: &mut impl Rng,
) -> Result<FinetuneRun> {
    let teacher = teacher.frozen();
    let mut student = student.with_trainable(true);
    let k = novel.len().div_ceil(student.num_classes() - student.num_base()).max(1);
    let fisher = match (cfg.regularizer.fisher_mode(), fisher) {
        (None, _) => None,
        (Some(mode), Some(f)) => Some(f.with_mode(mode)?),
        (Some(_), None) => {
            return Err(NiffError::Contract("the configured regularizer needs Fisher information".into()));
        }
    };
    let replay = generator.filter(|_| cfg.replay != ReplayMode::None);
    let fixed = match (replay, cfg.replay) {
        (Some(g), ReplayMode::Fixed) => Some(forge_batch(g, k, rng)?),
        _ => None,
    };
    let lr_scales: Vec<f64> = student
        .named_params()
        .iter()
        .map(|(n, _)| if is_novel_param(n) { 1.0 } else { cfg.base_lr_scale })
        .collect();
    let mut opt = Sgd::new(cfg.optimizer.sgd())?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut penalty_curve = Vec::with_capacity(cfg.iterations);
    let mut forged_counts = vec![0; student.num_base()];
    for it in 0..cfg.iterations {
        let forged = match (replay, &fixed) {
            (_, Some(f)) => Some(f.clone()),
            (Some(g), None) => Some(forge_batch(g, k, rng)?),
            (None, _) => None,
        };
        if let Some(f) = &forged {
            for &l in &f.labels {
                forged_counts[l] += 1;
            }
        }
        let loss = novel_loss(&student, &teacher, novel, forged.as_ref(), cfg.lambda_f, cfg.switches)?;
        if !loss.breakdown.total.is_finite() {
            return Err(NiffError::Diverged {
                iteration: it,
                last_good: it.checked_sub(1),
            });
        }
        student.clear_grads();
        if let Some(r) = &loss.replay {
            r.backward()?;
        }
        let g_replay = take_grads(&student);
        student.clear_grads();
        if let Some(n) = &loss.novel {
            n.backward()?;
        }
        let g_novel = take_grads(&student);
        let combined = combiner.combine(g_replay, g_novel);
        for ((_, p), g) in student.named_params().iter().zip(combined) {
            p.set_grad(Some(g))?;
        }
        let penalty = match &fisher {
            Some(f) => {
                let p = ewc_penalty(&student, f, cfg.lambda_ewc)?;
                p.backward()?;
                p.item()?
            }
            None => 0.0,
        };
        curve.push(loss.breakdown);
        penalty_curve.push(penalty);
        opt.step_scaled(&mut student.params_mut(), &lr_scales)?;
    }
    student.clear_grads();
    Ok(FinetuneRun {
        student: student.frozen(),
        curve,
        penalty_curve,
        forged_counts,
    })
}

/// `(|C_b|·base + |C_n|·novel) / (|C_b| + |C_n|)`.
pub fn weighted_overall(num_base: usize, base: f64, num_novel: usize, novel: f64) -> f64 {
    (num_base as f64 * base + num_novel as f64 * novel) / (num_base + num_novel) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_base: usize,
    pub num_novel: usize,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub overall: f64,
    /// Accuracy of every class, base classes first.
    pub per_class_acc: Vec<f64>,
    /// Mean absolute error of the true class's regression outputs.
    pub base_reg_mae: f64,
    pub novel_reg_mae: f64,
    /// Per-iteration finetuning losses, when the model came from a run.
    #[serde(default)]
    pub loss_curve: Vec<KdLossBreakdown>,
}

impl EvalReport {
    /// Re-derives `overall` from the split accuracies.
    pub fn recomputed_overall(&self) -> f64 {
        weighted_overall(self.num_base, self.base_acc, self.num_novel, self.novel_acc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes the loss curve as CSV, one row per iteration.
    pub fn write_curve_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CURVE_HEADER)?;
        for (i, b) in self.loss_curve.iter().enumerate() {
            let terms = [
                b.cls_feat_term,
                b.reg_feat_term,
                b.reg_l1_term,
                b.conf_term,
                b.cls_novel_term,
                b.reg_novel_term,
                b.total,
            ];
            out.write_record(std::iter::once(i.to_string()).chain(terms.iter().map(f64::to_string)))?;
        }
        out.flush()?;
        Ok(())
    }
}

const CURVE_HEADER: [&str; 8] = [
    "iteration",
    "cls_feat_term",
    "reg_feat_term",
    "reg_l1_term",
    "conf_term",
    "cls_novel_term",
    "reg_novel_term",
    "total",
];

struct SplitScore {
    per_class: Vec<(usize, usize)>,
    abs_err: f64,
}

fn score(model: &HeadModel, batch: &LabeledBatch) -> Result<SplitScore> {
    let (logits, reg) = infer(model, batch)?;
    let c = model.num_classes();
    let mut per_class = vec![(0, 0); c];
    let mut abs_err = 0.0;
    for (i, &l) in batch.labels.iter().enumerate() {
        if l >= c {
            return Err(NiffError::Contract(format!("label {l} unknown to a model with {c} classes")));
        }
        per_class[l].1 += 1;
        if argmax(&logits[i * c..(i + 1) * c]) == l {
            per_class[l].0 += 1;
        }
        if batch.has_targets() {
            for j in 0..4 {
                abs_err += (reg[i * 4 * c + 4 * l + j] - batch.targets[4 * i + j]).abs();
            }
        }
    }
    Ok(SplitScore {
        per_class,
        abs_err: abs_err / (4 * batch.len()) as f64,
    })
}

/// Accuracy on disjoint base and novel test splits, combined by class count.
pub fn evaluate(model: &HeadModel, base_test: &LabeledBatch, novel_test: &LabeledBatch) -> Result<EvalReport> {
    if base_test.is_empty() || novel_test.is_empty() {
        return Err(NiffError::Contract("evaluation needs non-empty base and novel splits".into()));
    }
    let nb = model.num_base();
    if base_test.labels.iter().any(|&l| l >= nb) || novel_test.labels.iter().any(|&l| l < nb) {
        return Err(NiffError::Contract("base and novel test splits must hold disjoint label ranges".into()));
    }
    let nn = model.num_classes() - nb;
    let base = score(model, base_test)?;
    let novel = score(model, novel_test)?;
    let split_acc = |s: &SplitScore| {
        let (hit, n) = s.per_class.iter().fold((0, 0), |(a, b), (h, m)| (a + h, b + m));
        hit as f64 / n as f64
    };
    let per_class_acc = (0..model.num_classes())
        .map(|c| {
            let (h, n) = if c < nb { base.per_class[c] } else { novel.per_class[c] };
            if n == 0 {
                return Err(NiffError::Contract(format!("class {c} has no test instances")));
            }
            Ok(h as f64 / n as f64)
        })
        .collect::<Result<_>>()?;
    let (base_acc, novel_acc) = (split_acc(&base), split_acc(&novel));
    Ok(EvalReport {
        num_base: nb,
        num_novel: nn,
        base_acc,
        novel_acc,
        overall: weighted_overall(nb, base_acc, nn, novel_acc),
        per_class_acc,
        base_reg_mae: base.abs_err,
        novel_reg_mae: novel.abs_err,
        loss_curve: Vec::new(),
    })
}
