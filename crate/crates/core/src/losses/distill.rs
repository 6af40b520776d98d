use niff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{class_rows, cross_entropy, zero};
use crate::batch::LabeledBatch;
use crate::error::{NiffError, Result};
use crate::models::{HeadModel, HeadOutput};

/// Independent toggles for the replay-side loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub conf: bool,
    pub feat_distill: bool,
    pub reg_l1: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::all_on()
    }
}

impl LossSwitches {
    pub fn all_on() -> Self {
        Self {
            conf: true,
            feat_distill: true,
            reg_l1: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            conf: false,
            feat_distill: false,
            reg_l1: false,
        }
    }

    pub fn any(&self) -> bool {
        self.conf || self.feat_distill || self.reg_l1
    }

    /// All eight on/off combinations, all-on first.
    pub fn matrix() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self {
                conf: m & 1 == 0,
                feat_distill: m & 2 == 0,
                reg_l1: m & 4 == 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let b = |x: bool| if x { "on" } else { "off" };
        format!("conf={} feat={} l1={}", b(self.conf), b(self.feat_distill), b(self.reg_l1))
    }
}

/// Values of every novel-training loss term at one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KdLossBreakdown {
    pub cls_feat_term: f64,
    pub reg_feat_term: f64,
    pub reg_l1_term: f64,
    pub conf_term: f64,
    pub cls_novel_term: f64,
    pub reg_novel_term: f64,
    pub total: f64,
}

impl KdLossBreakdown {
    fn sum_terms(&self) -> f64 {
        self.cls_feat_term + self.reg_feat_term + self.reg_l1_term + self.conf_term + self.cls_novel_term + self.reg_novel_term
    }
}

/// A differentiable loss with its term-by-term values.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: Tensor,
    pub breakdown: KdLossBreakdown,
}

/// Novel-training loss split at the gradient-combiner seam: the replay part
/// (distillation and confidence on forged features) and the novel part
/// (classification and regression on real novel data). Either may be absent.
#[derive(Debug, Clone)]
pub struct NovelLoss {
    pub replay: Option<Tensor>,
    pub novel: Option<Tensor>,
    pub breakdown: KdLossBreakdown,
}

impl NovelLoss {
    /// Sum of both parts as one scalar (zero when both are absent).
    pub fn total(&self) -> Result<Tensor> {
        Ok(match (&self.replay, &self.novel) {
            (Some(a), Some(b)) => a.add(b)?,
            (Some(a), None) | (None, Some(a)) => a.clone(),
            (None, None) => zero(),
        })
    }
}

fn check_base_labels(batch: &LabeledBatch, num_base: usize) -> Result<()> {
    match batch.labels.iter().find(|&&l| l >= num_base) {
        Some(l) => Err(NiffError::Contract(format!("label {l} in forged batch is not a base class"))),
        None => Ok(()),
    }
}

/// Rows of a detached weight block, one per instance, as an `N×d` constant.
fn weight_rows(head: &HeadModel, labels: &[usize], which: WeightRow) -> Result<Tensor> {
    let d = head.feature_dim();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &c in labels {
        let row = match which {
            WeightRow::Cls => head.cls.base_rows(c),
            WeightRow::Reg(j) => &head.reg.base_rows(c)[j * d..(j + 1) * d],
        };
        data.extend_from_slice(row);
    }
    Ok(Tensor::new(vec![labels.len(), d], data)?)
}

#[derive(Clone, Copy)]
enum WeightRow {
    Cls,
    Reg(usize),
}

struct KdTerms {
    cls_feat: Tensor,
    reg_feat: Tensor,
    reg_l1: Tensor,
}

fn kd_terms(teacher_out: &HeadOutput, student_out: &HeadOutput, student: &HeadModel, labels: &[usize], lambda_f: f64) -> Result<KdTerms> {
    let n = labels.len() as f64;
    let diff = teacher_out.pooled.detach().sub(&student_out.pooled)?;
    let cls_feat = diff
        .mul(&weight_rows(student, labels, WeightRow::Cls)?)?
        .square()
        .sum()
        .mul_scalar(lambda_f / n);
    let mut reg_feat = zero();
    for j in 0..4 {
        let w = weight_rows(student, labels, WeightRow::Reg(j))?;
        reg_feat = reg_feat.add(&diff.mul(&w)?.square().sum())?;
    }
    let reg_feat = reg_feat.mul_scalar(lambda_f / (4.0 * n));
    let reg_s = class_rows(&student_out.reg, labels)?;
    let reg_t = class_rows(&teacher_out.reg.detach(), labels)?;
    let reg_l1 = reg_t.sub(&reg_s)?.abs().sum().mul_scalar(1.0 / n);
    Ok(KdTerms {
        cls_feat,
        reg_feat,
        reg_l1,
    })
}

fn forward_pair(teacher: &HeadModel, student: &HeadModel, forged: &LabeledBatch) -> Result<(HeadOutput, HeadOutput)> {
    check_base_labels(forged, teacher.num_base())?;
    let x = forged.features.detach();
    Ok((teacher.forward(&x, &[])?, student.forward(&x, &[])?))
}

/// Weighted feature distillation on pooled features plus L1 distillation of
/// the class's regression outputs. Weight rows come from the student's
/// current base rows and are treated as constants.
pub fn kd_loss(teacher: &HeadModel, student: &HeadModel, forged: &LabeledBatch, lambda_f: f64) -> Result<LossValue> {
    if forged.is_empty() {
        return Ok(LossValue {
            total: zero(),
            breakdown: KdLossBreakdown::default(),
        });
    }
    let (t_out, s_out) = forward_pair(teacher, student, forged)?;
    let k = kd_terms(&t_out, &s_out, student, &forged.labels, lambda_f)?;
    let mut breakdown = KdLossBreakdown {
        cls_feat_term: k.cls_feat.item()?,
        reg_feat_term: k.reg_feat.item()?,
        reg_l1_term: k.reg_l1.item()?,
        ..Default::default()
    };
    breakdown.total = breakdown.sum_terms();
    Ok(LossValue {
        total: k.cls_feat.add(&k.reg_feat)?.add(&k.reg_l1)?,
        breakdown,
    })
}

/// Mean cross-entropy of the student's softmax over all classes against the
/// forged features' base labels.
pub fn conf_loss(student: &HeadModel, forged: &LabeledBatch) -> Result<Tensor> {
    if forged.is_empty() {
        return Ok(zero());
    }
    check_base_labels(forged, student.num_base())?;
    let out = student.forward(&forged.features.detach(), &[])?;
    cross_entropy(&out.logits, &forged.labels)
}

/// Classification cross-entropy and smooth-L1 regression (β = 1) on the
/// labelled class's four outputs, for real data with targets.
pub fn supervised_terms(model: &HeadModel, batch: &LabeledBatch) -> Result<(Tensor, Tensor)> {
    let out = model.forward(&batch.features.detach(), &[])?;
    supervised_from_output(&out, batch)
}

pub(crate) fn supervised_from_output(out: &HeadOutput, batch: &LabeledBatch) -> Result<(Tensor, Tensor)> {
    let ce = cross_entropy(&out.logits, &batch.labels)?;
    let reg = class_rows(&out.reg, &batch.labels)?
        .sub(&batch.target_tensor()?)?
        .smooth_l1(1.0)
        .mean()?;
    Ok((ce, reg))
}

/// The full novel-training loss: `ℒ_Cls + ℒ_Reg` on the novel batch plus the
/// enabled distillation and confidence terms on the forged batch.
pub fn novel_loss(
    student: &HeadModel,
    teacher: &HeadModel,
    novel: &LabeledBatch,
    forged: Option<&LabeledBatch>,
    lambda_f: f64,
    switches: LossSwitches,
) -> Result<NovelLoss> {
    let mut b = KdLossBreakdown::default();
    let novel_part = if novel.is_empty() {
        None
    } else {
        let (ce, reg) = supervised_terms(student, novel)?;
        b.cls_novel_term = ce.item()?;
        b.reg_novel_term = reg.item()?;
        Some(ce.add(&reg)?)
    };

    let mut replay_terms: Vec<Tensor> = Vec::new();
    if let Some(forged) = forged.filter(|f| !f.is_empty() && switches.any()) {
        let (t_out, s_out) = forward_pair(teacher, student, forged)?;
        if switches.feat_distill || switches.reg_l1 {
            let k = kd_terms(&t_out, &s_out, student, &forged.labels, lambda_f)?;
            if switches.feat_distill {
                b.cls_feat_term = k.cls_feat.item()?;
                b.reg_feat_term = k.reg_feat.item()?;
                replay_terms.push(k.cls_feat);
                replay_terms.push(k.reg_feat);
            }
            if switches.reg_l1 {
                b.reg_l1_term = k.reg_l1.item()?;
                replay_terms.push(k.reg_l1);
            }
        }
        if switches.conf {
            let conf = cross_entropy(&s_out.logits, &forged.labels)?;
            b.conf_term = conf.item()?;
            replay_terms.push(conf);
        }
    }
    let replay = match replay_terms.split_first() {
        None => None,
        Some((first, rest)) => {
            let mut acc = first.clone();
            for t in rest {
                acc = acc.add(t)?;
            }
            Some(acc)
        }
    };
    b.total = b.sum_terms();
    Ok(NovelLoss {
        replay,
        novel: novel_part,
        breakdown: b,
    })
}
