//! Training objectives for both stages.

mod distill;
mod fisher;
mod generator;
mod kl;

use niff_tensor::Tensor;

use crate::error::{NiffError, Result};

pub use distill::{conf_loss, kd_loss, novel_loss, supervised_terms, KdLossBreakdown, LossSwitches, LossValue, NovelLoss};
pub(crate) use distill::supervised_from_output;
pub use fisher::{compute_fisher, ewc_penalty, FisherInfo, FisherLayer, FisherMode, FISHER_MAGIC, FISHER_VERSION};
pub use generator::{GenLossBreakdown, GeneratorObjective};
pub use kl::{batch_moments, kl_gaussian_diag, kl_gaussian_diag_tensor, KL_EPS};

pub(crate) fn zero() -> Tensor {
    Tensor::scalar(0.0)
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, c] = *logits.shape() else {
        return Err(NiffError::Dimension(format!("cross-entropy needs N×C logits, got {:?}", logits.shape())));
    };
    if n != labels.len() || n == 0 {
        return Err(NiffError::Dimension(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(NiffError::Contract(format!("label {l} out of range for {c} classes")));
    }
    Ok(logits.log_softmax()?.gather_cols(labels, 1)?.sum().mul_scalar(-1.0 / n as f64))
}

/// The four regression outputs of each row's own class: `N×4`.
pub(crate) fn class_rows(reg: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<usize> = labels.iter().flat_map(|&c| 4 * c..4 * c + 4).collect();
    Ok(reg.gather_cols(&idx, 4)?)
}
