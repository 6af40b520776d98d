//! Data-free feature forging for generalized few-shot learning.
//!
//! Base training records per-class activation statistics in a frozen head;
//! a small generator learns to forge features matching them; novel-class
//! finetuning replays forged features with distillation and Fisher
//! regularization so base classes are not forgotten.

mod batch;
mod binio;
pub mod error;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod stats;

pub use error::{NiffError, Result};
pub use batch::LabeledBatch;
