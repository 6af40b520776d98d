//! Teacher/student head, the feature generator, and their checkpoint format.

mod checkpoint;
mod generator;
mod head;
mod layers;

use niff_tensor::Tensor;

pub use checkpoint::{Architecture, ModelCheckpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generator::{sample_noise, GeneratorModel, GeneratorSpec};
pub use head::{is_novel_param, HeadBlock, HeadModel, HeadOutput, HeadSpec};
pub use layers::{Conv2dLayer, FrozenNorm, SplitLinear};

/// Uniform access to a model's trainable tensors.
///
/// `named_params` and `params_mut` list the same tensors in the same order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Zeroes every trainable gradient, allocating buffers that are missing so
    /// that parameters untouched by a loss still step cleanly.
    fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            if p.requires_grad() {
                p.set_grad(Some(vec![0.0; p.numel()])).expect("matching length");
            }
        }
    }

    /// Drops every stored gradient buffer.
    fn clear_grads(&self) {
        for (_, p) in self.named_params() {
            let _ = p.set_grad(None);
        }
    }

    fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }
}
