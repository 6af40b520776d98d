use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use niff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::distill::supervised_terms;
use super::zero;
use crate::batch::LabeledBatch;
use crate::binio::{self, truncated};
use crate::error::{NiffError, Result};
use crate::models::{is_novel_param, HeadModel, Parameterized};

pub const FISHER_MAGIC: &[u8; 8] = b"NIFFFISH";
pub const FISHER_VERSION: u32 = 1;
const KIND: &str = "fisher";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMode {
    /// One importance value per parameter (EWC).
    Full,
    /// One importance value per parameter tensor (mEWC).
    LayerMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherLayer {
    pub name: String,
    pub shape: Vec<usize>,
    /// Per-parameter values, or a single value in layer-mean mode.
    pub values: Vec<f64>,
    /// Parameter values at base convergence.
    pub anchor: Vec<f64>,
}

/// Diagonal Fisher information of the base model and its anchor point.
///
/// Binary layout (little-endian): magic `NIFFFISH`, `u32` version, `u32`
/// mode (0 full, 1 layer-mean), `u32` layer count, then per layer a
/// `u32`-prefixed name, `u32` rank, `u64` dims, `u64` value count, the values
/// and the anchor as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub mode: FisherMode,
    pub layers: Vec<FisherLayer>,
}

impl FisherInfo {
    /// Number of stored importance values.
    pub fn storage_len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&FisherLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Collapses each layer to the mean of its values.
    pub fn to_layer_mean(&self) -> Self {
        Self {
            mode: FisherMode::LayerMean,
            layers: self
                .layers
                .iter()
                .map(|l| FisherLayer {
                    values: vec![l.values.iter().sum::<f64>() / l.values.len().max(1) as f64],
                    ..l.clone()
                })
                .collect(),
        }
    }

    pub fn with_mode(&self, mode: FisherMode) -> Result<Self> {
        match (self.mode, mode) {
            (a, b) if a == b => Ok(self.clone()),
            (FisherMode::Full, FisherMode::LayerMean) => Ok(self.to_layer_mean()),
            _ => Err(NiffError::Contract("a layer-mean Fisher cannot be expanded to full".into())),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w, FISHER_MAGIC, FISHER_VERSION)?;
        w.write_u32::<LittleEndian>(match self.mode {
            FisherMode::Full => 0,
            FisherMode::LayerMean => 1,
        })?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for l in &self.layers {
            binio::write_str(w, &l.name)?;
            binio::write_shape(w, &l.shape)?;
            w.write_u64::<LittleEndian>(l.values.len() as u64)?;
            binio::write_f64s(w, &l.values)?;
            binio::write_f64s(w, &l.anchor)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r, FISHER_MAGIC, FISHER_VERSION, KIND)?;
        let mode = match r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? {
            0 => FisherMode::Full,
            1 => FisherMode::LayerMean,
            m => {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("unknown mode {m}"),
                })
            }
        };
        let n = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
        let mut layers = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = binio::read_str(r, KIND)?;
            let shape = binio::read_shape(r, KIND)?;
            let numel: usize = shape.iter().product();
            let n_values = r.read_u64::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
            let expected = match mode {
                FisherMode::Full => numel,
                FisherMode::LayerMean => 1,
            };
            if n_values != expected {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("layer `{name}` stores {n_values} values, expected {expected}"),
                });
            }
            let values = binio::read_f64s(r, n_values, KIND)?;
            let anchor = binio::read_f64s(r, numel, KIND)?;
            layers.push(FisherLayer {
                name,
                shape,
                values,
                anchor,
            });
        }
        binio::expect_eof(r, KIND)?;
        Ok(Self { mode, layers })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut Cursor::new(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Mean over the stream of each sample's squared gradient of the training
/// loss (classification CE + regression smooth-L1), anchored at the model's
/// current parameters. Novel-class rows are skipped.
pub fn compute_fisher(model: &HeadModel, stream: &LabeledBatch, mode: FisherMode) -> Result<FisherInfo> {
    if stream.is_empty() {
        return Err(NiffError::Contract("Fisher needs a non-empty data stream".into()));
    }
    let m = model.with_trainable(true);
    let params: Vec<(String, Tensor)> = m
        .named_params()
        .into_iter()
        .filter(|(n, _)| !is_novel_param(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut sums: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
    for i in 0..stream.len() {
        m.clear_grads();
        let (ce, reg) = supervised_terms(&m, &stream.select(&[i])?)?;
        ce.add(&reg)?.backward()?;
        for ((_, p), acc) in params.iter().zip(&mut sums) {
            if let Some(g) = p.grad() {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi * gi;
                }
            }
        }
    }
    m.clear_grads();
    let inv = 1.0 / stream.len() as f64;
    let full = FisherInfo {
        mode: FisherMode::Full,
        layers: params
            .into_iter()
            .zip(sums)
            .map(|((name, p), s)| FisherLayer {
                name,
                shape: p.shape().to_vec(),
                values: s.into_iter().map(|v| v * inv).collect(),
                anchor: p.to_vec(),
            })
            .collect(),
    };
    full.with_mode(mode)
}

/// `λ · Σ_i F_i (θ_i − θ*_i)²` over the model's base parameters.
pub fn ewc_penalty(model: &HeadModel, fisher: &FisherInfo, lambda_ewc: f64) -> Result<Tensor> {
    if !(lambda_ewc >= 0.0) {
        return Err(NiffError::Contract(format!("λ_EWC must be nonnegative, got {lambda_ewc}")));
    }
    let mut total = zero();
    for (name, p) in model.named_params() {
        if is_novel_param(&name) {
            continue;
        }
        let layer = fisher
            .layer(&name)
            .ok_or_else(|| NiffError::Contract(format!("Fisher has no entry for parameter `{name}`")))?;
        if layer.shape != p.shape() || layer.anchor.len() != p.numel() {
            return Err(NiffError::Contract(format!(
                "parameter `{name}` has shape {:?}, Fisher anchor has {:?}",
                p.shape(),
                layer.shape
            )));
        }
        let drift2 = p.sub(&Tensor::new(layer.shape.clone(), layer.anchor.clone())?)?.square();
        let term = match fisher.mode {
            FisherMode::Full => drift2.mul(&Tensor::new(layer.shape.clone(), layer.values.clone())?)?.sum(),
            FisherMode::LayerMean => drift2.sum().mul_scalar(layer.values[0]),
        };
        total = total.add(&term)?;
    }
    Ok(total.mul_scalar(lambda_ewc))
}
