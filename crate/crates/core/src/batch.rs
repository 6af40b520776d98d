use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use niff_tensor::Tensor;

use crate::binio::{self, truncated};
use crate::error::{NiffError, Result};

pub const DATA_MAGIC: &[u8; 8] = b"NIFFDATA";
pub const DATA_VERSION: u32 = 1;
const KIND: &str = "labelled data";

/// Instance features with class labels and 4-d regression targets.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// `N×C×H×W`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `N×4`, row-major. Empty for forged batches, which carry no targets.
    pub targets: Vec<f64>,
}

impl LabeledBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, targets: Vec<f64>) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if features.rank() != 4 || n != labels.len() {
            return Err(NiffError::Dimension(format!(
                "batch of {} labels needs N×C×H×W features with N = {}, got {:?}",
                labels.len(),
                labels.len(),
                features.shape()
            )));
        }
        if !targets.is_empty() && targets.len() != 4 * n {
            return Err(NiffError::Dimension(format!("{n} instances need {} targets, got {}", 4 * n, targets.len())));
        }
        Ok(Self {
            features,
            labels,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        !self.targets.is_empty()
    }

    /// Per-instance feature size `C·H·W`.
    pub fn instance_size(&self) -> usize {
        self.features.shape()[1..].iter().product()
    }

    pub fn target_tensor(&self) -> Result<Tensor> {
        if !self.has_targets() {
            return Err(NiffError::Contract("batch carries no regression targets".into()));
        }
        Ok(Tensor::new(vec![self.len(), 4], self.targets.clone())?)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let m = self.instance_size();
        let data = self.features.data();
        let mut feats = Vec::with_capacity(indices.len() * m);
        let mut labels = Vec::with_capacity(indices.len());
        let mut targets = Vec::new();
        for &i in indices {
            if i >= self.len() {
                return Err(NiffError::Contract(format!("row {i} out of range for batch of {}", self.len())));
            }
            feats.extend_from_slice(&data[i * m..(i + 1) * m]);
            labels.push(self.labels[i]);
            if self.has_targets() {
                targets.extend_from_slice(&self.targets[4 * i..4 * i + 4]);
            }
        }
        let mut shape = self.features.shape().to_vec();
        shape[0] = indices.len();
        Self::new(Tensor::new(shape, feats)?, labels, targets)
    }

    /// Stacks batches with equal instance shapes.
    pub fn concat(parts: &[LabeledBatch]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(NiffError::Contract("nothing to concatenate".into()));
        };
        let with_targets = first.has_targets();
        if parts.iter().any(|p| p.has_targets() != with_targets) {
            return Err(NiffError::Contract("cannot mix batches with and without targets".into()));
        }
        let feats: Vec<Tensor> = parts.iter().map(|p| p.features.clone()).collect();
        Self::new(
            Tensor::concat_rows(&feats)?.detach(),
            parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.targets.iter().copied()).collect(),
        )
    }

    /// Row indices of each label, for labels `0..num_classes`.
    pub fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < num_classes {
                out[l].push(i);
            }
        }
        out
    }

    /// Binary form: header, feature shape, labels, target flag, features, targets.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w, DATA_MAGIC, DATA_VERSION)?;
        binio::write_shape(w, self.features.shape())?;
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
        w.write_u8(self.has_targets() as u8)?;
        binio::write_f64s(w, self.features.data())?;
        binio::write_f64s(w, &self.targets)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r, DATA_MAGIC, DATA_VERSION, KIND)?;
        let shape = binio::read_shape(r, KIND)?;
        if shape.len() != 4 {
            return Err(NiffError::Format {
                kind: KIND,
                reason: format!("feature shape {shape:?} is not N×C×H×W"),
            });
        }
        let n = shape[0];
        let labels = (0..n)
            .map(|_| r.read_u32::<LittleEndian>().map(|l| l as usize).map_err(|e| truncated(KIND, e)))
            .collect::<Result<Vec<_>>>()?;
        let with_targets = match r.read_u8().map_err(|e| truncated(KIND, e))? {
            0 => false,
            1 => true,
            f => {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("bad target flag {f}"),
                })
            }
        };
        let feats = binio::read_f64s(r, shape.iter().product(), KIND)?;
        let targets = binio::read_f64s(r, if with_targets { 4 * n } else { 0 }, KIND)?;
        binio::expect_eof(r, KIND)?;
        Self::new(Tensor::new(shape, feats)?, labels, targets)
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
