use std::collections::HashMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use niff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::generator::{GeneratorModel, GeneratorSpec};
use super::head::{HeadBlock, HeadModel, HeadSpec};
use super::layers::{Conv2dLayer, FrozenNorm, SplitLinear};
use super::Parameterized;
use crate::binio::{self, truncated};
use crate::error::{NiffError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NIFFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "model checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Head(HeadSpec),
    Generator(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Architecture descriptor plus every array needed to rebuild the model.
///
/// Binary layout (little-endian): magic `NIFFCKPT`, `u32` version, the
/// descriptor as a `u32`-prefixed JSON string, `u32` array count, then per
/// array a `u32`-prefixed name, `u32` rank, `u64` dims and the `f64` data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub architecture: Architecture,
    pub arrays: Vec<NamedArray>,
}

fn array(name: String, t: &Tensor) -> NamedArray {
    NamedArray {
        name,
        shape: t.shape().to_vec(),
        data: t.to_vec(),
    }
}

fn vector(name: String, v: &[f64]) -> NamedArray {
    NamedArray {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

struct Table(HashMap<String, NamedArray>);

impl Table {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let a = self.0.remove(name).ok_or_else(|| NiffError::Format {
            kind: KIND,
            reason: format!("array `{name}` is missing"),
        })?;
        if a.shape != shape {
            return Err(NiffError::Format {
                kind: KIND,
                reason: format!("array `{name}` has shape {:?}, expected {shape:?}", a.shape),
            });
        }
        Ok(a.data)
    }

    fn param(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<Tensor> {
        let data = self.take(name, shape)?;
        Ok(Tensor::new(shape.to_vec(), data)?.with_requires_grad(trainable))
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, trainable: bool) -> Result<Conv2dLayer> {
        Ok(Conv2dLayer {
            weight: self.param(&format!("{prefix}.weight"), &[c_out, c_in, k, k], trainable)?,
            bias: self.param(&format!("{prefix}.bias"), &[c_out], trainable)?,
            padding: (k - 1) / 2,
        })
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(extra) => Err(NiffError::Format {
                kind: KIND,
                reason: format!("unexpected array `{extra}`"),
            }),
        }
    }
}

impl ModelCheckpoint {
    fn table(&self) -> Result<Table> {
        let mut map = HashMap::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("array `{}` data does not fill shape {:?}", a.name, a.shape),
                });
            }
            if map.insert(a.name.clone(), a.clone()).is_some() {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("array `{}` appears twice", a.name),
                });
            }
        }
        Ok(Table(map))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binio::write_str(w, &serde_json::to_string(&self.architecture)?)?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for a in &self.arrays {
            binio::write_str(w, &a.name)?;
            binio::write_shape(w, &a.shape)?;
            binio::write_f64s(w, &a.data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, KIND)?;
        let architecture = serde_json::from_str(&binio::read_str(r, KIND)?).map_err(|e| NiffError::Format {
            kind: KIND,
            reason: format!("bad architecture descriptor: {e}"),
        })?;
        let n = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = binio::read_str(r, KIND)?;
            let shape = binio::read_shape(r, KIND)?;
            let data = binio::read_f64s(r, shape.iter().product(), KIND)?;
            arrays.push(NamedArray { name, shape, data });
        }
        binio::expect_eof(r, KIND)?;
        Ok(Self { architecture, arrays })
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

impl HeadModel {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut arrays: Vec<NamedArray> = self.named_params().into_iter().map(|(n, t)| array(n, t)).collect();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = &b.norm;
            arrays.push(vector(format!("block{i}.norm.scale"), &n.scale));
            arrays.push(vector(format!("block{i}.norm.shift"), &n.shift));
            arrays.push(vector(format!("block{i}.norm.running_mean"), &n.running_mean));
            arrays.push(vector(format!("block{i}.norm.running_var"), &n.running_var));
            arrays.push(vector(format!("block{i}.norm.eps"), &[n.eps]));
        }
        ModelCheckpoint {
            architecture: Architecture::Head(self.spec().clone()),
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, trainable: bool) -> Result<Self> {
        let Architecture::Head(spec) = &ck.architecture else {
            return Err(NiffError::Format {
                kind: KIND,
                reason: "checkpoint holds a generator, not a head".into(),
            });
        };
        spec.validate()?;
        let mut t = ck.table()?;
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        let mut c_in = spec.in_channels;
        for (i, &c) in spec.hidden.iter().enumerate() {
            let conv = t.conv(&format!("block{i}.conv"), c_in, c, spec.kernel, trainable)?;
            let norm = FrozenNorm {
                scale: t.take(&format!("block{i}.norm.scale"), &[c])?,
                shift: t.take(&format!("block{i}.norm.shift"), &[c])?,
                running_mean: t.take(&format!("block{i}.norm.running_mean"), &[c])?,
                running_var: t.take(&format!("block{i}.norm.running_var"), &[c])?,
                eps: t.take(&format!("block{i}.norm.eps"), &[1])?[0],
            };
            blocks.push(HeadBlock { conv, norm });
            c_in = c;
        }
        let d = spec.feature_dim();
        let mut linear = |tag: &str, k: usize| -> Result<SplitLinear> {
            let (rb, rn) = (spec.num_base * k, spec.num_novel * k);
            let novel = if spec.num_novel > 0 {
                Some((
                    t.param(&format!("{tag}.novel.weight"), &[rn, d], trainable)?,
                    t.param(&format!("{tag}.novel.bias"), &[rn], trainable)?,
                ))
            } else {
                None
            };
            Ok(SplitLinear {
                rows_per_class: k,
                base_weight: t.param(&format!("{tag}.base.weight"), &[rb, d], trainable)?,
                base_bias: t.param(&format!("{tag}.base.bias"), &[rb], trainable)?,
                novel,
            })
        };
        let cls = linear("cls", 1)?;
        let reg = linear("reg", 4)?;
        t.finish()?;
        Ok(HeadModel::from_parts(spec.clone(), blocks, cls, reg))
    }
}

impl GeneratorModel {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            architecture: Architecture::Generator(self.spec().clone()),
            arrays: self.named_params().into_iter().map(|(n, t)| array(n, t)).collect(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, trainable: bool) -> Result<Self> {
        let Architecture::Generator(spec) = &ck.architecture else {
            return Err(NiffError::Format {
                kind: KIND,
                reason: "checkpoint holds a head, not a generator".into(),
            });
        };
        spec.validate()?;
        let mut t = ck.table()?;
        let m = spec.linear_out();
        let lw = t.param("linear.weight", &[m, spec.z_dim], trainable)?;
        let lb = t.param("linear.bias", &[m], trainable)?;
        let tc = spec.trunk_channels;
        let trunk = (0..spec.layers)
            .map(|i| t.conv(&format!("trunk{i}"), tc, tc, spec.kernel, trainable))
            .collect::<Result<_>>()?;
        let heads = (0..spec.num_classes)
            .map(|i| t.conv(&format!("head{i}"), tc, spec.out_channels, 1, trainable))
            .collect::<Result<_>>()?;
        t.finish()?;
        Ok(GeneratorModel::from_parts(spec.clone(), lw, lb, trunk, heads))
    }
}
