use niff_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{kaiming_uniform, Conv2dLayer, FrozenNorm, SplitLinear};
use super::Parameterized;
use crate::error::{NiffError, Result};
use crate::stats::{SiteId, WatcherSet};

/// Shape of a teacher/student head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block; the last one is the pooled dim `d`.
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub num_base: usize,
    pub num_novel: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            in_channels: 32,
            height: 5,
            width: 5,
            hidden: vec![32, 64],
            kernel: 1,
            num_base: 8,
            num_novel: 0,
        }
    }
}

impl HeadSpec {
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.in_channels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NiffError::Contract("head needs at least one non-empty conv block".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(NiffError::Contract(format!("head kernel {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 || self.num_base == 0 {
            return Err(NiffError::Contract("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadBlock {
    pub conv: Conv2dLayer,
    pub norm: FrozenNorm,
}

/// Output of one head pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub reg: Tensor,
    /// Pooled representation entering the classifier and regressor (`N×d`).
    pub pooled: Tensor,
    /// Activations at the requested tap sites, each `N×d_site`.
    pub sites: Vec<(SiteId, Tensor)>,
}

impl HeadOutput {
    pub fn site(&self, site: SiteId) -> Option<&Tensor> {
        self.sites.iter().find(|(s, _)| *s == site).map(|(_, t)| t)
    }
}

/// Conv blocks (conv → frozen norm → relu), global pool, then a classifier
/// with one row per class and a regressor with four rows per class.
#[derive(Debug, Clone)]
pub struct HeadModel {
    spec: HeadSpec,
    pub blocks: Vec<HeadBlock>,
    pub cls: SplitLinear,
    pub reg: SplitLinear,
}

impl HeadModel {
    /// Fresh, trainable base-class head (the teacher before base training).
    pub fn build_teacher(spec: &HeadSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut spec = spec.clone();
        spec.num_novel = 0;
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        let mut c_in = spec.in_channels;
        for &c_out in &spec.hidden {
            blocks.push(HeadBlock {
                conv: Conv2dLayer::new(rng, c_in, c_out, spec.kernel)?,
                norm: FrozenNorm::pretrained_like(rng, c_out),
            });
            c_in = c_out;
        }
        let d = spec.feature_dim();
        Ok(Self {
            cls: SplitLinear::new(rng, d, spec.num_base, 1)?,
            reg: SplitLinear::new(rng, d, spec.num_base, 4)?,
            blocks,
            spec,
        })
    }

    /// Copies every parameter into a trainable student and appends rows for
    /// `num_novel` classes: zero classifier rows, Kaiming regressor rows.
    pub fn clone_student(teacher: &HeadModel, num_novel: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut student = teacher.with_trainable(true);
        student.cls.novel = None;
        student.reg.novel = None;
        if num_novel > 0 {
            let d = student.feature_dim();
            student.cls.extend(num_novel, vec![0.0; num_novel * d])?;
            student.reg.extend(num_novel, kaiming_uniform(rng, d, 4 * num_novel * d))?;
        }
        student.spec.num_novel = num_novel;
        Ok(student)
    }

    /// Copy whose parameters carry no gradient tracking.
    pub fn frozen(&self) -> Self {
        self.with_trainable(false)
    }

    pub fn with_trainable(&self, trainable: bool) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            *p = p.detach().with_requires_grad(trainable);
        }
        out
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn num_base(&self) -> usize {
        self.spec.num_base
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Pooled dimension at each site.
    pub fn site_dim(&self, site: SiteId) -> Result<usize> {
        match site {
            SiteId::PreNorm(i) | SiteId::PostAct(i) => self
                .blocks
                .get(i)
                .map(|b| b.conv.out_channels())
                .ok_or_else(|| NiffError::Contract(format!("site {site} is past the last block"))),
            SiteId::PreSoftmax | SiteId::PostSoftmax => Ok(self.num_classes()),
        }
    }

    pub fn forward(&self, x: &Tensor, taps: &[SiteId]) -> Result<HeadOutput> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(NiffError::Dimension(format!(
                "head expects N×{}×H×W input, got {:?}",
                self.spec.in_channels, shape
            )));
        }
        let mut sites = Vec::with_capacity(taps.len());
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let pre = block.conv.forward(&h)?;
            if taps.contains(&SiteId::PreNorm(i)) {
                sites.push((SiteId::PreNorm(i), pre.avg_pool2d()?));
            }
            h = block.norm.forward(&pre)?.relu();
            if taps.contains(&SiteId::PostAct(i)) {
                sites.push((SiteId::PostAct(i), h.avg_pool2d()?));
            }
        }
        let pooled = h.avg_pool2d()?;
        let logits = self.cls.forward(&pooled)?;
        let reg = self.reg.forward(&pooled)?;
        if taps.contains(&SiteId::PreSoftmax) {
            sites.push((SiteId::PreSoftmax, logits.clone()));
        }
        if taps.contains(&SiteId::PostSoftmax) {
            sites.push((SiteId::PostSoftmax, logits.softmax()?));
        }
        // Report sites in the order the caller asked for them.
        sites.sort_by_key(|(s, _)| taps.iter().position(|t| t == s));
        Ok(HeadOutput {
            logits,
            reg,
            pooled,
            sites,
        })
    }

    /// Forward pass that also feeds every watcher its site's activations.
    pub fn forward_observed(&self, x: &Tensor, labels: &[usize], watchers: &mut WatcherSet) -> Result<HeadOutput> {
        let out = self.forward(&x.detach(), &watchers.sites())?;
        for (site, t) in &out.sites {
            watchers.observe_site(*site, t, labels)?;
        }
        Ok(out)
    }

    /// Watcher set matching this head's sites.
    pub fn watchers(&self, sites: &[SiteId], class_wise: bool) -> Result<WatcherSet> {
        let dims: Vec<(SiteId, usize)> = sites
            .iter()
            .map(|&s| Ok((s, self.site_dim(s)?)))
            .collect::<Result<_>>()?;
        WatcherSet::new(&dims, self.num_base(), class_wise)
    }

    pub(crate) fn from_parts(spec: HeadSpec, blocks: Vec<HeadBlock>, cls: SplitLinear, reg: SplitLinear) -> Self {
        Self { spec, blocks, cls, reg }
    }
}

pub fn is_novel_param(name: &str) -> bool {
    name.contains(".novel.")
}

impl Parameterized for HeadModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), &b.conv.weight));
            out.push((format!("block{i}.conv.bias"), &b.conv.bias));
        }
        for (tag, lin) in [("cls", &self.cls), ("reg", &self.reg)] {
            out.push((format!("{tag}.base.weight"), &lin.base_weight));
            out.push((format!("{tag}.base.bias"), &lin.base_bias));
        }
        for (tag, lin) in [("cls", &self.cls), ("reg", &self.reg)] {
            if let Some((w, b)) = &lin.novel {
                out.push((format!("{tag}.novel.weight"), w));
                out.push((format!("{tag}.novel.bias"), b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
        }
        let (cls, reg) = (&mut self.cls, &mut self.reg);
        out.push(&mut cls.base_weight);
        out.push(&mut cls.base_bias);
        out.push(&mut reg.base_weight);
        out.push(&mut reg.base_bias);
        if let Some((w, b)) = &mut cls.novel {
            out.push(w);
            out.push(b);
        }
        if let Some((w, b)) = &mut reg.novel {
            out.push(w);
            out.push(b);
        }
        out
    }
}
