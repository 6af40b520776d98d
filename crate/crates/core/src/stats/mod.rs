//! Data watchers: per-class running means and corrected variances of
//! spatially pooled activations.

mod snapshot;

use std::fmt;
use std::str::FromStr;

use niff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, NiffError, Result};

pub use snapshot::{SiteStats, StatsSnapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

/// Mean, Bessel-corrected variance and count of one class at one site.
///
/// With fewer than two samples the variance is undefined and stored as zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl ClassMoments {
    pub fn empty(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn single(sample: &[f64]) -> Self {
        Self {
            mean: sample.to_vec(),
            var: vec![0.0; sample.len()],
            count: 1,
        }
    }

    /// Two-pass mean and corrected variance of a batch of rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Self {
        let n = rows.len();
        if n == 0 {
            return Self::empty(dim);
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r.as_ref()).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        if n > 1 {
            for r in rows {
                var.iter_mut()
                    .zip(r.as_ref())
                    .zip(&mean)
                    .for_each(|((v, x), m)| *v += (x - m) * (x - m));
            }
            var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        }
        Self {
            mean,
            var,
            count: n as u64,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Combined mean and corrected variance of two sample sets.
///
/// `μ = (nₐμₐ + n_bμ_b)/n`,
/// `σ² = [(nₐ−1)σₐ² + (n_b−1)σ_b²]/(n−1) + nₐn_b(μ_b−μₐ)²/(n(n−1))`, `n = nₐ+n_b`.
/// An empty side is the identity.
pub fn merge_stats(a: &ClassMoments, b: &ClassMoments) -> Result<ClassMoments> {
    if a.dim() != b.dim() || a.var.len() != a.dim() || b.var.len() != b.dim() {
        return Err(NiffError::Dimension(format!(
            "merge_stats: dimensions {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    match (a.count, b.count) {
        (0, 0) => return contract("merge_stats: both operands are empty"),
        (0, _) => return Ok(b.clone()),
        (_, 0) => return Ok(a.clone()),
        _ => {}
    }
    let (na, nb) = (a.count as f64, b.count as f64);
    let n = na + nb;
    let mean = a
        .mean
        .iter()
        .zip(&b.mean)
        // Same value as (nₐμₐ + n_bμ_b)/n, but exact when the means agree.
        .map(|(ma, mb)| ma + (nb / n) * (mb - ma))
        .collect();
    let var = a
        .var
        .iter()
        .zip(&b.var)
        .zip(a.mean.iter().zip(&b.mean))
        .map(|((va, vb), (ma, mb))| {
            let within = ((na - 1.0) * va + (nb - 1.0) * vb) / (n - 1.0);
            let between = na * nb * (mb - ma) * (mb - ma) / (n * (n - 1.0));
            within + between
        })
        .collect();
    Ok(ClassMoments {
        mean,
        var,
        count: a.count + b.count,
    })
}

/// Spatial mean per channel of a `C×H×W` map; a 1-d vector passes through.
pub fn pool_instance(feature_map: &Tensor) -> Result<Vec<f64>> {
    match *feature_map.shape() {
        [_] => Ok(feature_map.to_vec()),
        [c, h, w] if h >= 1 && w >= 1 => {
            let area = h * w;
            Ok(feature_map
                .data()
                .chunks_exact(area)
                .take(c)
                .map(|p| p.iter().sum::<f64>() / area as f64)
                .collect())
        }
        ref s => Err(NiffError::Dimension(format!(
            "pool_instance: expected C×H×W or a vector, got {s:?}"
        ))),
    }
}

/// Where in the head a watcher sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteId {
    /// Conv output of block `i`, before its frozen normalization.
    PreNorm(usize),
    /// Block `i` output after the activation.
    PostAct(usize),
    PreSoftmax,
    PostSoftmax,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::PreNorm(i) => write!(f, "pre_norm.{i}"),
            SiteId::PostAct(i) => write!(f, "post_act.{i}"),
            SiteId::PreSoftmax => f.write_str("pre_softmax"),
            SiteId::PostSoftmax => f.write_str("post_softmax"),
        }
    }
}

impl FromStr for SiteId {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NiffError::Format {
            kind: "site id",
            reason: format!("unknown site `{s}`"),
        };
        match s {
            "pre_softmax" => Ok(SiteId::PreSoftmax),
            "post_softmax" => Ok(SiteId::PostSoftmax),
            _ => {
                let (kind, idx) = s.split_once('.').ok_or_else(bad)?;
                let idx: usize = idx.parse().map_err(|_| bad())?;
                match kind {
                    "pre_norm" => Ok(SiteId::PreNorm(idx)),
                    "post_act" => Ok(SiteId::PostAct(idx)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl Serialize for SiteId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which conv-block sites get watchers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    PostActivation,
    PreNorm,
    Both,
}

/// Full set of tap sites to instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePlacement {
    pub blocks: Placement,
    pub softmax: bool,
}

impl Default for SitePlacement {
    fn default() -> Self {
        Self {
            blocks: Placement::Both,
            softmax: true,
        }
    }
}

impl SitePlacement {
    /// Sites in forward order for a head with `num_blocks` conv blocks.
    pub fn sites(&self, num_blocks: usize) -> Vec<SiteId> {
        let mut out = Vec::new();
        for i in 0..num_blocks {
            if matches!(self.blocks, Placement::PreNorm | Placement::Both) {
                out.push(SiteId::PreNorm(i));
            }
            if matches!(self.blocks, Placement::PostActivation | Placement::Both) {
                out.push(SiteId::PostAct(i));
            }
        }
        if self.softmax {
            out.push(SiteId::PreSoftmax);
            out.push(SiteId::PostSoftmax);
        }
        out
    }
}

/// Per-class streaming statistics for a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningClassStats {
    dim: usize,
    classes: Vec<ClassMoments>,
}

impl RunningClassStats {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            classes: vec![ClassMoments::empty(dim); num_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> Option<&ClassMoments> {
        self.classes.get(c)
    }

    pub fn classes(&self) -> &[ClassMoments] {
        &self.classes
    }

    /// Absorbs one sample as a single-element batch.
    pub fn observe(&mut self, sample: &[f64], class_label: usize) -> Result<()> {
        self.absorb(&ClassMoments::single(sample), class_label)
    }

    /// Merges a whole batch of class statistics.
    pub fn absorb(&mut self, batch: &ClassMoments, class_label: usize) -> Result<()> {
        let k = self.classes.len();
        let Some(slot) = self.classes.get_mut(class_label) else {
            return contract(format!("class label {class_label} out of range 0..{k}"));
        };
        if batch.dim() != self.dim {
            return Err(NiffError::Dimension(format!(
                "sample of length {} for a watcher of dimension {}",
                batch.dim(),
                self.dim
            )));
        }
        if batch.count == 0 {
            return Ok(());
        }
        *slot = merge_stats(slot, batch)?;
        Ok(())
    }
}

/// One tap site and its running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWatcher {
    pub site: SiteId,
    pub stats: RunningClassStats,
}

impl DataWatcher {
    pub fn new(site: SiteId, num_classes: usize, dim: usize) -> Self {
        Self {
            site,
            stats: RunningClassStats::new(num_classes, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn observe(&mut self, pooled: &[f64], class_label: usize) -> Result<()> {
        self.stats.observe(pooled, class_label)
    }
}

/// The watchers instrumenting one head.
///
/// In class-agnostic mode every label is folded into a single statistics
/// slot; labels are still range-checked against the real class count.
#[derive(Debug, Clone, PartialEq)]
pub struct WatcherSet {
    watchers: Vec<DataWatcher>,
    num_classes: usize,
    class_wise: bool,
}

impl WatcherSet {
    /// `sites` pairs each site with its pooled dimension.
    pub fn new(sites: &[(SiteId, usize)], num_classes: usize, class_wise: bool) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (s, _) in sites {
            if !seen.insert(*s) {
                return contract(format!("site {s} appears twice"));
            }
        }
        let slots = if class_wise { num_classes } else { 1 };
        Ok(Self {
            watchers: sites.iter().map(|&(s, d)| DataWatcher::new(s, slots, d)).collect(),
            num_classes,
            class_wise,
        })
    }

    pub fn watchers(&self) -> &[DataWatcher] {
        &self.watchers
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.watchers.iter().map(|w| w.site).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_wise(&self) -> bool {
        self.class_wise
    }

    fn slot(&self, label: usize) -> Result<usize> {
        if label >= self.num_classes {
            return contract(format!("class label {label} out of range 0..{}", self.num_classes));
        }
        Ok(if self.class_wise { label } else { 0 })
    }

    /// Feeds pooled `N×d` activations, one labelled row per instance.
    pub fn observe_site(&mut self, site: SiteId, pooled: &Tensor, labels: &[usize]) -> Result<()> {
        let slots: Vec<usize> = labels.iter().map(|&l| self.slot(l)).collect::<Result<_>>()?;
        let w = self
            .watchers
            .iter_mut()
            .find(|w| w.site == site)
            .ok_or_else(|| NiffError::Contract(format!("no watcher at site {site}")))?;
        let [n, d] = *pooled.shape() else {
            return Err(NiffError::Dimension(format!(
                "site {site}: expected pooled N×d activations, got {:?}",
                pooled.shape()
            )));
        };
        if n != labels.len() {
            return Err(NiffError::Dimension(format!("site {site}: {n} rows but {} labels", labels.len())));
        }
        for (row, slot) in pooled.data().chunks_exact(d).zip(slots) {
            w.observe(row, slot)?;
        }
        Ok(())
    }

    /// Immutable copy of the current statistics; every slot needs ≥ 2 samples.
    pub fn snapshot(&self) -> Result<StatsSnapshot> {
        StatsSnapshot::from_watchers(self)
    }
}
