use niff_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cross_entropy;
use super::kl::{batch_moments, kl_gaussian_diag_tensor, KL_EPS};
use crate::error::{NiffError, Result};
use crate::models::{sample_noise, GeneratorModel, HeadModel};
use crate::stats::{SiteId, StatsSnapshot};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLossBreakdown {
    /// λ_KL-scaled KL, averaged over sites, classes and dimensions.
    pub kl_term: f64,
    pub ce_term: f64,
    pub total: f64,
}

impl GenLossBreakdown {
    fn add(&mut self, kl: f64, ce: f64) {
        self.kl_term += kl;
        self.ce_term += ce;
        self.total = self.kl_term + self.ce_term;
    }
}

/// Statistics-alignment objective for the generator against a frozen head.
///
/// The KL part compares, at every watched site, the head's batch statistics on
/// forged features with the recorded ones; the CE part pushes forged features
/// of class `c` to be classified as `c`.
#[derive(Debug, Clone)]
pub struct GeneratorObjective<'a> {
    snapshot: &'a StatsSnapshot,
    teacher: &'a HeadModel,
    lambda_kl: f64,
    kl_sites: Vec<SiteId>,
}

impl<'a> GeneratorObjective<'a> {
    /// `include_post_softmax = false` keeps the probability site out of the KL.
    pub fn new(snapshot: &'a StatsSnapshot, teacher: &'a HeadModel, lambda_kl: f64, include_post_softmax: bool) -> Result<Self> {
        if !(lambda_kl >= 0.0) {
            return Err(NiffError::Contract(format!("λ_KL must be nonnegative, got {lambda_kl}")));
        }
        if snapshot.num_classes != teacher.num_base() {
            return Err(NiffError::Contract(format!(
                "snapshot has {} classes, head has {} base classes",
                snapshot.num_classes,
                teacher.num_base()
            )));
        }
        for s in &snapshot.sites {
            let d = teacher.site_dim(s.site)?;
            if d != s.dim {
                return Err(NiffError::Dimension(format!("site {}: snapshot dim {} but head dim {d}", s.site, s.dim)));
            }
        }
        let kl_sites: Vec<SiteId> = snapshot
            .site_ids()
            .into_iter()
            .filter(|s| include_post_softmax || *s != SiteId::PostSoftmax)
            .collect();
        if kl_sites.is_empty() {
            return Err(NiffError::Contract("no watched sites to align".into()));
        }
        Ok(Self {
            snapshot,
            teacher,
            lambda_kl,
            kl_sites,
        })
    }

    pub fn kl_sites(&self) -> &[SiteId] {
        &self.kl_sites
    }

    fn num_base(&self) -> usize {
        self.snapshot.num_classes
    }

    /// Site-averaged KL (unscaled) between the head's batch stats on `feats`
    /// and the snapshot slot, plus the head's logits.
    fn site_kl(&self, feats: &Tensor, slot: usize) -> Result<(Tensor, Tensor)> {
        let n = feats.shape().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(NiffError::InsufficientBatch(n));
        }
        let out = self.teacher.forward(feats, &self.kl_sites)?;
        let mut parts = Vec::with_capacity(out.sites.len());
        for (site, act) in &out.sites {
            let rec = &self.snapshot.site(*site).expect("site checked at construction").classes[slot];
            let (m, v) = batch_moments(act)?;
            parts.push(kl_gaussian_diag_tensor(&rec.mean, &rec.var, &m, &v, KL_EPS)?);
        }
        let mut kl = parts[0].clone();
        for p in &parts[1..] {
            kl = kl.add(p)?;
        }
        Ok((kl.mul_scalar(1.0 / parts.len() as f64), out.logits))
    }

    /// Class `c`'s share of the loss for forged (or any) features of that
    /// class: `(kl, ce)`, each already divided by `|C_b|` so the shares of
    /// all classes sum to the full objective.
    pub fn class_terms(&self, class: usize, feats: &Tensor) -> Result<(Tensor, Tensor)> {
        if class >= self.num_base() {
            return Err(NiffError::Contract(format!("class {class} is not a base class")));
        }
        let (kl, logits) = self.site_kl(feats, self.snapshot.slot(class))?;
        let ce = cross_entropy(&logits, &vec![class; logits.shape()[0]])?;
        let share = 1.0 / self.num_base() as f64;
        Ok((kl.mul_scalar(self.lambda_kl * share), ce.mul_scalar(share)))
    }

    /// Class-agnostic form: one joint batch against the single pooled slot.
    pub fn joint_terms(&self, feats: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
        if labels.iter().any(|&l| l >= self.num_base()) {
            return Err(NiffError::Contract("joint batch holds a non-base label".into()));
        }
        let (kl, logits) = self.site_kl(feats, 0)?;
        Ok((kl.mul_scalar(self.lambda_kl), cross_entropy(&logits, labels)?))
    }

    /// One accumulation step: forges `n_per_class` features for every class
    /// and, if `backward`, accumulates gradients into the generator.
    ///
    /// With class-wise statistics the classes are processed one after
    /// another, each followed by its own backward pass; with class-agnostic
    /// statistics a single joint batch is formed.
    pub fn step(&self, g: &GeneratorModel, rng: &mut impl Rng, n_per_class: usize, backward: bool) -> Result<GenLossBreakdown> {
        if n_per_class < 2 {
            return Err(NiffError::InsufficientBatch(n_per_class));
        }
        if g.num_classes() != self.num_base() {
            return Err(NiffError::Contract(format!(
                "generator has {} heads for {} base classes",
                g.num_classes(),
                self.num_base()
            )));
        }
        let z_dim = g.spec().z_dim;
        let mut out = GenLossBreakdown::default();
        if self.snapshot.class_wise {
            for c in 0..self.num_base() {
                let z = sample_noise(rng, n_per_class, z_dim)?;
                let (kl, ce) = self.class_terms(c, &g.forward(c, &z)?)?;
                out.add(kl.item()?, ce.item()?);
                if backward {
                    kl.add(&ce)?.backward()?;
                }
            }
        } else {
            let mut feats = Vec::with_capacity(self.num_base());
            let mut labels = Vec::with_capacity(self.num_base() * n_per_class);
            for c in 0..self.num_base() {
                let z = sample_noise(rng, n_per_class, z_dim)?;
                feats.push(g.forward(c, &z)?);
                labels.extend(std::iter::repeat_n(c, n_per_class));
            }
            let (kl, ce) = self.joint_terms(&Tensor::concat_rows(&feats)?, &labels)?;
            out.add(kl.item()?, ce.item()?);
            if backward {
                kl.add(&ce)?.backward()?;
            }
        }
        Ok(out)
    }
}
