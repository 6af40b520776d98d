use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ClassMoments, SiteId, WatcherSet};
use crate::binio::{self, truncated};
use crate::error::{NiffError, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"NIFFSTAT";
pub const SNAPSHOT_VERSION: u32 = 1;
const KIND: &str = "stats snapshot";
const FLAG_CLASS_AGNOSTIC: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site: SiteId,
    pub dim: usize,
    /// One entry per class, or a single entry in class-agnostic mode.
    pub classes: Vec<ClassMoments>,
}

/// Frozen per-site, per-class statistics recorded on the base task.
///
/// Binary layout (little-endian): magic `NIFFSTAT`, `u32` version, `u32`
/// base-class count, `u32` flags (bit 0: class-agnostic), `u32` site count,
/// then the site table (`u32`-prefixed utf-8 label, `u32` dim), then for each
/// site and each class a `u64` count followed by `dim` means and `dim`
/// variances as `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub num_classes: usize,
    pub class_wise: bool,
    pub sites: Vec<SiteStats>,
}

impl StatsSnapshot {
    pub(super) fn from_watchers(set: &WatcherSet) -> Result<Self> {
        let mut sites = Vec::with_capacity(set.watchers().len());
        for w in set.watchers() {
            for (c, m) in w.stats.classes().iter().enumerate() {
                if m.count < 2 {
                    return Err(NiffError::InsufficientData {
                        site: w.site.to_string(),
                        class: c,
                        count: m.count,
                    });
                }
            }
            sites.push(SiteStats {
                site: w.site,
                dim: w.dim(),
                classes: w.stats.classes().to_vec(),
            });
        }
        Ok(Self {
            num_classes: set.num_classes(),
            class_wise: set.class_wise(),
            sites,
        })
    }

    pub fn site(&self, site: SiteId) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.site == site)
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.sites.iter().map(|s| s.site).collect()
    }

    /// Statistics slot used for `class` (slot 0 in class-agnostic mode).
    pub fn slot(&self, class: usize) -> usize {
        if self.class_wise {
            class
        } else {
            0
        }
    }

    fn slots(&self) -> usize {
        if self.class_wise {
            self.num_classes
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        for s in &self.sites {
            if s.classes.len() != self.slots() {
                return Err(NiffError::Format {
                    kind: KIND,
                    reason: format!("site {} has {} class entries, expected {}", s.site, s.classes.len(), self.slots()),
                });
            }
            for m in &s.classes {
                if m.mean.len() != s.dim || m.var.len() != s.dim {
                    return Err(NiffError::Format {
                        kind: KIND,
                        reason: format!("site {} has vectors not of length {}", s.site, s.dim),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        binio::write_header(w, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        w.write_u32::<LittleEndian>(if self.class_wise { 0 } else { FLAG_CLASS_AGNOSTIC })?;
        w.write_u32::<LittleEndian>(self.sites.len() as u32)?;
        for s in &self.sites {
            binio::write_str(w, &s.site.to_string())?;
            w.write_u32::<LittleEndian>(s.dim as u32)?;
        }
        for s in &self.sites {
            for m in &s.classes {
                w.write_u64::<LittleEndian>(m.count)?;
                binio::write_f64s(w, &m.mean)?;
                binio::write_f64s(w, &m.var)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, KIND)?;
        let num_classes = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
        let flags = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))?;
        let class_wise = flags & FLAG_CLASS_AGNOSTIC == 0;
        let n_sites = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
        let mut table = Vec::with_capacity(n_sites.min(1024));
        for _ in 0..n_sites {
            let site: SiteId = binio::read_str(r, KIND)?.parse()?;
            let dim = r.read_u32::<LittleEndian>().map_err(|e| truncated(KIND, e))? as usize;
            table.push((site, dim));
        }
        let slots = if class_wise { num_classes } else { 1 };
        let mut sites = Vec::with_capacity(table.len());
        for (site, dim) in table {
            let mut classes = Vec::with_capacity(slots);
            for _ in 0..slots {
                let count = r.read_u64::<LittleEndian>().map_err(|e| truncated(KIND, e))?;
                let mean = binio::read_f64s(r, dim, KIND)?;
                let var = binio::read_f64s(r, dim, KIND)?;
                classes.push(ClassMoments { mean, var, count });
            }
            sites.push(SiteStats { site, dim, classes });
        }
        binio::expect_eof(r, KIND)?;
        Ok(Self {
            num_classes,
            class_wise,
            sites,
        })
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

    /// Lossless JSON text form for inspection.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StatsSnapshot {
        let m = |a: f64| ClassMoments {
            mean: vec![a, -a / 3.0, 1e-300],
            var: vec![a * a, 0.1, f64::MIN_POSITIVE],
            count: 7,
        };
        StatsSnapshot {
            num_classes: 2,
            class_wise: true,
            sites: vec![
                SiteStats { site: SiteId::PreNorm(0), dim: 3, classes: vec![m(0.1), m(1.0 / 7.0)] },
                SiteStats { site: SiteId::PostSoftmax, dim: 3, classes: vec![m(2.5), m(-9.75)] },
            ],
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let s = sample();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..8], SNAPSHOT_MAGIC);
        let back = StatsSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let s = sample();
        assert_eq!(StatsSnapshot::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn rejects_wrong_magic_version_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(StatsSnapshot::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 99;
        assert!(matches!(StatsSnapshot::from_bytes(&bytes), Err(NiffError::Version { .. })));
        bytes[0] = b'X';
        assert!(matches!(StatsSnapshot::from_bytes(&bytes), Err(NiffError::Format { .. })));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(StatsSnapshot::from_bytes(&bytes).is_err());
    }
}
