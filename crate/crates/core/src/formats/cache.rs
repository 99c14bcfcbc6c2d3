//! Frozen per-image sparse sets and saliency snapshots (SCAC files).

use std::collections::BTreeMap;
use std::path::Path;

use super::binio::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::sparse_attn::budget;

pub const CACHE_MAGIC: &[u8; 4] = b"SCAC";
pub const CACHE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    /// Sorted patch indices.
    pub set: Vec<usize>,
    /// Normalized saliency over all `L` patches.
    pub s_hat: Vec<f32>,
}

/// Sparse sets keyed by dataset index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttnCache {
    pub l: usize,
    pub entries: BTreeMap<usize, CacheEntry>,
}

impl AttnCache {
    pub fn new(l: usize) -> Self {
        Self {
            l,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&CacheEntry> {
        self.entries
            .get(&id)
            .ok_or_else(|| Error::Data(format!("attention cache has no entry for image {id}")))
    }

    /// Checks every set has the size `ρ` implies.
    pub fn check_budget(&self, rho: f64) -> Result<()> {
        let k = budget(self.l, rho)?;
        for (id, e) in &self.entries {
            if e.set.len() != k {
                return Err(Error::Data(format!(
                    "cache entry {id} holds {} patches but rho={rho} implies K={k}",
                    e.set.len()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(CACHE_MAGIC, CACHE_VERSION);
        w.u32(self.entries.len() as u32);
        w.u32(self.l as u32);
        for (&id, e) in &self.entries {
            w.u32(id as u32);
            w.u16(e.set.len() as u16);
            for &j in &e.set {
                w.u16(j as u16);
            }
            w.f32s(e.s_hat.iter().copied());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CACHE_MAGIC, CACHE_VERSION)?;
        let n = r.u32("entry count")? as usize;
        let l = r.u32("patch count")? as usize;
        if l == 0 || l > u16::MAX as usize + 1 {
            return Err(r.invalid("patch count", format!("{l} is out of range")));
        }
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let id = r.u32("image id")? as usize;
            if entries.contains_key(&id) {
                return Err(r.invalid("image id", format!("duplicate entry {id}")));
            }
            let k = r.u16("set size")? as usize;
            if k == 0 || k > l {
                return Err(r.invalid("set size", format!("{k} outside [1, {l}]")));
            }
            let mut set = Vec::with_capacity(k);
            for _ in 0..k {
                let j = r.u16("set index")? as usize;
                if j >= l || set.last().is_some_and(|&p| p >= j) {
                    return Err(r.invalid("set index", format!("{j} is out of range or out of order")));
                }
                set.push(j);
            }
            let s_hat = r.f32s(l, "saliency")?;
            entries.insert(id, CacheEntry { set, s_hat });
        }
        r.finish()?;
        Ok(Self { l, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Format {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AttnCache {
        let mut c = AttnCache::new(4);
        c.entries.insert(
            0,
            CacheEntry {
                set: vec![1, 3],
                s_hat: vec![0.1, 0.4, 0.1, 0.4],
            },
        );
        c.entries.insert(
            5,
            CacheEntry {
                set: vec![0, 2],
                s_hat: vec![0.3, 0.2, 0.3, 0.2],
            },
        );
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let b = c.encode();
        let back = AttnCache::decode(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), b);
        assert!(c.get(5).is_ok());
        assert!(c.get(1).is_err());
        assert!(c.check_budget(0.5).is_ok());
        assert!(c.check_budget(0.25).is_err());
    }

    #[test]
    fn corruption() {
        let b = sample().encode();
        assert!(matches!(
            AttnCache::decode(&b[..b.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = b.clone();
        bad[1] = b'Z';
        assert!(matches!(AttnCache::decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut unordered = b.clone();
        // First entry's indices [1, 3] become [3, 3].
        unordered[20] = 3;
        assert!(matches!(
            AttnCache::decode(&unordered),
            Err(FormatError::Invalid { .. })
        ));
    }
}
