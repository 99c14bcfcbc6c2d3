//! Model checkpoints (SCKP files).
//!
//! Layout, little-endian: magic, version u16, config text (u32 length +
//! UTF-8), parameter count u32, then per parameter its name, rank u32, dims
//! u32 each and f32 values. A trailing u8 flags optimizer state: step u64,
//! the five hyperparameters as f64, slot count u32, then per slot name,
//! update count u64, length u32, first and second moments as f32.

use std::collections::BTreeMap;
use std::path::Path;

use super::binio::{Reader, Writer};
use crate::config::{parse_config, RunConfig};
use crate::diffcore::{AdamW, AdamWConfig, Moments, ParamStore, Real, Tensor};
use crate::error::{Error, FormatError, Result};
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    /// Snapshot of a run in any precision; values are stored as `f32`.
    pub fn capture<T: Real>(config: &RunConfig, params: &ModelParams<T>, optimizer: Option<&AdamW<T>>) -> Self {
        Self {
            config: config.clone(),
            params: params.cast(),
            optimizer: optimizer.map(AdamW::cast),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.u32(self.params.store.len() as u32);
        for (name, t) in self.params.store.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data().iter().copied());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.steps());
                let c = opt.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.u64(v.to_bits());
                }
                w.u32(opt.slots().len() as u32);
                for (name, s) in opt.slots() {
                    w.str(name);
                    w.u64(s.updates);
                    w.u32(s.m.len() as u32);
                    w.f32s(s.m.iter().copied());
                    w.f32s(s.v.iter().copied());
                }
            }
        }
        w.buf
    }

    /// Parses and validates every tensor shape against the embedded config.
    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let at = r.offset();
        let text = r.str("config")?;
        let config = parse_config(&text).map_err(|e| FormatError::Invalid {
            offset: at,
            what: "config",
            detail: e.to_string(),
        })?;
        let count = r.u32("parameter count")? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let name = r.str("parameter name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 4 {
                return Err(r.invalid("rank", format!("{rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f32s(n, "parameter values")?;
            let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid {
                offset: at,
                what: "parameter",
                detail: e.to_string(),
            })?;
            store.insert(name.clone(), t).map_err(|e| FormatError::Invalid {
                offset: at,
                what: "parameter",
                detail: e.to_string(),
            })?;
        }
        let end_params = r.offset();
        let params = ModelParams::from_store(config.arch(), store).map_err(|e| FormatError::Invalid {
            offset: end_params,
            what: "parameters",
            detail: e.to_string(),
        })?;

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let mut h = [0f64; 5];
                for v in &mut h {
                    *v = f64::from_bits(r.u64("optimizer hyperparameter")?);
                }
                let cfg = AdamWConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    weight_decay: h[4],
                };
                let n = r.u32("slot count")? as usize;
                let mut slots = BTreeMap::new();
                for _ in 0..n {
                    let name = r.str("slot name")?;
                    let updates = r.u64("slot updates")?;
                    let len = r.u32("slot length")? as usize;
                    let expected = params.store.get(&name).map(Tensor::numel).ok();
                    if expected != Some(len) {
                        return Err(r.invalid("slot", format!("{name} of length {len} matches no parameter")));
                    }
                    let m = r.f32s(len, "first moment")?;
                    let v = r.f32s(len, "second moment")?;
                    slots.insert(name, Moments { m, v, updates });
                }
                let at = r.offset();
                Some(AdamW::from_state(cfg, step, slots).map_err(|e| FormatError::Invalid {
                    offset: at,
                    what: "optimizer",
                    detail: e.to_string(),
                })?)
            }
            f => return Err(r.invalid("optimizer flag", format!("{f}"))),
        };
        r.finish()?;
        Ok(Self {
            config,
            params,
            optimizer,
        })
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
