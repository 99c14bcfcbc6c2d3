//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators for one parameter tensor.
///
/// `updates` counts the updates this tensor received and drives its bias
/// correction, so groups that sit out alternate steps are corrected for the
/// number of updates they actually saw.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    slots: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", config.lr)));
        }
        Ok(Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        slots: BTreeMap<String, Moments<T>>,
    ) -> Result<Self> {
        let mut opt = Self::new(config)?;
        opt.step = step;
        opt.slots = slots;
        Ok(opt)
    }

    /// Number of completed `step` calls.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &BTreeMap<String, Moments<T>> {
        &self.slots
    }

    /// Same state with the moments converted to `U`.
    pub fn cast<U: Real>(&self) -> AdamW<U> {
        let conv = |xs: &[T]| xs.iter().map(|x| U::lit(x.as_f64())).collect();
        AdamW {
            config: self.config,
            step: self.step,
            slots: self
                .slots
                .iter()
                .map(|(k, s)| {
                    let m = Moments {
                        m: conv(&s.m),
                        v: conv(&s.v),
                        updates: s.updates,
                    };
                    (k.clone(), m)
                })
                .collect(),
        }
    }

    /// Updates every parameter holding a gradient, then clears all gradients.
    ///
    /// Gradients are validated before anything is modified: a non-finite
    /// entry aborts the step with the store unchanged.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<usize> {
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.len() != t.numel() {
                    return Err(Error::shape(
                        "adamw",
                        format!("{name}: grad length {} vs {:?}", g.len(), t.shape()),
                    ));
                }
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
                }
            }
        }

        let c = self.config;
        let lr = T::lit(c.lr);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let mut updated = 0;
        for (name, t) in params.iter_mut() {
            let Some(g) = t.grad.take() else { continue };
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![T::zero(); g.len()],
                    v: vec![T::zero(); g.len()],
                    updates: 0,
                });
            if slot.m.len() != g.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: moment length {} vs grad {}", slot.m.len(), g.len()),
                ));
            }
            slot.updates += 1;
            let bc1 = T::lit(1.0 - c.beta1.powi(slot.updates as i32));
            let bc2 = T::lit(1.0 - c.beta2.powi(slot.updates as i32));
            let p = t.data_mut();
            for i in 0..g.len() {
                p[i] *= decay;
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            updated += 1;
        }
        params.zero_grad();
        self.step += 1;
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::from_f64(vec![1], &[p]).unwrap();
        t.grad = Some(vec![g]);
        s.insert("p", t).unwrap();
        s
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = store(0.7, 0.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let mut s = store(1.0, 1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut s).unwrap();
        let p = s.get("p").unwrap().data()[0];
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p}");
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only() {
        let mut s = store(1.0, 0.0);
        let mut opt = AdamW::new(cfg(0.1, 0.01)).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_aborts_without_touching_params() {
        let mut s = store(1.0, f64::NAN);
        let mut opt = AdamW::new(cfg(0.1, 0.01)).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::NonFinite(_))));
        assert_eq!(s.get("p").unwrap().data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn step_counter_and_untouched_params() {
        let mut s = store(1.0, 0.5);
        s.insert("frozen", Tensor::from_f64(vec![1], &[2.0]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(cfg(0.1, 0.01)).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(opt.steps(), 1);
        opt.step(&mut s).unwrap();
        assert_eq!(opt.steps(), 2);
        assert_eq!(s.get("frozen").unwrap().data(), &[2.0]);
        assert_eq!(opt.slots()["p"].updates, 1);
        assert!(!opt.slots().contains_key("frozen"));
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(AdamW::<f64>::new(cfg(0.0, 0.0)).is_err());
    }
}
