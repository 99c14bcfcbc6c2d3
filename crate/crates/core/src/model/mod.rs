//! Patch embedder, encoder, saliency predictor and the three heads.

mod forward;
mod patches;

pub use forward::{
    backbone_forward, classifier_forward, embed_patches, encode, first_block_attention, projection_forward,
    recon_forward, saliency_forward, AttentionPlan, Encoded, SelectionSource,
};
pub use patches::{partition_patches, Image, PatchGrid};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// What the saliency predictor reads for each patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SaliencyInput {
    /// Flattened pixels of the patch.
    Raw,
    /// The patch embedding (linear projection plus position), before the encoder.
    #[default]
    Embedded,
}

impl SaliencyInput {
    pub fn as_str(self) -> &'static str {
        match self {
            SaliencyInput::Raw => "raw",
            SaliencyInput::Embedded => "embedded",
        }
    }
}

/// Architecture descriptor; every parameter shape derives from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub patch: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub saliency_hidden: [usize; 2],
    pub saliency_input: SaliencyInput,
    pub d_z: usize,
    pub n_classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 1,
            grid_h: 8,
            grid_w: 8,
            d: 64,
            n_blocks: 2,
            mlp_hidden: 128,
            saliency_hidden: [512, 256],
            saliency_input: SaliencyInput::Embedded,
            d_z: 32,
            n_classes: 2,
        }
    }
}

impl Arch {
    /// Number of patches `L`.
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch, self.channels)
    }

    pub fn saliency_in(&self) -> usize {
        match self.saliency_input {
            SaliencyInput::Raw => self.patch_dim(),
            SaliencyInput::Embedded => self.d,
        }
    }

    /// Every parameter name with its shape, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, pd, l) = (self.d, self.patch_dim(), self.tokens());
        let [h1, h2] = self.saliency_hidden;
        let mut v = vec![
            ("embed.w".into(), vec![pd, d]),
            ("embed.b".into(), vec![1, d]),
            ("embed.pos".into(), vec![l, d]),
            ("saliency.w1".into(), vec![self.saliency_in(), h1]),
            ("saliency.b1".into(), vec![1, h1]),
            ("saliency.w2".into(), vec![h1, h2]),
            ("saliency.b2".into(), vec![1, h2]),
            ("saliency.w3".into(), vec![h2, 1]),
            ("saliency.b3".into(), vec![1, 1]),
            ("proj.w1".into(), vec![d, d]),
            ("proj.w2".into(), vec![d, self.d_z]),
            ("cls.w".into(), vec![d, self.n_classes]),
            ("cls.b".into(), vec![1, self.n_classes]),
            ("recon.w".into(), vec![d, pd]),
            ("recon.b".into(), vec![1, pd]),
        ];
        for i in 0..self.n_blocks {
            let p = |s: &str| format!("block{i}.{s}");
            v.extend([
                (p("ln1.g"), vec![1, d]),
                (p("ln1.b"), vec![1, d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.g"), vec![1, d]),
                (p("ln2.b"), vec![1, d]),
                (p("mlp.w1"), vec![d, self.mlp_hidden]),
                (p("mlp.b1"), vec![1, self.mlp_hidden]),
                (p("mlp.w2"), vec![self.mlp_hidden, d]),
                (p("mlp.b2"), vec![1, d]),
            ]);
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("channels", self.channels),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("d", self.d),
            ("mlp_hidden", self.mlp_hidden),
            ("saliency_hidden[0]", self.saliency_hidden[0]),
            ("saliency_hidden[1]", self.saliency_hidden[1]),
            ("d_z", self.d_z),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        Ok(())
    }
}

/// Parameter groups trained on alternating steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Saliency,
    /// Embedder, encoder blocks and heads.
    Backbone,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name.starts_with("saliency.") {
            Group::Saliency
        } else {
            Group::Backbone
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Saliency => "saliency",
            Group::Backbone => "backbone",
        }
    }
}

/// Named model parameters plus the architecture they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Arch,
    pub store: ParamStore<T>,
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in arch.param_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let t = match leaf.as_bytes()[0] {
                b'g' => Tensor::full(shape, T::one()),
                b'b' => Tensor::zeros(shape),
                _ => Tensor::glorot(shape[0], shape[1], &mut rng),
            };
            store.insert(name, t)?;
        }
        Ok(Self { arch, store })
    }

    /// Wraps an existing store after checking every name and shape.
    pub fn from_store(arch: Arch, store: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if expected.len() != store.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model params",
                    format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { arch, store })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    pub fn set_trainable(&mut self, groups: &[Group]) {
        self.store.set_trainable(|name| groups.contains(&Group::of(name)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_shapes_consistent() {
        let arch = Arch::default();
        let p = ModelParams::<f32>::init(arch.clone(), 7).unwrap();
        assert_eq!(p.store.len(), arch.param_shapes().len());
        assert_eq!(p.store.get("saliency.w1").unwrap().shape(), &[64, 512]);
        assert_eq!(p.store.get("saliency.w2").unwrap().shape(), &[512, 256]);
        assert_eq!(p.store.get("block1.attn.wq").unwrap().shape(), &[64, 64]);
        assert!(ModelParams::from_store(arch, p.store).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(Arch::default(), 1).unwrap();
        let b = ModelParams::<f32>::init(Arch::default(), 1).unwrap();
        let c = ModelParams::<f32>::init(Arch::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn from_store_rejects_mismatch() {
        let p = ModelParams::<f32>::init(Arch::default(), 1).unwrap();
        let other = Arch {
            d: 32,
            ..Arch::default()
        };
        assert!(ModelParams::from_store(other, p.store).is_err());
    }

    #[test]
    fn groups() {
        assert_eq!(Group::of("saliency.w1"), Group::Saliency);
        assert_eq!(Group::of("block0.attn.wq"), Group::Backbone);
        assert_eq!(Group::of("embed.pos"), Group::Backbone);
    }
}
