use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Image;

/// Per-view augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub noise_std: f64,
    /// Intensity factor range `[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Smallest crop side as a fraction of the image; 1 disables cropping.
    pub crop_min: f64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            noise_std: 0.0,
            jitter: 0.0,
            crop_min: 1.0,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            flip_prob: cfg.flip_prob,
            noise_std: cfg.noise_std,
            jitter: cfg.jitter,
            crop_min: cfg.crop_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(self.noise_std >= 0.0)
            || !(0.0..1.0).contains(&self.jitter)
            || !(self.crop_min > 0.0 && self.crop_min <= 1.0)
        {
            return Err(Error::config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Seed for one view: a splitmix64 mix of the base seed, image id, view index and epoch.
pub fn view_seed(base: u64, image: usize, view: usize, epoch: usize) -> u64 {
    let mut z = base;
    for v in [image as u64, view as u64, epoch as u64] {
        z = z.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Bilinear resample of a `ch×cw` window at `(y0, x0)` back to full size.
fn crop_resize(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize) -> Image {
    let (h, w, c) = (img.h, img.w, img.c);
    let mut out = Image::filled(h, w, c, 0.0);
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        let iy1 = (iy + 1).min(ch - 1);
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let ix1 = (ix + 1).min(cw - 1);
            for k in 0..c {
                let p = |yy: usize, xx: usize| img.at(y0 + yy, x0 + xx, k) as f64;
                let top = p(iy, ix) * (1.0 - tx) + p(iy, ix1) * tx;
                let bot = p(iy1, ix) * (1.0 - tx) + p(iy1, ix1) * tx;
                out.set(y, x, k, (top * (1.0 - ty) + bot * ty) as f32);
            }
        }
    }
    out
}

/// One augmented view: patch-aligned crop-resize, horizontal flip,
/// intensity jitter, then additive Gaussian noise.
pub fn augment(image: &Image, spec: &AugmentSpec, patch: usize, seed: u64) -> Result<Image> {
    if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
        return Err(Error::shape(
            "augment",
            format!("{}x{} image is not divisible by patch size {patch}", image.h, image.w),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();

    if spec.crop_min < 1.0 {
        let (gh, gw) = (image.h / patch, image.w / patch);
        let scale = rng.random_range(spec.crop_min..=1.0);
        let ch = ((scale * gh as f64).round() as usize).clamp(1, gh);
        let cw = ((scale * gw as f64).round() as usize).clamp(1, gw);
        let oy = rng.random_range(0..=gh - ch);
        let ox = rng.random_range(0..=gw - cw);
        if ch < gh || cw < gw {
            img = crop_resize(&img, oy * patch, ox * patch, ch * patch, cw * patch);
        }
    }

    if spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob) {
        let (w, c) = (img.w, img.c);
        for row in img.data.chunks_exact_mut(w * c) {
            for x in 0..w / 2 {
                for k in 0..c {
                    row.swap(x * c + k, (w - 1 - x) * c + k);
                }
            }
        }
    }

    if spec.jitter > 0.0 {
        let f = rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter) as f32;
        img.data.iter_mut().for_each(|v| *v *= f);
    }

    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
        img.data
            .iter_mut()
            .for_each(|v| *v += n.sample(&mut rng) as f32);
    }
    Ok(img)
}

/// Two independently augmented views of `image`.
pub fn make_views(image: &Image, spec: &AugmentSpec, patch: usize, seeds: [u64; 2]) -> Result<(Image, Image)> {
    spec.validate()?;
    Ok((
        augment(image, spec, patch, seeds[0])?,
        augment(image, spec, patch, seeds[1])?,
    ))
}
