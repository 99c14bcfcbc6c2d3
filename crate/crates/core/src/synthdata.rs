//! Synthetic "localized anomaly" images and the SCDS dataset file.
//!
//! Every image shares a smooth template background; each adds a small
//! per-image low-frequency component and pixel noise. Label-1 images also
//! carry one Gaussian bright blob whose centre is not grid-aligned.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_kv, KvEntry};
use crate::error::{Error, FormatError, Result};
use crate::formats::binio::{Reader, Writer};
use crate::model::{partition_patches, Image, PatchGrid};

pub const DATASET_MAGIC: &[u8; 4] = b"SCDS";
pub const DATASET_VERSION: u16 = 1;

/// Sparsity ratio the footprint bound is checked against.
pub const DEFAULT_RHO: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Peak added intensity of the blob.
    pub amplitude: f64,
    /// Range of the blob's Gaussian standard deviation, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Largest number of patches recorded in one anomaly mask.
    pub max_footprint: usize,
    /// Mean background intensity.
    pub background: f64,
    /// Amplitude of each of the three shared cosine components.
    pub template_amp: f64,
    /// Amplitude bound of the two per-image cosine components.
    pub variation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 512,
            height: 64,
            width: 64,
            channels: 1,
            patch: 8,
            amplitude: 0.4,
            radius_min: 5.0,
            radius_max: 8.0,
            max_footprint: 12,
            background: 0.35,
            template_amp: 0.03,
            variation: 0.03,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if self.channels == 0 || self.patch == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions and patch size must be positive".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "{}x{} image is not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.tokens() > u16::MAX as usize {
            return bad(format!("{} patches exceed the u16 index range", self.tokens()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "radius range [{}, {}] must be positive and ordered",
                self.radius_min, self.radius_max
            ));
        }
        if 2.0 * self.radius_max >= self.height.min(self.width) as f64 {
            return bad(format!(
                "anomaly radius {} exceeds the {}x{} image bounds",
                self.radius_max, self.height, self.width
            ));
        }
        let cap = (DEFAULT_RHO * self.tokens() as f64 + 1e-9).floor() as usize;
        if self.max_footprint == 0 || self.max_footprint > cap {
            return bad(format!(
                "max_footprint {} must be in [1, {cap}] so the top-K set can cover it",
                self.max_footprint
            ));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("background", self.background),
            ("template_amp", self.template_amp),
            ("variation", self.variation),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; keys are the field names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for e in parse_kv(text)? {
            match e.key.as_str() {
                "n_images" => s.n_images = e.parse()?,
                "height" => s.height = e.parse()?,
                "width" => s.width = e.parse()?,
                "channels" => s.channels = e.parse()?,
                "patch" => s.patch = e.parse()?,
                "amplitude" => s.amplitude = e.parse()?,
                "radius_min" => s.radius_min = e.parse()?,
                "radius_max" => s.radius_max = e.parse()?,
                "max_footprint" => s.max_footprint = e.parse()?,
                "background" => s.background = e.parse()?,
                "template_amp" => s.template_amp = e.parse()?,
                "variation" => s.variation = e.parse()?,
                "noise_std" => s.noise_std = e.parse()?,
                "seed" => s.seed = e.parse()?,
                _ => return Err(KvEntry::unknown(&e)),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub label: u8,
    /// Sorted patch indices covered by the anomaly; empty for label 0.
    pub mask: Vec<usize>,
}

/// Samples plus the patch size they were generated for.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patch: usize,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(H, W, C)` shared by all images.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.samples
            .first()
            .map(|s| (s.image.h, s.image.w, s.image.c))
            .unwrap_or((0, 0, 0))
    }

    pub fn tokens(&self) -> usize {
        let (h, w, _) = self.dims();
        (h / self.patch) * (w / self.patch)
    }

    pub fn grid(&self, i: usize) -> Result<PatchGrid> {
        Ok(partition_patches(&self.samples[i].image, self.patch)?.with_source(i))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_dataset(self)?).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        decode_dataset(&bytes).map_err(|source| Error::Format {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Shared background: constant level plus three fixed cosine components.
fn template(spec: &SynthSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let waves: Vec<_> = (0..3).map(|_| wave(&mut rng, spec.template_amp)).collect();
    field(spec, &waves, spec.background)
}

/// `(amplitude, cycles_y, cycles_x, phase)`.
type Wave = (f64, f64, f64, f64);

fn wave(rng: &mut ChaCha8Rng, amp: f64) -> Wave {
    (
        amp,
        rng.random_range(0.25..1.5),
        rng.random_range(0.25..1.5),
        rng.random_range(0.0..TAU),
    )
}

fn field(spec: &SynthSpec, waves: &[Wave], base: f64) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![base; h * w];
    for y in 0..h {
        for x in 0..w {
            for &(a, fy, fx, ph) in waves {
                out[y * w + x] +=
                    a * (TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph).cos();
            }
        }
    }
    out
}

/// Patches whose mean normalized blob profile is at least one half, plus the
/// patch holding the centre; at most `max_footprint`, strongest first.
fn blob_mask(spec: &SynthSpec, cy: f64, cx: f64, sigma: f64) -> Vec<usize> {
    let p = spec.patch;
    let gw = spec.width / p;
    let gh = spec.height / p;
    let centre = (cy as usize).min(spec.height - 1) / p * gw + (cx as usize).min(spec.width - 1) / p;
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = 0.0;
            for y in 0..p {
                for x in 0..p {
                    let dy = (gy * p + y) as f64 + 0.5 - cy;
                    let dx = (gx * p + x) as f64 + 0.5 - cx;
                    acc += (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                }
            }
            let mean = acc / (p * p) as f64;
            let idx = gy * gw + gx;
            if mean >= 0.5 || idx == centre {
                scored.push((if idx == centre { f64::INFINITY } else { mean }, idx));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(spec.max_footprint);
    let mut mask: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
    mask.sort_unstable();
    mask
}

/// Image `i` of the set described by `spec`; labels alternate `0, 1, 0, ...`.
pub fn generate_one(spec: &SynthSpec, template: &[f64], i: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64 + 1);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let label = (i % 2) as u8;

    let waves: Vec<_> = (0..2)
        .map(|_| {
            let a = if spec.variation > 0.0 {
                rng.random_range(-spec.variation..=spec.variation)
            } else {
                0.0
            };
            wave(&mut rng, a)
        })
        .collect();
    let own = field(spec, &waves, 0.0);
    let mut base: Vec<f64> = template.iter().zip(&own).map(|(a, b)| a + b).collect();

    let mut mask = Vec::new();
    if label == 1 {
        let sigma = if spec.radius_max > spec.radius_min {
            rng.random_range(spec.radius_min..spec.radius_max)
        } else {
            spec.radius_min
        };
        let cy = rng.random_range(sigma..h as f64 - sigma);
        let cx = rng.random_range(sigma..w as f64 - sigma);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                base[y * w + x] +=
                    spec.amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
        mask = blob_mask(spec, cy, cx, sigma);
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w * c);
    for v in &base {
        for _ in 0..c {
            data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SynthSample {
        image: Image::new(h, w, c, data)?,
        label,
        mask,
    })
}

/// The full synthetic set; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let t = template(spec);
    let samples = (0..spec.n_images)
        .map(|i| generate_one(spec, &t, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        patch: spec.patch,
        samples,
    })
}

/// Serializes to the SCDS layout.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (h, wd, c) = ds.dims();
    let l = ds.tokens();
    let mut w = Writer::default();
    w.magic(DATASET_MAGIC, DATASET_VERSION);
    for v in [ds.len(), h, wd, c, ds.patch, l] {
        w.u32(u32::try_from(v).map_err(|_| Error::Data(format!("header value {v} too large")))?);
    }
    for (i, s) in ds.samples.iter().enumerate() {
        if (s.image.h, s.image.w, s.image.c) != (h, wd, c) {
            return Err(Error::Data(format!("sample {i} has different dimensions")));
        }
        w.u8(s.label);
        w.u16(s.mask.len() as u16);
        for &j in &s.mask {
            w.u16(j as u16);
        }
        w.f32s(s.image.data.iter().copied());
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC, DATASET_VERSION)?;
    let n = r.u32("sample count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let p = r.u32("patch size")? as usize;
    let l = r.u32("patch count")? as usize;
    if n > 0
        && (h == 0 || w == 0 || c == 0 || p == 0 || h % p != 0 || w % p != 0 || (h / p) * (w / p) != l)
    {
        return Err(r.invalid(
            "header",
            format!("inconsistent geometry H={h} W={w} C={c} P={p} L={l}"),
        ));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let label = r.u8("label")?;
        if label > 1 {
            return Err(r.invalid("label", format!("{label} is not 0 or 1")));
        }
        let m = r.u16("mask length")? as usize;
        let mut mask = Vec::with_capacity(m);
        for _ in 0..m {
            let j = r.u16("mask index")? as usize;
            if j >= l || mask.last().is_some_and(|&prev| prev >= j) {
                return Err(r.invalid("mask index", format!("{j} is out of range or out of order")));
            }
            mask.push(j);
        }
        if (label == 1) != !mask.is_empty() {
            return Err(r.invalid("mask", format!("label {label} with {m} mask patches")));
        }
        let data = r.f32s(h * w * c, "pixels")?;
        samples.push(SynthSample {
            image: Image { h, w, c, data },
            label,
            mask,
        });
    }
    r.finish()?;
    Ok(Dataset { patch: p, samples })
}
