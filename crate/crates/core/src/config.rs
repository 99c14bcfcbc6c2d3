//! Line-oriented `key = value` configuration.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};
use crate::model::{Arch, SaliencyInput};
use crate::sparse_attn::{budget, BiasMode};

/// Environment variable that may supply the seed.
pub const SEED_ENV: &str = "SC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl KvEntry {
    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Config(ConfigError {
            line: Some(self.line),
            message: msg.into(),
        })
    }

    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse()
            .map_err(|e| self.error(format!("bad value {:?} for {}: {e}", self.value, self.key)))
    }

    pub fn unknown(&self) -> Error {
        self.error(format!("unknown key {:?}", self.key))
    }
}

/// Splits text into entries; blank lines and `#` comments are ignored.
/// Duplicate keys and lines without `=` are errors.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config(ConfigError {
                line: Some(line),
                message: format!("expected `key = value`, got {body:?}"),
            }));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(ConfigError {
                line: Some(line),
                message: "empty key".into(),
            }));
        }
        if let Some(prev) = seen.insert(key.clone(), line) {
            return Err(Error::Config(ConfigError {
                line: Some(line),
                message: format!("duplicate key {key:?} (first set at line {prev})"),
            }));
        }
        out.push(KvEntry {
            key,
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Sparse,
    Dense,
}

/// How the sparse sets are chosen during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Recomputed from the current saliency for every view at every step.
    Dynamic,
    /// Fixed to each image's selection at step 0 (un-augmented).
    Static,
}

/// Every training and model knob.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub saliency_hidden: [usize; 2],
    pub saliency_input: SaliencyInput,
    pub d_z: usize,
    pub n_classes: usize,

    pub rho: f64,
    pub tau: f64,
    pub lambda: f64,
    /// `None` means `1/L`.
    pub theta: Option<f64>,
    pub t_ind: f64,
    pub bias_mode: BiasMode,
    pub attention: AttentionMode,
    pub selection: SelectionMode,
    pub alt_period: usize,
    pub reuse_cache: bool,

    /// Desk-scale batch; full-scale runs would use 256.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Fine-tuning uses the first `label_count` images; evaluation the rest.
    pub label_count: usize,
    pub seed: u64,
    pub precision: Precision,

    pub flip_prob: f64,
    pub noise_std: f64,
    /// Multiplicative intensity factor drawn from `[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Smallest crop side as a fraction of the image; 1 disables cropping.
    pub crop_min: f64,

    pub log_every: usize,
    pub metrics_path: Option<String>,
    pub cache_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            patch: 8,
            d: 64,
            n_blocks: 2,
            mlp_hidden: 128,
            saliency_hidden: [512, 256],
            saliency_input: SaliencyInput::Embedded,
            d_z: 32,
            n_classes: 2,
            rho: 0.3,
            tau: 0.1,
            lambda: 0.5,
            theta: None,
            t_ind: 0.05,
            bias_mode: BiasMode::Saliency,
            attention: AttentionMode::Sparse,
            selection: SelectionMode::Dynamic,
            alt_period: 1,
            reuse_cache: true,
            batch: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            steps: 2000,
            finetune_steps: 100,
            finetune_lr: 3e-4,
            label_count: 64,
            seed: 0,
            precision: Precision::Single,
            flip_prob: 0.5,
            noise_std: 0.02,
            jitter: 0.1,
            crop_min: 0.75,
            log_every: 50,
            metrics_path: None,
            cache_path: None,
        }
    }
}

const KEYS: &[&str] = &[
    "height",
    "width",
    "channels",
    "patch",
    "d",
    "n_blocks",
    "mlp_hidden",
    "saliency_hidden1",
    "saliency_hidden2",
    "saliency_input",
    "d_z",
    "n_classes",
    "rho",
    "tau",
    "lambda",
    "theta",
    "t_ind",
    "bias_mode",
    "attention",
    "selection",
    "alt_period",
    "reuse_cache",
    "batch",
    "lr",
    "weight_decay",
    "steps",
    "finetune_steps",
    "finetune_lr",
    "label_count",
    "seed",
    "precision",
    "flip_prob",
    "noise_std",
    "jitter",
    "crop_min",
    "log_every",
    "metrics_path",
    "cache_path",
];

fn choice<T: Copy>(e: &KvEntry, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == e.value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            e.error(format!("{} must be one of {}", e.key, names.join("|")))
        })
}

impl RunConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    /// Top-K budget `K` for this configuration.
    pub fn k(&self) -> usize {
        budget(self.tokens(), self.rho).unwrap_or(0)
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(1.0 / self.tokens() as f64)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            patch: self.patch,
            channels: self.channels,
            grid_h: self.height / self.patch,
            grid_w: self.width / self.patch,
            d: self.d,
            n_blocks: self.n_blocks,
            mlp_hidden: self.mlp_hidden,
            saliency_hidden: self.saliency_hidden,
            saliency_input: self.saliency_input,
            d_z: self.d_z,
            n_classes: self.n_classes,
        }
    }

    fn set(&mut self, e: &KvEntry) -> Result<()> {
        match e.key.as_str() {
            "height" => self.height = e.parse()?,
            "width" => self.width = e.parse()?,
            "channels" => self.channels = e.parse()?,
            "patch" => self.patch = e.parse()?,
            "d" => self.d = e.parse()?,
            "n_blocks" => self.n_blocks = e.parse()?,
            "mlp_hidden" => self.mlp_hidden = e.parse()?,
            "saliency_hidden1" => self.saliency_hidden[0] = e.parse()?,
            "saliency_hidden2" => self.saliency_hidden[1] = e.parse()?,
            "saliency_input" => {
                self.saliency_input = choice(
                    e,
                    &[("raw", SaliencyInput::Raw), ("embedded", SaliencyInput::Embedded)],
                )?
            }
            "d_z" => self.d_z = e.parse()?,
            "n_classes" => self.n_classes = e.parse()?,
            "rho" => self.rho = e.parse()?,
            "tau" => self.tau = e.parse()?,
            "lambda" => self.lambda = e.parse()?,
            "theta" => {
                self.theta = if e.value == "auto" {
                    None
                } else {
                    Some(e.parse()?)
                }
            }
            "t_ind" => self.t_ind = e.parse()?,
            "bias_mode" => {
                self.bias_mode = choice(e, &[("none", BiasMode::None), ("saliency", BiasMode::Saliency)])?
            }
            "attention" => {
                self.attention = choice(
                    e,
                    &[("sparse", AttentionMode::Sparse), ("dense", AttentionMode::Dense)],
                )?
            }
            "selection" => {
                self.selection = choice(
                    e,
                    &[("dynamic", SelectionMode::Dynamic), ("static", SelectionMode::Static)],
                )?
            }
            "alt_period" => self.alt_period = e.parse()?,
            "reuse_cache" => self.reuse_cache = e.parse()?,
            "batch" => self.batch = e.parse()?,
            "lr" => self.lr = e.parse()?,
            "weight_decay" => self.weight_decay = e.parse()?,
            "steps" => self.steps = e.parse()?,
            "finetune_steps" => self.finetune_steps = e.parse()?,
            "finetune_lr" => self.finetune_lr = e.parse()?,
            "label_count" => self.label_count = e.parse()?,
            "seed" => self.seed = e.parse()?,
            "precision" => {
                self.precision = choice(e, &[("single", Precision::Single), ("double", Precision::Double)])?
            }
            "flip_prob" => self.flip_prob = e.parse()?,
            "noise_std" => self.noise_std = e.parse()?,
            "jitter" => self.jitter = e.parse()?,
            "crop_min" => self.crop_min = e.parse()?,
            "log_every" => self.log_every = e.parse()?,
            "metrics_path" => self.metrics_path = Some(e.value.clone()),
            "cache_path" => self.cache_path = Some(e.value.clone()),
            _ => return Err(e.unknown()),
        }
        Ok(())
    }

    /// Bound check for a single key; `None` when the value is acceptable.
    fn violation(&self, key: &str) -> Option<String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match key {
            "height" | "width" | "patch" => {
                self.patch > 0 && self.height % self.patch == 0 && self.width % self.patch == 0 && self.tokens() > 0
            }
            "channels" | "d" | "mlp_hidden" | "saliency_hidden1" | "saliency_hidden2" | "d_z" => {
                [self.channels, self.d, self.mlp_hidden, self.saliency_hidden[0], self.saliency_hidden[1], self.d_z]
                    .iter()
                    .all(|&v| v > 0)
            }
            "n_classes" => self.n_classes >= 2,
            "rho" => self.rho > 0.0 && self.rho <= 1.0,
            "tau" => self.tau > 0.0 && self.tau.is_finite(),
            "lambda" => self.lambda >= 0.0 && self.lambda.is_finite(),
            "theta" => self.theta.is_none_or(|t| t > 0.0 && t < 1.0),
            "t_ind" => self.t_ind > 0.0 && self.t_ind.is_finite(),
            "batch" => self.batch >= 1,
            "lr" => self.lr > 0.0 && self.lr.is_finite(),
            "finetune_lr" => self.finetune_lr > 0.0 && self.finetune_lr.is_finite(),
            "weight_decay" => self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "label_count" => self.label_count >= 1,
            "flip_prob" => unit(self.flip_prob),
            "noise_std" => self.noise_std >= 0.0 && self.noise_std.is_finite(),
            "jitter" => (0.0..1.0).contains(&self.jitter),
            "crop_min" => self.crop_min > 0.0 && self.crop_min <= 1.0,
            _ => true,
        };
        if ok {
            return None;
        }
        Some(match key {
            "height" | "width" | "patch" => format!(
                "{}x{} image must be divisible by patch size {}",
                self.height, self.width, self.patch
            ),
            "rho" => format!("rho must be in (0, 1], got {}", self.rho),
            "tau" => format!("tau must be positive, got {}", self.tau),
            "lambda" => format!("lambda must be non-negative, got {}", self.lambda),
            "theta" => "theta must be in (0, 1) or auto".into(),
            "t_ind" => format!("t_ind must be positive, got {}", self.t_ind),
            "lr" | "finetune_lr" => format!("{key} must be positive"),
            "n_classes" => "n_classes must be at least 2".into(),
            "jitter" => "jitter must be in [0, 1)".into(),
            "crop_min" => "crop_min must be in (0, 1]".into(),
            "flip_prob" => "flip_prob must be in [0, 1]".into(),
            _ => format!("{key} is out of range"),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for key in KEYS {
            if let Some(msg) = self.violation(key) {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = match *key {
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "channels" => self.channels.to_string(),
                "patch" => self.patch.to_string(),
                "d" => self.d.to_string(),
                "n_blocks" => self.n_blocks.to_string(),
                "mlp_hidden" => self.mlp_hidden.to_string(),
                "saliency_hidden1" => self.saliency_hidden[0].to_string(),
                "saliency_hidden2" => self.saliency_hidden[1].to_string(),
                "saliency_input" => self.saliency_input.as_str().into(),
                "d_z" => self.d_z.to_string(),
                "n_classes" => self.n_classes.to_string(),
                "rho" => format!("{:?}", self.rho),
                "tau" => format!("{:?}", self.tau),
                "lambda" => format!("{:?}", self.lambda),
                "theta" => self.theta.map_or("auto".into(), |t| format!("{t:?}")),
                "t_ind" => format!("{:?}", self.t_ind),
                "bias_mode" => self.bias_mode.as_str().into(),
                "attention" => match self.attention {
                    AttentionMode::Sparse => "sparse".into(),
                    AttentionMode::Dense => "dense".into(),
                },
                "selection" => match self.selection {
                    SelectionMode::Dynamic => "dynamic".into(),
                    SelectionMode::Static => "static".into(),
                },
                "alt_period" => self.alt_period.to_string(),
                "reuse_cache" => self.reuse_cache.to_string(),
                "batch" => self.batch.to_string(),
                "lr" => format!("{:?}", self.lr),
                "weight_decay" => format!("{:?}", self.weight_decay),
                "steps" => self.steps.to_string(),
                "finetune_steps" => self.finetune_steps.to_string(),
                "finetune_lr" => format!("{:?}", self.finetune_lr),
                "label_count" => self.label_count.to_string(),
                "seed" => self.seed.to_string(),
                "precision" => match self.precision {
                    Precision::Single => "single".into(),
                    Precision::Double => "double".into(),
                },
                "flip_prob" => format!("{:?}", self.flip_prob),
                "noise_std" => format!("{:?}", self.noise_std),
                "jitter" => format!("{:?}", self.jitter),
                "crop_min" => format!("{:?}", self.crop_min),
                "log_every" => self.log_every.to_string(),
                "metrics_path" => match &self.metrics_path {
                    Some(p) => p.clone(),
                    None => continue,
                },
                "cache_path" => match &self.cache_path {
                    Some(p) => p.clone(),
                    None => continue,
                },
                _ => unreachable!("every key is rendered"),
            };
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Parses config text; missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_seed(text, None)
}

/// Like [`parse_config`], with a seed from the environment. Setting the seed
/// both in the file and in the environment is an error.
pub fn parse_config_with_seed(text: &str, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let entries = parse_kv(text)?;
    for e in &entries {
        cfg.set(e)?;
        if let Some(msg) = cfg.violation(&e.key) {
            return Err(e.error(msg));
        }
    }
    if let Some(s) = env_seed {
        if let Some(e) = entries.iter().find(|e| e.key == "seed") {
            return Err(e.error(format!("seed is set here and by {SEED_ENV}; remove one")));
        }
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
