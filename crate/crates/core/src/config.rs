//! Flat `key = value` run configuration.
//!
//! Every key has a default (see [`KEYS`]); unknown or repeated keys are
//! rejected. [`RunConfig::to_text`] lists every key in a fixed order, so a
//! serialized config parses back to the same map.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentSpec, Range};
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::model::{FrPool, ModelConfig};
use crate::train::{AdamW, Schedule};
use crate::vit::{Variant, ViTConfig};

/// Key, default, description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("vit.height", "112", "input height in pixels"),
    ("vit.width", "112", "input width in pixels"),
    ("vit.channels", "3", "input channels"),
    ("vit.patch", "16", "patch side P"),
    ("vit.dim", "384", "token width D"),
    ("vit.heads", "6", "attention heads"),
    ("vit.layers", "12", "encoder layers L"),
    ("vit.ffn_width", "1536", "feed-forward hidden width"),
    ("vit.ln_eps", "0.000001", "layer-norm epsilon"),
    (
        "model.variant",
        "T",
        "T: quality token, C: quality from the face embedding",
    ),
    (
        "model.embed_dim",
        "0",
        "face embedding width E (0: same as vit.dim)",
    ),
    (
        "model.classes",
        "0",
        "identity count K (0: taken from the training manifest)",
    ),
    (
        "model.fr_pool",
        "flatten",
        "patch-state reduction before the FR head: flatten or mean",
    ),
    (
        "model.pos0_trainable",
        "true",
        "train the quality token's positional row",
    ),
    ("loss.scale", "64", "CosFace scale s"),
    ("loss.margin", "0.35", "CosFace margin m"),
    ("loss.lambda", "10", "weight of the quality loss"),
    ("loss.beta", "1", "Smooth-L1 transition point"),
    (
        "loss.eps",
        "0.0001",
        "classifiability target denominator guard",
    ),
    ("loss.fr_only", "false", "drop the quality branch"),
    (
        "aug.enabled",
        "true",
        "apply augmentation to training images",
    ),
    ("aug.affine_p", "0.1", "affine probability"),
    ("aug.affine_scale", "0.9:1.1", "affine scale range"),
    (
        "aug.affine_rotation",
        "-10:10",
        "affine rotation range, degrees",
    ),
    (
        "aug.affine_translate",
        "-0.1:0.1",
        "affine shift range, fraction of side",
    ),
    ("aug.crop_p", "0.1", "resized crop probability"),
    ("aug.crop_area", "0.8:1", "crop area fraction range"),
    (
        "aug.crop_aspect",
        "0.75:1.3333333333333333",
        "crop aspect ratio range",
    ),
    (
        "aug.crop_pad",
        "0.1",
        "zero border the crop may reach, fraction of side",
    ),
    ("aug.cutout_p", "0.1", "cutout probability"),
    ("aug.cutout_holes", "1:3", "cutout hole count range"),
    (
        "aug.cutout_size",
        "0.1:0.3",
        "cutout hole side range, fraction of side",
    ),
    ("aug.brightness_p", "0.1", "brightness probability"),
    ("aug.brightness", "0.8:1.2", "brightness factor range"),
    ("aug.saturation_p", "0.1", "saturation probability"),
    ("aug.saturation", "0.8:1.2", "saturation factor range"),
    ("aug.contrast_p", "0.1", "contrast probability"),
    ("aug.contrast", "0.8:1.2", "contrast factor range"),
    ("aug.grayscale_p", "0.1", "grayscale probability"),
    (
        "aug.blur_p",
        "0.1",
        "blur probability (box or Gaussian, even odds)",
    ),
    ("aug.blur_sigma", "0.5:1.5", "blur sigma range"),
    ("aug.lowres_p", "0.1", "low-resolution probability"),
    ("aug.lowres_factor", "2:4", "downscale factor range"),
    ("sched.lr", "0.001", "base learning rate"),
    ("sched.steps", "1000", "total optimizer steps T"),
    ("sched.power", "1", "polynomial decay power"),
    ("sched.warmup", "50", "linear warmup steps"),
    ("optim.beta1", "0.9", "AdamW beta1"),
    ("optim.beta2", "0.999", "AdamW beta2"),
    ("optim.eps", "0.00000001", "AdamW epsilon"),
    ("optim.weight_decay", "0.05", "decoupled weight decay"),
    ("optim.clip_norm", "0", "global gradient-norm clip (0: off)"),
    ("train.batch", "32", "batch size"),
    (
        "train.seed",
        "0",
        "seed for initialization, shuffling and augmentation",
    ),
    (
        "train.checkpoint_every",
        "0",
        "steps between checkpoints (0: only at the end)",
    ),
    ("train.data", "", "training manifest"),
    ("train.out", "", "checkpoint path"),
    (
        "train.metrics",
        "",
        "metrics CSV path (empty: next to the checkpoint)",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub variant: Variant,
    pub embed_dim: usize,
    pub classes: usize,
    pub fr_pool: FrPool,
    pub pos0_trainable: bool,
    pub loss: LossConfig,
    pub augment: AugmentSpec,
    pub schedule: Schedule,
    pub optim: AdamW,
    pub clip_norm: f64,
    pub batch: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub data: String,
    pub out: String,
    pub metrics: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            vit: ViTConfig::default(),
            variant: Variant::QualityToken,
            embed_dim: 0,
            classes: 0,
            fr_pool: FrPool::Flatten,
            pos0_trainable: true,
            loss: LossConfig::default(),
            augment: AugmentSpec::default(),
            schedule: Schedule::new(1e-3, 1000),
            optim: AdamW::default(),
            clip_norm: 0.0,
            batch: 32,
            seed: 0,
            checkpoint_every: 0,
            data: String::new(),
            out: String::new(),
            metrics: String::new(),
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("documented default parses");
        }
        cfg
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<Range> {
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| Error::config(format!("{key}: expected lo:hi, got {value:?}")))?;
    Ok(Range::new(parse(key, lo)?, parse(key, hi)?))
}

fn range(r: &Range) -> String {
    format!("{}:{}", r.lo, r.hi)
}

impl RunConfig {
    /// The small architecture used by the desk-scale runs and gradient checks.
    pub fn toy() -> Self {
        RunConfig {
            vit: ViTConfig::toy(),
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "vit.height" => self.vit.height = parse(key, value)?,
            "vit.width" => self.vit.width = parse(key, value)?,
            "vit.channels" => self.vit.channels = parse(key, value)?,
            "vit.patch" => self.vit.patch = parse(key, value)?,
            "vit.dim" => self.vit.dim = parse(key, value)?,
            "vit.heads" => self.vit.heads = parse(key, value)?,
            "vit.layers" => self.vit.layers = parse(key, value)?,
            "vit.ffn_width" => self.vit.ffn_width = parse(key, value)?,
            "vit.ln_eps" => self.vit.ln_eps = parse(key, value)?,
            "model.variant" => self.variant = value.parse()?,
            "model.embed_dim" => self.embed_dim = parse(key, value)?,
            "model.classes" => self.classes = parse(key, value)?,
            "model.fr_pool" => self.fr_pool = value.parse()?,
            "model.pos0_trainable" => self.pos0_trainable = parse_bool(key, value)?,
            "loss.scale" => self.loss.scale = parse(key, value)?,
            "loss.margin" => self.loss.margin = parse(key, value)?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "loss.beta" => self.loss.beta = parse(key, value)?,
            "loss.eps" => self.loss.eps = parse(key, value)?,
            "loss.fr_only" => self.loss.fr_only = parse_bool(key, value)?,
            "aug.enabled" => a.enabled = parse_bool(key, value)?,
            "aug.affine_p" => a.affine_p = parse(key, value)?,
            "aug.affine_scale" => a.affine_scale = parse_range(key, value)?,
            "aug.affine_rotation" => a.affine_rotation = parse_range(key, value)?,
            "aug.affine_translate" => a.affine_translate = parse_range(key, value)?,
            "aug.crop_p" => a.crop_p = parse(key, value)?,
            "aug.crop_area" => a.crop_area = parse_range(key, value)?,
            "aug.crop_aspect" => a.crop_aspect = parse_range(key, value)?,
            "aug.crop_pad" => a.crop_pad = parse(key, value)?,
            "aug.cutout_p" => a.cutout_p = parse(key, value)?,
            "aug.cutout_holes" => a.cutout_holes = parse_range(key, value)?,
            "aug.cutout_size" => a.cutout_size = parse_range(key, value)?,
            "aug.brightness_p" => a.brightness_p = parse(key, value)?,
            "aug.brightness" => a.brightness = parse_range(key, value)?,
            "aug.saturation_p" => a.saturation_p = parse(key, value)?,
            "aug.saturation" => a.saturation = parse_range(key, value)?,
            "aug.contrast_p" => a.contrast_p = parse(key, value)?,
            "aug.contrast" => a.contrast = parse_range(key, value)?,
            "aug.grayscale_p" => a.grayscale_p = parse(key, value)?,
            "aug.blur_p" => a.blur_p = parse(key, value)?,
            "aug.blur_sigma" => a.blur_sigma = parse_range(key, value)?,
            "aug.lowres_p" => a.lowres_p = parse(key, value)?,
            "aug.lowres_factor" => a.lowres_factor = parse_range(key, value)?,
            "sched.lr" => self.schedule.base_lr = parse(key, value)?,
            "sched.steps" => self.schedule.total_steps = parse(key, value)?,
            "sched.power" => self.schedule.power = parse(key, value)?,
            "sched.warmup" => self.schedule.warmup_steps = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.batch" => self.batch = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.data" => self.data = value.trim().to_string(),
            "train.out" => self.out = value.trim().to_string(),
            "train.metrics" => self.metrics = value.trim().to_string(),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let a = &self.augment;
        let values = [
            s(self.vit.height),
            s(self.vit.width),
            s(self.vit.channels),
            s(self.vit.patch),
            s(self.vit.dim),
            s(self.vit.heads),
            s(self.vit.layers),
            s(self.vit.ffn_width),
            s(self.vit.ln_eps),
            s(self.variant),
            s(self.embed_dim),
            s(self.classes),
            s(self.fr_pool),
            s(self.pos0_trainable),
            s(self.loss.scale),
            s(self.loss.margin),
            s(self.loss.lambda),
            s(self.loss.beta),
            s(self.loss.eps),
            s(self.loss.fr_only),
            s(a.enabled),
            s(a.affine_p),
            range(&a.affine_scale),
            range(&a.affine_rotation),
            range(&a.affine_translate),
            s(a.crop_p),
            range(&a.crop_area),
            range(&a.crop_aspect),
            s(a.crop_pad),
            s(a.cutout_p),
            range(&a.cutout_holes),
            range(&a.cutout_size),
            s(a.brightness_p),
            range(&a.brightness),
            s(a.saturation_p),
            range(&a.saturation),
            s(a.contrast_p),
            range(&a.contrast),
            s(a.grayscale_p),
            s(a.blur_p),
            range(&a.blur_sigma),
            s(a.lowres_p),
            range(&a.lowres_factor),
            s(self.schedule.base_lr),
            s(self.schedule.total_steps),
            s(self.schedule.power),
            s(self.schedule.warmup_steps),
            s(self.optim.beta1),
            s(self.optim.beta2),
            s(self.optim.eps),
            s(self.optim.weight_decay),
            s(self.clip_norm),
            s(self.batch),
            s(self.seed),
            s(self.checkpoint_every),
            self.data.clone(),
            self.out.clone(),
            self.metrics.clone(),
        ];
        KEYS.iter().map(|(k, _, _)| *k).zip(values).collect()
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!(
                    "line {}: repeated key {key:?}",
                    n + 1
                )));
            }
            self.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Model architecture for `classes` identities (used when `model.classes` is 0).
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let k = if self.classes > 0 {
            self.classes
        } else {
            classes
        };
        let mut m = ModelConfig::new(self.vit.clone(), self.variant, k);
        if self.embed_dim > 0 {
            m.embed_dim = self.embed_dim;
        }
        m.fr_pool = self.fr_pool;
        m.pos0_trainable = self.pos0_trainable;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        self.optim.validate()?;
        if self.batch == 0 {
            return Err(Error::config("train.batch must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("optim.clip_norm must be non-negative"));
        }
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documentation() {
        let cfg = RunConfig::default();
        for ((key, doc, _), (k, v)) in KEYS.iter().zip(cfg.entries()) {
            assert_eq!(*key, k);
            let mut fresh = RunConfig::default();
            fresh.set(key, doc).unwrap();
            fresh.set(key, &v).unwrap();
            assert_eq!(fresh, cfg, "{key}");
        }
        assert_eq!(cfg.schedule, Schedule::new(1e-3, 1000));
        assert_eq!(cfg.augment, AugmentSpec::default());
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.optim, AdamW::default());
        assert_eq!(cfg.vit, ViTConfig::default());
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        assert!(RunConfig::parse("vit.dimm = 3")
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
        assert!(RunConfig::parse("vit.dim = 8\nvit.dim = 8").is_err());
        assert!(RunConfig::parse("vit.dim 8").is_err());
        assert!(RunConfig::parse("model.variant = X").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse(
            "# toy\nvit.dim = 16\nmodel.variant = C # no token\naug.blur_sigma = 0.25:2\n",
        )
        .unwrap();
        assert_eq!(cfg.vit.dim, 16);
        assert_eq!(cfg.variant, Variant::Embedding);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn model_config_fills_classes() {
        let cfg = RunConfig::toy();
        assert_eq!(cfg.model_config(7).num_classes, 7);
        let fixed = RunConfig::parse("model.classes = 3").unwrap();
        assert_eq!(fixed.model_config(7).num_classes, 3);
    }
}
