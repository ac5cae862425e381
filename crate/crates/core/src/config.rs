//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` or `;`
//! are ignored. Unknown or repeated keys are rejected. [`RunConfig::to_ini`]
//! writes every key in a fixed order, so write -> read -> write is
//! byte-identical.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mvad_autograd::Activation;

use crate::modality::ModalitySet;
use crate::{Error, Result};

/// Rows in the learned positional table; longer videos reuse the last row.
pub const MAX_POSITIONS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalEmbedding {
    None,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub unimodal_layers: usize,
    pub positional: PositionalEmbedding,
    /// FFN hidden width as a multiple of the model width.
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            heads: 4,
            unimodal_layers: 1,
            positional: PositionalEmbedding::Learned,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSchedule {
    /// Halve the token count at every fusion layer.
    Reduced,
    /// Keep the first-layer count at every layer.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightActivation {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsbtConfig {
    pub fusion_layers: usize,
    pub bottleneck_tokens: usize,
    pub weighting_layers: usize,
    pub token_schedule: TokenSchedule,
    pub cross_transformer: bool,
    pub weighting: bool,
    pub weight_transformer: bool,
    pub weight_activation: WeightActivation,
    pub shared_pair_weights: bool,
}

impl Default for MsbtConfig {
    fn default() -> Self {
        Self {
            fusion_layers: 5,
            bottleneck_tokens: 16,
            weighting_layers: 1,
            token_schedule: TokenSchedule::Reduced,
            cross_transformer: true,
            weighting: true,
            weight_transformer: true,
            weight_activation: WeightActivation::Sigmoid,
            shared_pair_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub global_layers: usize,
    pub regressor_hidden: usize,
    pub regressor_activation: Activation,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            global_layers: 3,
            regressor_hidden: 64,
            regressor_activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub top_k: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            top_k: 9,
            alpha: 0.5,
            batch_size: 32,
            learning_rate: 0.005,
            momentum: 0.0,
            steps: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// How many Stage-III samples to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratedCount {
    /// Enough to match the anomalous count to the normal count.
    Deficit,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MstaConfig {
    pub samplings: usize,
    pub context_samples: usize,
    pub delta: f64,
    pub generated: GeneratedCount,
}

impl Default for MstaConfig {
    fn default() -> Self {
        Self {
            samplings: 10,
            context_samples: 80,
            delta: 0.7,
            generated: GeneratedCount::Deficit,
        }
    }
}

impl MstaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samplings == 0 {
            return Err(Error::Config("samplings must be >= 1".into()));
        }
        if self.context_samples == 0 {
            return Err(Error::Config("context_samples must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta {} outside (0, 1)",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextHeadConfig {
    /// Width of the hashing embedder output.
    pub text_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for TextHeadConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            hidden: 64,
            learning_rate: 0.5,
            steps: 200,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub modalities: ModalitySet,
    pub encoder: EncoderConfig,
    pub msbt: MsbtConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub msta: MstaConfig,
    pub text: TextHeadConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            modalities: "T,R,F".parse().expect("static modality list"),
            encoder: EncoderConfig::default(),
            msbt: MsbtConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            msta: MstaConfig::default(),
            text: TextHeadConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

impl fmt::Display for PositionalEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Learned => "learned",
        })
    }
}

impl fmt::Display for TokenSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reduced => "reduced",
            Self::Fixed => "fixed",
        })
    }
}

impl fmt::Display for WeightActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
        })
    }
}

impl fmt::Display for GeneratedCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Deficit => f.write_str("deficit"),
            Self::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let m = &self.msbt;
        let d = &self.detector;
        let t = &self.train;
        let s = &self.msta;
        let x = &self.text;
        vec![
            ("seed", self.seed.to_string()),
            ("modalities", self.modalities.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("heads", e.heads.to_string()),
            ("unimodal_layers", e.unimodal_layers.to_string()),
            ("positional_embedding", e.positional.to_string()),
            ("ffn_mult", e.ffn_mult.to_string()),
            ("fusion_layers", m.fusion_layers.to_string()),
            ("bottleneck_tokens", m.bottleneck_tokens.to_string()),
            ("weighting_layers", m.weighting_layers.to_string()),
            ("token_schedule", m.token_schedule.to_string()),
            ("cross_transformer", m.cross_transformer.to_string()),
            ("weighting", m.weighting.to_string()),
            ("weight_transformer", m.weight_transformer.to_string()),
            ("weight_activation", m.weight_activation.to_string()),
            ("shared_pair_weights", m.shared_pair_weights.to_string()),
            ("global_layers", d.global_layers.to_string()),
            ("regressor_hidden", d.regressor_hidden.to_string()),
            ("regressor_activation", d.regressor_activation.to_string()),
            ("top_k", t.top_k.to_string()),
            ("alpha", t.alpha.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("steps", t.steps.to_string()),
            ("samplings", s.samplings.to_string()),
            ("context_samples", s.context_samples.to_string()),
            ("delta", s.delta.to_string()),
            ("generated", s.generated.to_string()),
            ("text_dim", x.text_dim.to_string()),
            ("text_hidden", x.hidden.to_string()),
            ("text_learning_rate", x.learning_rate.to_string()),
            ("text_steps", x.steps.to_string()),
            ("text_batch_size", x.batch_size.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "modalities" => self.modalities = v.parse()?,
            "embed_dim" => self.encoder.embed_dim = num(key, v)?,
            "heads" => self.encoder.heads = num(key, v)?,
            "unimodal_layers" => self.encoder.unimodal_layers = num(key, v)?,
            "positional_embedding" => {
                self.encoder.positional = match v {
                    "none" | "off" => PositionalEmbedding::None,
                    "learned" | "on" => PositionalEmbedding::Learned,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "ffn_mult" => self.encoder.ffn_mult = num(key, v)?,
            "fusion_layers" => self.msbt.fusion_layers = num(key, v)?,
            "bottleneck_tokens" => self.msbt.bottleneck_tokens = num(key, v)?,
            "weighting_layers" => self.msbt.weighting_layers = num(key, v)?,
            "token_schedule" => {
                self.msbt.token_schedule = match v {
                    "reduced" => TokenSchedule::Reduced,
                    "fixed" => TokenSchedule::Fixed,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "cross_transformer" => self.msbt.cross_transformer = flag(key, v)?,
            "weighting" => self.msbt.weighting = flag(key, v)?,
            "weight_transformer" => self.msbt.weight_transformer = flag(key, v)?,
            "weight_activation" => {
                self.msbt.weight_activation = match v {
                    "sigmoid" => WeightActivation::Sigmoid,
                    "softmax" => WeightActivation::Softmax,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "shared_pair_weights" => self.msbt.shared_pair_weights = flag(key, v)?,
            "global_layers" => self.detector.global_layers = num(key, v)?,
            "regressor_hidden" => self.detector.regressor_hidden = num(key, v)?,
            "regressor_activation" => {
                self.detector.regressor_activation = v
                    .parse()
                    .map_err(|e| Error::Config(format!("`{key}`: {e}")))?
            }
            "top_k" => self.train.top_k = num(key, v)?,
            "alpha" => self.train.alpha = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "steps" => self.train.steps = num(key, v)?,
            "samplings" => self.msta.samplings = num(key, v)?,
            "context_samples" => self.msta.context_samples = num(key, v)?,
            "delta" => self.msta.delta = num(key, v)?,
            "generated" => {
                self.msta.generated = match v {
                    "deficit" | "auto" => GeneratedCount::Deficit,
                    _ => GeneratedCount::Fixed(num(key, v)?),
                }
            }
            "text_dim" => self.text.text_dim = num(key, v)?,
            "text_hidden" => self.text.hidden = num(key, v)?,
            "text_learning_rate" => self.text.learning_rate = num(key, v)?,
            "text_steps" => self.text.steps = num(key, v)?,
            "text_batch_size" => self.text.batch_size = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_ini(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ini(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.msta.validate()?;
        if self.msbt.fusion_layers == 0 || self.msbt.bottleneck_tokens == 0 {
            return Err(Error::Config(
                "fusion_layers and bottleneck_tokens must be >= 1".into(),
            ));
        }
        if self.text.text_dim == 0 || self.text.hidden == 0 {
            return Err(Error::Config(
                "text_dim and text_hidden must be >= 1".into(),
            ));
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
