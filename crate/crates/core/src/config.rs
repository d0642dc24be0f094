//! Model and training configuration, presets, and the flat JSON format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{FanError, Result};

/// Where the vision projection modules run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VpmMode {
    Off,
    /// Only on the coarsest (stride-32) level.
    Single,
    /// On all four levels.
    Multi,
}

/// Which linguistic features guide the visual side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextGranularity {
    /// Word embeddings in activation and VPM, sentence embedding in L2V.
    WordAndSentence,
    /// The sentence embedding stands in for the word sequence everywhere.
    SentenceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub stem_channels: usize,
    /// Channels of pyramid levels 2..=5.
    pub vision_channels: [usize; 4],
    /// Shared fusion dimension of every cross-modal module.
    pub d_model: usize,
    pub activation_heads: usize,
    pub vpm_heads: usize,
    pub vpm_ffn: usize,
    pub l2v_layers: usize,
    pub l2v_heads: usize,
    pub l2v_ffn: usize,
    pub l2v_encoder_layers: usize,
    pub use_activation: bool,
    pub vpm: VpmMode,
    pub vpm_self_attention: bool,
    pub use_l2v: bool,
    pub text_granularity: TextGranularity,
    pub norm_eps: f64,
    /// Foreground probability threshold for binarization.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::text::Vocabulary::synthetic().len(),
            max_len: 17,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            text_ffn: 128,
            stem_channels: 16,
            vision_channels: [32, 64, 128, 256],
            d_model: 64,
            activation_heads: 4,
            vpm_heads: 4,
            vpm_ffn: 128,
            l2v_layers: 2,
            l2v_heads: 4,
            l2v_ffn: 128,
            l2v_encoder_layers: 0,
            use_activation: true,
            vpm: VpmMode::Multi,
            vpm_self_attention: true,
            use_l2v: true,
            text_granularity: TextGranularity::WordAndSentence,
            norm_eps: 1e-5,
            threshold: 0.35,
        }
    }
}

impl ModelConfig {
    /// Text and decoder settings at full scale (8 heads need `d_model` ≥ 8).
    pub fn paper() -> Self {
        Self { l2v_layers: 6, l2v_heads: 8, l2v_ffn: 2048, max_len: 17, ..Self::default() }
    }

    /// A very small network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            max_len: 8,
            text_dim: 16,
            text_layers: 1,
            text_heads: 2,
            text_ffn: 16,
            stem_channels: 4,
            vision_channels: [8, 8, 16, 16],
            d_model: 16,
            activation_heads: 2,
            vpm_heads: 2,
            vpm_ffn: 16,
            l2v_layers: 2,
            l2v_heads: 2,
            l2v_ffn: 16,
            l2v_encoder_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FanError::Config(m));
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("text_dim", self.text_dim),
            ("text_heads", self.text_heads),
            ("text_ffn", self.text_ffn),
            ("stem_channels", self.stem_channels),
            ("d_model", self.d_model),
            ("activation_heads", self.activation_heads),
            ("vpm_heads", self.vpm_heads),
            ("vpm_ffn", self.vpm_ffn),
            ("l2v_heads", self.l2v_heads),
            ("l2v_ffn", self.l2v_ffn),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if let Some(c) = self.vision_channels.iter().find(|&&c| c == 0) {
            return fail(format!("vision channel count {c} must be positive"));
        }
        for (name, heads, dim) in [
            ("text_heads", self.text_heads, self.text_dim),
            ("activation_heads", self.activation_heads, self.d_model),
            ("vpm_heads", self.vpm_heads, self.d_model),
            ("l2v_heads", self.l2v_heads, self.d_model),
        ] {
            if dim % heads != 0 {
                return fail(format!("{name}={heads} does not divide dimension {dim}"));
            }
        }
        if !self.d_model.is_multiple_of(4) {
            return fail(format!("d_model {} must be divisible by 4 for 2-D positional embeddings", self.d_model));
        }
        if !self.text_dim.is_multiple_of(2) {
            return fail(format!("text_dim {} must be even", self.text_dim));
        }
        if self.use_l2v && self.l2v_layers == 0 {
            return fail("use_l2v needs at least one decoder layer".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_milestone: usize,
    pub backbone_lr_scale: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    /// Compute the loss on upsampled full-resolution logits.
    pub full_resolution_loss: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    /// Evaluate on at most N validation samples per epoch.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-3,
            lr_decay: 0.1,
            lr_milestone: 20,
            backbone_lr_scale: 1.0,
            bce_weight: 1.0,
            dice_weight: 1.0,
            dice_smooth: 1.0,
            full_resolution_loss: true,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_steps: None,
            train_limit: None,
            val_limit: None,
        }
    }

    /// Full-scale recipe: 50 epochs, batch 64, lr 1e-4 decayed ×0.1 at epoch 35.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            epochs: 50,
            batch_size: 64,
            base_lr: 1e-4,
            lr_milestone: 35,
            backbone_lr_scale: 0.1,
            full_resolution_loss: false,
            ..Self::desk()
        }
    }

    /// Memorize 32 samples in 300 optimizer steps.
    pub fn overfit() -> Self {
        Self {
            epochs: 75,
            lr_milestone: 60,
            max_steps: Some(300),
            train_limit: Some(32),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(FanError::Config(m));
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.epochs == 0 || self.lr_milestone >= self.epochs {
            return fail(format!("lr_milestone {} must be below epochs {}", self.lr_milestone, self.epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.backbone_lr_scale > 0.0) {
            return fail("backbone_lr_scale must be positive".into());
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 || self.bce_weight + self.dice_weight == 0.0 {
            return fail("loss weights must be non-negative and not both zero".into());
        }
        if self.grad_clip < 0.0 {
            return fail("grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Parses a flat JSON object; keys absent from the file keep their desk defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| FanError::Config(format!("config JSON: {e}")))?;
        Self::from_json_value(value)
    }

    pub fn from_json_value(value: Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| FanError::Config("config must be a JSON object".into()))?;
        let known = known_keys();
        if let Some(bad) = obj.keys().find(|k| !known.contains(k)) {
            return Err(FanError::Config(format!("unknown config key {bad:?}")));
        }
        let mut merged = Self::desk().to_json_map();
        merged.extend(obj.clone());
        let cfg: Self =
            serde_json::from_value(Value::Object(merged)).map_err(|e| FanError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Overrides individual keys, used by command-line flags.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let mut map = self.to_json_map();
        for (k, v) in overrides {
            if !map.contains_key(k) && !known_keys().contains(k) {
                return Err(FanError::Config(format!("unknown config key {k:?}")));
            }
            map.insert(k.clone(), v.clone());
        }
        Self::from_json_value(Value::Object(map))
    }

    pub fn to_json_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        }
    }
}

fn known_keys() -> Vec<String> {
    TrainConfig::desk().to_json_map().keys().cloned().collect()
}
