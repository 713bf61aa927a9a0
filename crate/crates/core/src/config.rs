//! Model and training configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which modalities feed the content embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    #[serde(alias = "text")]
    TextOnly,
    #[serde(alias = "image")]
    ImageOnly,
}

impl Variant {
    pub fn uses_text(self) -> bool {
        matches!(self, Variant::Full | Variant::TextOnly)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Variant::Full | Variant::ImageOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::TextOnly => "text",
            Variant::ImageOnly => "image",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "text" | "text_only" => Ok(Variant::TextOnly),
            "image" | "image_only" => Ok(Variant::ImageOnly),
            other => Err(Error::InvalidArgument(format!("unknown variant {other}"))),
        }
    }
}

/// How cluster centroids are subtracted from frame-level descriptors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// One scalar per cluster, subtracted from every descriptor.
    #[default]
    Scalar,
    /// One `D`-vector per cluster, subtracted coordinate-wise.
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Cluster count `K` in the fusion module.
    pub clusters: usize,
    /// Per-modality representation dimension `H`.
    pub hidden: usize,
    /// Temperature of the POI-tag contrastive loss.
    pub tau1: f64,
    /// Temperature of the image-tag contrastive loss.
    pub tau2: f64,
    /// Acceptance threshold on the matching probability.
    pub pi: f64,
    /// Weight of the contrastive term in the training loss.
    pub alpha: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    /// Epochs of linear learning-rate warmup before the decay takes over.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub variant: Variant,

    /// Transformer layers in each encoder.
    pub layers: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub weight_decay: f64,
    /// Drop probability on encoder and cross-attention residual branches
    /// during end-to-end training.
    pub dropout: f64,
    pub centroid_mode: CentroidMode,
    /// Keep the pretrained image backbone fixed during end-to-end training.
    pub freeze_backbone: bool,
    /// Initialise the main text encoder from the pretraining text encoder.
    pub share_die_text_encoder: bool,
    pub die_epochs: usize,
    pub die_batch_size: usize,
    /// Sentence templates for masked tag prediction; `{}` is the tag.
    pub templates: Vec<String>,
}

impl Default for ModelConfig {
    /// Full-size settings.
    fn default() -> Self {
        Self {
            dim: 768,
            clusters: 64,
            hidden: 414,
            tau1: 0.12,
            tau2: 0.08,
            pi: 0.5,
            alpha: 0.5,
            lr_start: 1e-4,
            lr_end: 1e-5,
            epochs: 20,
            warmup_epochs: 0,
            seed: 0,
            variant: Variant::Full,
            layers: 6,
            ffn_mult: 4,
            max_seq_len: 64,
            patch_size: 4,
            batch_size: 32,
            negatives_per_positive: 3,
            weight_decay: 0.01,
            dropout: 0.1,
            centroid_mode: CentroidMode::Scalar,
            freeze_backbone: false,
            share_die_text_encoder: false,
            die_epochs: 10,
            die_batch_size: 32,
            templates: default_templates(),
        }
    }
}

pub fn default_templates() -> Vec<String> {
    vec!["this is a {}".to_string(), "a photo of {}".to_string()]
}

impl ModelConfig {
    /// Small settings that train in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            clusters: 4,
            hidden: 16,
            layers: 2,
            ffn_mult: 2,
            lr_start: 3e-3,
            lr_end: 3e-4,
            epochs: 40,
            warmup_epochs: 4,
            die_epochs: 10,
            weight_decay: 0.2,
            ..Self::default()
        }
    }

    /// Smallest useful model, matching [`crate::datagen::CorpusSpec::tiny`].
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            clusters: 2,
            hidden: 4,
            layers: 1,
            patch_size: 2,
            batch_size: 4,
            epochs: 2,
            die_epochs: 2,
            ..Self::desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }

    /// Returns the config unchanged if every invariant holds, otherwise the
    /// first violation by field name.
    pub fn validate(self) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.clusters == 0 {
            return bad("clusters must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if !(self.tau1 > 0.0) || !self.tau1.is_finite() {
            return bad("tau1 must be positive");
        }
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return bad("tau2 must be positive");
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return bad("pi outside [0,1]");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        if !(self.lr_start > 0.0) {
            return bad("lr_start must be positive");
        }
        if !(self.lr_end >= 0.0) {
            return bad("lr_end must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.layers == 0 {
            return bad("layers must be positive");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive");
        }
        if self.batch_size == 0 || self.die_batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout outside [0,1)");
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| t.matches("{}").count() != 1) {
            return bad("templates must each contain exactly one {}");
        }
        Ok(self)
    }

    /// Flattens the config into `config.<field>` → JSON-encoded value pairs.
    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object().expect("config is an object");
        obj.iter()
            .map(|(k, v)| (format!("config.{k}"), v.to_string()))
            .collect()
    }

    pub fn from_manifest(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        for (k, v) in entries {
            if let Some(field) = k.strip_prefix("config.") {
                let value: serde_json::Value = serde_json::from_str(v)
                    .map_err(|e| Error::Checkpoint(format!("bad manifest value for {k}: {e}")))?;
                obj.insert(field.to_string(), value);
            }
        }
        serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Checkpoint(format!("bad config in manifest: {e}")))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
