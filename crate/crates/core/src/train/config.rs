//! Training configuration, loaded from JSON with key-path diagnostics.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::disc::WaveUNetConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::signal::mel::MelConfig;

/// Trip condition of the saturation monitor: the discriminator loss stays
/// under `d_loss_floor` while the generator's adversarial loss stays above
/// `g_adv_ceiling`, for `patience` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationConfig {
    pub d_loss_floor: f64,
    pub g_adv_ceiling: f64,
    pub patience: usize,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            d_loss_floor: 1e-4,
            g_adv_ceiling: 0.9,
            patience: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub segment: usize,
    /// Clips of the synthetic corpus; ignored when `corpus_dir` is set.
    pub n_clips: usize,
    pub corpus_seed: u64,
    /// Directory of 16-bit PCM WAV files to train on instead.
    pub corpus_dir: Option<String>,
    pub lr0: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: u64,
    pub loss_weights: LossWeights,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub saturation: SaturationConfig,
    pub mel: MelConfig,
    pub discriminator: WaveUNetConfig,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch: 16,
            segment: 8192,
            n_clips: 10,
            corpus_seed: 1234,
            corpus_dir: None,
            lr0: 2e-4,
            betas: [0.8, 0.99],
            weight_decay: 0.01,
            lr_decay: 0.999,
            decay_interval: 1,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            saturation: SaturationConfig::default(),
            mel: MelConfig::default(),
            discriminator: WaveUNetConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Single-core preset: 10 synthetic clips, 2000 steps, batch 4 on short segments.
    pub fn desk() -> Self {
        Self {
            batch: 4,
            segment: 2048,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        self.mel.validate()?;
        if self.batch == 0 {
            return bad("batch", "must be >= 1".into());
        }
        if self.segment == 0 || self.segment % self.mel.hop != 0 {
            return bad("segment", format!("must be a positive multiple of mel.hop ({})", self.mel.hop));
        }
        if self.corpus_dir.is_none() && self.n_clips == 0 {
            return bad("n_clips", "must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be positive".into());
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return bad(&format!("betas[{i}]"), "must be in [0, 1)".into());
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must be in (0, 1]".into());
        }
        if self.decay_interval == 0 {
            return bad("decay_interval", "must be >= 1".into());
        }
        if self.saturation.patience == 0 {
            return bad("saturation.patience", "must be >= 1".into());
        }
        self.discriminator
            .validate()
            .map_err(|e| prefix("discriminator", e))?;
        self.generator.validate().map_err(|e| prefix("generator", e))?;
        if self.generator.n_mels != self.mel.n_mels {
            return bad(
                "generator.n_mels",
                format!("must equal mel.n_mels ({})", self.mel.n_mels),
            );
        }
        if self.generator.total_stride() != self.mel.hop {
            return bad(
                "generator.up_strides",
                format!("product must equal mel.hop ({})", self.mel.hop),
            );
        }
        if self.discriminator.total_stride() != self.mel.hop {
            return bad(
                "discriminator.down_strides",
                format!("product must equal mel.hop ({})", self.mel.hop),
            );
        }
        Ok(())
    }
}

/// Deserializes JSON, reporting failures with the dotted path of the offending key.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("{path}: {}", e.into_inner()))
    })
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::config(format!("{section}.{msg}")),
        other => other,
    }
}
