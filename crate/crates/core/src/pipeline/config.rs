//! Training configuration and model presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Geometry;
use crate::error::{Error, Result};
use crate::features::{MelConfig, StftConfig, TgramConfig, Variant};
use crate::loss::{AdamConfig, ArcFace};
use crate::nn::{BottleneckStage, MfnSpec};
use crate::signal::{speed_grid, SpeedGrid};

/// Network and feature geometry bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-width network on 4 s at 48 kHz.
    Canonical,
    /// Same features and topology, reduced widths.
    Desk,
    /// Tiny geometry and network for smoke tests.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Real,
}

/// How the classification head is re-initialized before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Uniform random rows.
    Random,
    /// Each row is the mean unit embedding of the fine-tune items with that virtual label.
    Imprint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    pub n: usize,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub speed: SpeedConfig,
    pub arcface: ArcFace,
    pub adam: AdamConfig,
    pub variant: Variant,
    pub head_init: HeadInit,
    pub seed: u64,
    pub preset: Preset,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            base_lr: 0.0005,
            min_lr: 0.0,
            speed: SpeedConfig { n: 3, step: 0.1 },
            arcface: ArcFace::default(),
            adam: AdamConfig::default(),
            variant: Variant::Mav,
            head_init: HeadInit::Imprint,
            seed: 0,
            preset: Preset::Canonical,
            data: DataSource::Real,
        }
    }
}

impl TrainConfig {
    /// Reduced-cost setting for synthetic experiments on one CPU.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            preset: Preset::Desk,
            data: DataSource::Synthetic,
            ..Self::default()
        }
    }

    pub fn micro() -> Self {
        Self {
            epochs: 2,
            batch: 4,
            base_lr: 0.005,
            preset: Preset::Micro,
            data: DataSource::Synthetic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("config: {m}")));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(0.0..=self.base_lr).contains(&self.min_lr) {
            return bad("need 0 <= min_lr <= base_lr and base_lr > 0");
        }
        self.speed_grid()?;
        self.arcface.validate()?;
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }

    pub fn speed_grid(&self) -> Result<SpeedGrid> {
        speed_grid(self.speed.n, self.speed.step)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.preset, self.variant)
    }

    /// Compact JSON with fields in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of [`TrainConfig::to_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything needed to build the network and its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub preset: Preset,
    pub variant: Variant,
    pub geometry: Geometry,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub tgram: TgramConfig,
    pub mfn: MfnSpec,
}

impl ModelSpec {
    pub fn new(preset: Preset, variant: Variant) -> Self {
        let channels = variant.channels().len();
        match preset {
            Preset::Canonical | Preset::Desk => {
                let mfn = if preset == Preset::Canonical {
                    MfnSpec::canonical(channels)
                } else {
                    MfnSpec::desk(channels)
                };
                Self {
                    preset,
                    variant,
                    geometry: Geometry::default(),
                    stft: StftConfig::default(),
                    mel: MelConfig::default(),
                    tgram: TgramConfig::default(),
                    mfn,
                }
            }
            Preset::Micro => {
                let geometry = Geometry {
                    rate: 8000.0,
                    samples: 2048,
                };
                let stft = StftConfig {
                    n_fft: 256,
                    win_length: 256,
                    hop: 128,
                    ..StftConfig::default()
                };
                let mel = MelConfig {
                    n_mels: 16,
                    ..MelConfig::default()
                };
                let tgram = TgramConfig {
                    in_kernel: 256,
                    in_stride: 128,
                    in_pad: 128,
                    out_channels: 16,
                    ..TgramConfig::default()
                };
                let stage = |channels| BottleneckStage {
                    expansion: 2,
                    channels,
                    repeats: 1,
                    stride: 2,
                };
                let mfn = MfnSpec {
                    in_channels: channels,
                    input_hw: (16, stft.frames(geometry.samples)),
                    stem_channels: 8,
                    stages: vec![stage(8), stage(16), stage(16)],
                    conv_out_channels: 32,
                    embedding_dim: 16,
                };
                Self {
                    preset,
                    variant,
                    geometry,
                    stft,
                    mel,
                    tgram,
                    mfn,
                }
            }
        }
    }

    pub fn frames(&self) -> usize {
        self.stft.frames(self.geometry.samples)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.stft.validate()?;
        self.tgram.validate()?;
        self.mfn.validate()?;
        let frames = self.frames();
        if self.tgram.frames(self.geometry.samples) != frames || self.tgram.out_channels != self.mel.n_mels {
            return Err(Error::Shape(format!(
                "temporal features {}x{} do not match log-Mel {}x{frames}",
                self.tgram.out_channels,
                self.tgram.frames(self.geometry.samples),
                self.mel.n_mels
            )));
        }
        if self.mfn.input_hw != (self.mel.n_mels, frames) || self.mfn.in_channels != self.variant.channels().len() {
            return Err(Error::Shape("network input does not match feature geometry".into()));
        }
        Ok(())
    }
}
