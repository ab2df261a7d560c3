use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::GroupLayout;
use crate::error::{Error, Result};
use crate::ogdr::{OgdrConfig, UpPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One codebook over all channels.
    Vq,
    /// Contiguous channel groups, no projection.
    Gdr,
    /// Groups in the space organized by the learned projection.
    Ogdr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub align: f64,
    pub commit: f64,
    pub util: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            align: 1.0,
            commit: 0.25,
            util: 0.1,
        }
    }
}

/// Everything that determines a pretraining run. Missing JSON fields take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub loss_weights: LossWeights,
    /// Latent channel count `c`.
    pub c: usize,
    /// Total combinatorial code count `n`.
    pub codes: usize,
    pub groups: usize,
    /// Explicit per-group code counts; derived from `codes` and `groups`
    /// when absent.
    pub radices: Option<Vec<usize>>,
    pub r: usize,
    pub ridge: f64,
    pub residual_on: bool,
    pub normalize_on: bool,
    pub up_path: UpPath,
    pub gumbel_noise: bool,
    pub hidden: usize,
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub data_seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ogdr,
            seed: 0,
            total_steps: 2000,
            batch_size: 16,
            lr0: 2e-3,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            loss_weights: LossWeights::default(),
            c: 4,
            codes: 64,
            groups: 4,
            radices: None,
            r: 8,
            ridge: 1e-6,
            residual_on: true,
            normalize_on: true,
            up_path: UpPath::Pinv,
            gumbel_noise: true,
            hidden: 8,
            image_size: 32,
            train_images: 512,
            val_images: 64,
            data_seed: 1234,
            eval_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_steps", self.total_steps as usize),
            ("batch_size", self.batch_size),
            ("c", self.c),
            ("codes", self.codes),
            ("groups", self.groups),
            ("r", self.r),
            ("hidden", self.hidden),
            ("train_images", self.train_images),
            ("val_images", self.val_images),
            ("eval_interval", self.eval_interval as usize),
            ("checkpoint_interval", self.checkpoint_interval as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be positive")));
        }
        if !(self.lr0 > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Param("lr0 and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Param(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac)));
        }
        let w = self.loss_weights;
        if !(w.align >= 0.0 && w.commit >= 0.0 && w.util >= 0.0) {
            return Err(Error::Param("loss weights must be non-negative".into()));
        }
        if !self.image_size.is_multiple_of(crate::vae::net::DOWNSAMPLE) || self.image_size < 8 {
            return Err(Error::Param(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        self.layout()?;
        Ok(())
    }

    /// Channels the quantizer sees directly.
    pub fn quantized_channels(&self) -> usize {
        match self.mode {
            Mode::Ogdr => self.r * self.c,
            Mode::Vq | Mode::Gdr => self.c,
        }
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        let channels = self.quantized_channels();
        let groups = match self.mode {
            Mode::Vq => 1,
            _ => self.groups,
        };
        let layout = match (&self.radices, self.mode) {
            (Some(r), Mode::Gdr | Mode::Ogdr) => {
                if !channels.is_multiple_of(r.len()) {
                    return Err(Error::Layout(format!(
                        "{channels} channels cannot be split into {} groups",
                        r.len()
                    )));
                }
                GroupLayout::new(r.clone(), channels / r.len())?
            }
            _ => GroupLayout::balanced(self.codes, groups, channels)?,
        };
        if layout.total_codes() != self.codes as u64 {
            return Err(Error::Layout(format!(
                "radices {:?} give {} codes, config asks for {}",
                layout.radices(),
                layout.total_codes(),
                self.codes
            )));
        }
        Ok(layout)
    }

    pub fn ogdr_config(&self) -> Result<OgdrConfig> {
        let cfg = OgdrConfig {
            c: self.c,
            r: self.r,
            layout: self.layout()?,
            ridge: self.ridge,
            residual_on: self.residual_on,
            normalize_on: self.normalize_on,
            total_steps: self.total_steps,
            up_path: self.up_path,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
