//! Run configuration. Every section has desk-scale defaults and is read from a
//! TOML tree; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub text_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub adapter_layers: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Stage resolutions, starting at 4 and doubling.
    pub resolutions: Vec<usize>,
    /// Generator channels per stage, aligned with `resolutions`.
    pub channels: Vec<usize>,
    pub kernel_bank: usize,
    pub attention_heads: usize,
    /// Attention blocks run only at resolutions >= this value.
    pub attention_min_res: usize,
    /// Sampling offsets are learned only at resolutions <= this value.
    pub mtm_max_res: usize,
    pub experts: usize,
    pub expert_mult: usize,
    /// Discriminator channels per stage, aligned with `resolutions`.
    pub disc_channels: Vec<usize>,
    pub disc_feature_dim: usize,
    pub disc_proj_dim: usize,
    /// Width of the frozen feature extractor used for FID and the alignment loss.
    pub extractor_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z_dim: 512,
            w_dim: 512,
            text_dim: 256,
            context_len: 77,
            vocab_size: 8192,
            encoder_layers: 2,
            encoder_heads: 4,
            adapter_layers: 2,
            mapping_layers: 4,
            mapping_lr_mul: 0.01,
            resolutions: vec![4, 8, 16, 32, 64],
            channels: vec![256, 256, 128, 128, 64],
            kernel_bank: 4,
            attention_heads: 4,
            attention_min_res: 4,
            mtm_max_res: 16,
            experts: 8,
            expert_mult: 4,
            disc_channels: vec![256, 256, 128, 128, 64],
            disc_feature_dim: 256,
            disc_proj_dim: 128,
            extractor_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn stage_index(&self, resolution: usize) -> Result<usize> {
        self.resolutions
            .iter()
            .position(|&r| r == resolution)
            .ok_or_else(|| Error::Stage(format!("resolution {resolution} is not in the schedule")))
    }

    pub fn channels_at(&self, resolution: usize) -> Result<usize> {
        Ok(self.channels[self.stage_index(resolution)?])
    }

    pub fn disc_channels_at(&self, resolution: usize) -> Result<usize> {
        Ok(self.disc_channels[self.stage_index(resolution)?])
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.resolutions.is_empty() || self.resolutions[0] != 4 {
            return cfg("resolutions must start at 4".into());
        }
        if self.resolutions.windows(2).any(|p| p[1] != 2 * p[0]) {
            return cfg(format!("resolutions must double: {:?}", self.resolutions));
        }
        if self.channels.len() != self.resolutions.len() {
            return cfg("model.channels must have one entry per resolution".into());
        }
        if self.disc_channels.len() != self.resolutions.len() {
            return cfg("model.disc_channels must have one entry per resolution".into());
        }
        if self.channels.iter().any(|c| *c == 0 || c % self.attention_heads != 0) {
            return cfg(format!(
                "every generator width must be a positive multiple of attention_heads={}",
                self.attention_heads
            ));
        }
        if self.text_dim == 0 || self.text_dim % self.encoder_heads != 0 {
            return cfg("text_dim must be a positive multiple of encoder_heads".into());
        }
        if self.experts == 0 {
            return cfg("experts must be >= 1".into());
        }
        if self.kernel_bank == 0 {
            return cfg("kernel_bank must be >= 1".into());
        }
        if self.context_len < 2 {
            return cfg("context_len must hold at least BOS and EOS".into());
        }
        if self.vocab_size < 4 {
            return cfg("vocab_size too small".into());
        }
        if self.mapping_layers == 0 {
            return cfg("mapping_layers must be >= 1".into());
        }
        Ok(())
    }
}

/// Loss weights. Deserialization rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_match: f64,
    pub lambda_clip: f64,
    pub moe_alpha: f64,
    pub r1_gamma: f64,
    pub r1_interval: u64,
    pub clip_temperature: f64,
    /// Fit the image-side alignment head of the contrastive proxy on real data.
    pub clip_fit_alignment: bool,
    pub clip_ridge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_match: 1.0,
            lambda_clip: 1.0,
            moe_alpha: 0.01,
            r1_gamma: 1.0,
            r1_interval: 16,
            clip_temperature: 0.07,
            clip_fit_alignment: true,
            clip_ridge: 1e-3,
        }
    }
}

impl LossConfig {
    /// Sets one weight by name, as used by command line overrides.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "lambda_match" => self.lambda_match = value,
            "lambda_clip" => self.lambda_clip = value,
            "moe_alpha" => self.moe_alpha = value,
            "r1_gamma" => self.r1_gamma = value,
            "clip_temperature" => self.clip_temperature = value,
            other => return Err(Error::Config(format!("unknown loss weight `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as min(decay, (1 + t) / (10 + t)).
    pub ema_rampup: bool,
    /// Evaluate with the EMA generator instead of the raw one.
    pub eval_with_ema: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
            ema_decay: 0.999,
            ema_rampup: true,
            eval_with_ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_every: u64,
    pub fid_n: usize,
    pub reference_n: usize,
    pub reference_seed: u64,
    pub tau: f64,
    /// Per-stage step cap; a single entry applies to every stage.
    pub max_steps_per_stage: Vec<u64>,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            eval_every: 500,
            fid_n: 1000,
            reference_n: 1000,
            reference_seed: 0,
            tau: 1.0,
            max_steps_per_stage: vec![20_000],
            checkpoint_every: 1000,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn cap_for_stage(&self, stage: usize) -> u64 {
        match self.max_steps_per_stage.as_slice() {
            [] => u64::MAX,
            [single] => *single,
            caps => caps.get(stage).copied().unwrap_or(*caps.last().unwrap()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub n: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            path: None,
            n: 4000,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.loss.r1_interval == 0 {
            return Err(Error::Config("loss.r1_interval must be >= 1".into()));
        }
        let caps = self.train.max_steps_per_stage.len();
        if caps > 1 && caps != self.model.resolutions.len() {
            return Err(Error::Config(
                "train.max_steps_per_stage needs one entry or one per resolution".into(),
            ));
        }
        if self.data.kind == DataKind::Folder && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for folder datasets".into()));
        }
        self.data.synthetic.validate()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// A tiny configuration used by tests and quick experiments.
    pub fn tiny() -> Self {
        let mut cfg = Config::default();
        cfg.model = ModelConfig {
            z_dim: 16,
            w_dim: 16,
            text_dim: 16,
            context_len: 12,
            vocab_size: 256,
            encoder_layers: 2,
            encoder_heads: 2,
            adapter_layers: 2,
            mapping_layers: 2,
            mapping_lr_mul: 0.01,
            resolutions: vec![4, 8, 16],
            channels: vec![8, 8, 8],
            kernel_bank: 2,
            attention_heads: 2,
            attention_min_res: 4,
            mtm_max_res: 16,
            experts: 4,
            expert_mult: 2,
            disc_channels: vec![8, 8, 8],
            disc_feature_dim: 16,
            disc_proj_dim: 8,
            extractor_width: 8,
        };
        cfg.train.batch_size = 4;
        cfg.train.eval_every = 4;
        cfg.train.fid_n = 16;
        cfg.train.reference_n = 16;
        cfg.train.max_steps_per_stage = vec![4];
        cfg.data.n = 64;
        cfg
    }
}
