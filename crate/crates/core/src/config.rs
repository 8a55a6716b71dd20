//! Run configuration: model shape, training schedule and dataset
//! parameters, with named profiles and JSON round-tripping.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cssm::SsmDims;
use crate::error::{Error, Result};
use crate::fusion::SsfmFlags;
use crate::ssm::Discretization;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Dual,
    RgbOnly,
}

/// Where the auxiliary input comes from during training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSource {
    /// Sensed auxiliary images from the dataset.
    #[default]
    Real,
    /// Pseudo-modality synthesized by the knowledge learner.
    Pseudo,
    /// An all-zero auxiliary image.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Encoder widths for levels 0..=4.
    pub widths: [usize; 5],
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub discretization: Discretization,
    pub per_direction_params: bool,
    pub per_channel_gate: bool,
    pub mode: Mode,
    pub enable_lsfm: bool,
    pub enable_ffm: bool,
    pub enable_ssfm: bool,
    pub enable_ssm: bool,
    pub enable_cssm: bool,
    pub enable_gate: bool,
    pub enable_ckler: bool,
    pub enable_injection: bool,
    /// Knowledge learner widths for its first three stages.
    pub ckler_widths: [usize; 3],
    /// Channels of the knowledge vector.
    pub knowledge_channels: usize,
    pub aspp_rates: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: [16, 24, 32, 48, 64],
            d_model: 32,
            d_inner: 64,
            d_state: 8,
            d_conv: 3,
            discretization: Discretization::Taylor,
            per_direction_params: false,
            per_channel_gate: false,
            mode: Mode::Dual,
            enable_lsfm: true,
            enable_ffm: true,
            enable_ssfm: true,
            enable_ssm: true,
            enable_cssm: true,
            enable_gate: true,
            enable_ckler: false,
            enable_injection: false,
            ckler_widths: [8, 16, 32],
            knowledge_channels: 64,
            aspp_rates: [1, 2, 4],
        }
    }
}

impl ModelConfig {
    pub fn ssm_dims(&self) -> SsmDims {
        SsmDims {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            d_conv: self.d_conv,
            per_direction: self.per_direction_params,
            disc: self.discretization,
        }
    }

    pub fn ssfm_flags(&self) -> SsfmFlags {
        SsfmFlags {
            ssm: self.enable_ssm,
            cssm: self.enable_cssm,
            gate: self.enable_gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("image_size", self.image_size),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("knowledge_channels", self.knowledge_channels),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size < 16 {
            return Err(Error::InvalidDimensions(format!(
                "image_size {} is below the minimum of 16",
                self.image_size
            )));
        }
        if self.widths.iter().chain(&self.ckler_widths).chain(&self.aspp_rates).any(|&w| w == 0) {
            return Err(Error::Config("widths and rates must be positive".into()));
        }
        if self.d_conv % 2 == 0 {
            return Err(Error::Config("d_conv must be odd for same padding".into()));
        }
        if self.enable_injection && !self.enable_ckler {
            return Err(Error::Config("enable_injection requires enable_ckler".into()));
        }
        if self.mode == Mode::RgbOnly && self.enable_injection {
            return Err(Error::Config("injection needs the auxiliary branch (mode dual)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to `lr_final` over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub steps: usize,
    /// When set, overrides `steps` with whole passes over the training set.
    pub epochs: Option<usize>,
    pub aux_source: AuxSource,
    /// Weight of the translation loss in the joint objective.
    pub translation_weight: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_final: 1e-3,
            schedule: LrSchedule::Constant,
            batch_size: 8,
            steps: 1500,
            epochs: None,
            aux_source: AuxSource::Real,
            translation_weight: 1.0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, train_samples: usize) -> usize {
        match self.epochs {
            Some(e) => e * train_samples.div_ceil(self.batch_size.max(1)),
            None => self.steps,
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub translation_samples: usize,
    /// Camouflage level of the segmentation scenes.
    pub kappa: f64,
    pub snr: f64,
    /// Camouflage level of the task-unrelated translation pairs.
    pub translation_kappa: f64,
    /// Top-left crop fraction applied to the auxiliary image at test time.
    pub test_crop: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_samples: 256,
            test_samples: 64,
            translation_samples: 256,
            kappa: 1.0,
            snr: 10.0,
            translation_kappa: 0.0,
            test_crop: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale defaults used by the CLI.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// A smaller profile sized for single-core test runs.
    pub fn compact() -> Self {
        let mut c = Self::toy();
        c.model.image_size = 32;
        c.model.widths = [8, 12, 16, 24, 32];
        c.model.d_model = 16;
        c.model.d_inner = 32;
        c.model.d_state = 4;
        c.model.ckler_widths = [8, 12, 16];
        c.model.knowledge_channels = 16;
        c.train.steps = 300;
        c
    }

    /// Full-scale optimization and fusion hyper-parameters. Encoder widths
    /// stay at the toy values since the pretrained backbones are not part of
    /// this crate. Not practical on a CPU.
    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.model.image_size = 448;
        c.model.d_model = 96;
        c.model.d_inner = 192;
        c.model.d_conv = 3;
        c.train.lr = 1e-4;
        c.train.lr_final = 5e-6;
        c.train.schedule = LrSchedule::Cosine;
        c.train.batch_size = 16;
        c.train.epochs = Some(160);
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "compact" => Ok(Self::compact()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(t.lr_final > 0.0) {
            return Err(Error::Config("batch_size and learning rates must be positive".into()));
        }
        if t.aux_source == AuxSource::Pseudo && !self.model.enable_ckler {
            return Err(Error::Config("aux_source pseudo requires enable_ckler".into()));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.kappa) || !(0.0..=1.0).contains(&d.translation_kappa) {
            return Err(Error::Config("kappa must lie in [0, 1]".into()));
        }
        if !(d.test_crop > 0.0 && d.test_crop <= 1.0) {
            return Err(Error::Config("test_crop must lie in (0, 1]".into()));
        }
        if !(d.snr > 0.0) {
            return Err(Error::Config("snr must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
