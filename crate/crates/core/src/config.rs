//! The single TOML configuration shared by every command.
//!
//! Every key has a default, unknown keys are rejected, and command-line flags
//! (`--seed`, `--out`) override the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddmem::Fusion;
use crate::density::DEFAULT_SIGMA;
use crate::error::{Error, Result};
use crate::evaluation::{ExperimentConfig, Variant};
use crate::hfem::HfemConfig;
use crate::network::{EncoderConfig, MemoryMode, NetConfig};
use crate::simulation::ShiftRange;
use crate::synth::SynthConfig;
use crate::training::{AugmentConfig, LossWeights, OptimizerConfig, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Low-density scenes used for training.
    pub train: SynthConfig,
    /// High-density scenes used for testing.
    pub test: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { train: SynthConfig::low_density(), test: SynthConfig::high_density(), n_train: 64, n_test: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub lambda: f64,
    /// Shift used by `simulate`.
    pub shift: i64,
    /// Range the per-sample training shift is drawn from; `shift_max = 0`
    /// means a quarter of the crop width.
    pub shift_min: usize,
    pub shift_max: usize,
    /// Gaussian kernel width of ground-truth density maps.
    pub sigma: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let r = ShiftRange::default();
        Self { lambda: 0.5, shift: 16, shift_min: r.min, shift_max: r.max, sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LdcmMode {
    #[default]
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdmemSection {
    pub l: usize,
    pub c2: usize,
    pub fusion: Fusion,
    pub ldcm: LdcmMode,
    pub memories: MemoryMode,
}

impl Default for DdmemSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self { l: n.l, c2: n.c2, fusion: n.fusion, ldcm: LdcmMode::Frozen, memories: n.memories }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub bn_momentum: f64,
    pub recalibration_batches: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSettings::default();
        Self { bn_momentum: s.bn_momentum, recalibration_batches: s.recalibration_batches }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory holding `annotations.json`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint used by `eval` and `infer`; relative to `out_dir` unless absolute.
    pub checkpoint: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "out".into(), checkpoint: "model.ckpt".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub synth: SynthSection,
    pub sim: SimSection,
    pub encoder: EncoderConfig,
    pub ddmem: DdmemSection,
    pub hfem: HfemConfig,
    pub loss: LossWeights,
    pub optim: OptimizerConfig,
    /// Optimizer for the low-density stage.
    pub pretrain: OptimizerConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        let s = TrainSettings::default();
        Self {
            seed: 0,
            synth: SynthSection::default(),
            sim: SimSection::default(),
            encoder: EncoderConfig::default(),
            ddmem: DdmemSection::default(),
            hfem: HfemConfig::default(),
            loss: LossWeights::default(),
            optim: s.optim,
            pretrain: s.pretrain,
            augment: AugmentConfig::default(),
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.train.validate()?;
        self.synth.test.validate()?;
        self.encoder.validate()?;
        self.optim.validate()?;
        self.pretrain.validate()?;
        self.augment.validate()?;
        if !(0.0..=1.0).contains(&self.sim.lambda) {
            return Err(Error::Config(format!("sim.lambda must lie in [0, 1], got {}", self.sim.lambda)));
        }
        if self.sim.shift < 0 {
            return Err(Error::Config(format!("sim.shift must be non-negative, got {}", self.sim.shift)));
        }
        if !(self.sim.sigma > 0.0) {
            return Err(Error::Config(format!("sim.sigma must be positive, got {}", self.sim.sigma)));
        }
        if self.ddmem.l == 0 || self.ddmem.c2 == 0 {
            return Err(Error::Config("ddmem.l and ddmem.c2 must be positive".into()));
        }
        let w = &self.loss;
        if [w.theta_den, w.theta_enh, w.theta_cls, w.theta_con].iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let (h, wd) = self.synth.train.canvas_size;
        if self.augment.crop_h > h || self.augment.crop_w > wd {
            return Err(Error::Config(format!(
                "crop {}x{} exceeds the {h}x{wd} training canvas",
                self.augment.crop_h, self.augment.crop_w
            )));
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            encoder: self.encoder.clone(),
            c2: self.ddmem.c2,
            l: self.ddmem.l,
            fusion: self.ddmem.fusion,
            memories: self.ddmem.memories,
            ldcm_trainable: self.ddmem.ldcm == LdcmMode::Trainable,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            net: self.net(),
            optim: self.optim.clone(),
            pretrain: self.pretrain.clone(),
            augment: self.augment.clone(),
            loss: self.loss,
            hfem: self.hfem,
            shift: ShiftRange { min: self.sim.shift_min, max: self.sim.shift_max },
            lambda: self.sim.lambda,
            sigma: self.sim.sigma,
            bn_momentum: self.train.bn_momentum,
            recalibration_batches: self.train.recalibration_batches,
            seed: self.seed,
        }
    }

    pub fn experiment(&self, seeds: Vec<u64>, variants: Vec<Variant>) -> ExperimentConfig {
        ExperimentConfig {
            settings: self.train_settings(),
            train_synth: self.synth.train.clone(),
            test_synth: self.synth.test.clone(),
            n_train: self.synth.n_train,
            n_test: self.synth.n_test,
            seeds,
            variants,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.paths.checkpoint.is_absolute() {
            self.paths.checkpoint.clone()
        } else {
            self.paths.out_dir.join(&self.paths.checkpoint)
        }
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = Config::from_toml("seed = 7\n[ddmem]\nfusion = \"add\"\n[hfem]\npool = \"avg+max\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ddmem.fusion, Fusion::Add);
        assert_eq!(c.hfem.pool, crate::hfem::Pool::AvgMax);
        assert_eq!(c.ddmem.l, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("sed = 1\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[optim]\nmax_lr = 1e-4\nwarmup = 3\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[ddmem]\nfusion = \"mean\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[optim]\nmax_lr = 0.0\n").is_err());
        assert!(Config::from_toml("[sim]\nlambda = 2.0\n").is_err());
        assert!(Config::from_toml("[augment]\ncrop_h = 100\n").is_err());
        assert!(Config::from_toml("[encoder]\nout_channels_c1 = 3\n").is_err());
    }
}
