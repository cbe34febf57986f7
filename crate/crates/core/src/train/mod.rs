//! Training of the clean-image generator together with its degradation
//! generators, for every model variant.

mod bundle;
mod optim;
mod run;
mod step;

pub use bundle::{
    apply_degradation, degrade_generated, fake_pipeline, sample_latents, setting_degradation, Bindings, Compression,
    FakeOutput, GeneratorBundle, Latents, ParametricDegradation, Part,
};
pub use optim::{ema_update, Adam, AdamConfig};
pub use run::{
    load_generator, run, sample_clean, step_rng, RunSummary, CHECKPOINT_FINAL, CHECKPOINT_LATEST, METRICS_FILE,
};
pub use step::{train_step, StepMetrics, TrainState};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::LossWeights;
use crate::nets::NetConfig;
use crate::settings::{build_setting, DegradationSetting};

/// Model rows of the comparison and ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GAN")]
    Gan,
    #[serde(rename = "AmbientGAN")]
    AmbientGan,
    #[serde(rename = "P-AmbientGAN")]
    PAmbientGan,
    #[serde(rename = "BR-GAN")]
    BrGan,
    #[serde(rename = "BR-GAN-no-mask")]
    BrGanNoMask,
    #[serde(rename = "NR-GAN")]
    NrGan,
    #[serde(rename = "CR-GAN")]
    CrGan,
    #[serde(rename = "CR-GAN-no-mask")]
    CrGanNoMask,
    #[serde(rename = "CR-GAN+ACcomp")]
    CrGanAcComp,
    #[serde(rename = "BNCR-GAN")]
    BncrGan,
    #[serde(rename = "BNCR-GAN-no-AC")]
    BncrGanNoAc,
    #[serde(rename = "BNCR-GAN-no-ACblur")]
    BncrGanNoAcBlur,
    #[serde(rename = "BNCR-GAN-no-ACcomp")]
    BncrGanNoAcComp,
    #[serde(rename = "BNCR-GAN-nonadaptive-C")]
    BncrGanNonadaptive,
}

/// How a degradation stage of a learned variant is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Off,
    /// Mixed with the identity through a learned mask.
    Masked,
    /// Applied directly.
    Unmasked,
}

/// Where the degradation parameters of the fake path come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    None,
    /// Degradation generators.
    Learned,
    /// Draws from the true degradation setting.
    GroundTruth,
    /// One learnable kernel, noise level and quality factor shared by all images.
    Parametric,
}

impl Variant {
    pub const ALL: [Variant; 14] = [
        Variant::Gan,
        Variant::AmbientGan,
        Variant::PAmbientGan,
        Variant::BrGan,
        Variant::BrGanNoMask,
        Variant::NrGan,
        Variant::CrGan,
        Variant::CrGanNoMask,
        Variant::CrGanAcComp,
        Variant::BncrGan,
        Variant::BncrGanNoAc,
        Variant::BncrGanNoAcBlur,
        Variant::BncrGanNoAcComp,
        Variant::BncrGanNonadaptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gan => "GAN",
            Variant::AmbientGan => "AmbientGAN",
            Variant::PAmbientGan => "P-AmbientGAN",
            Variant::BrGan => "BR-GAN",
            Variant::BrGanNoMask => "BR-GAN-no-mask",
            Variant::NrGan => "NR-GAN",
            Variant::CrGan => "CR-GAN",
            Variant::CrGanNoMask => "CR-GAN-no-mask",
            Variant::CrGanAcComp => "CR-GAN+ACcomp",
            Variant::BncrGan => "BNCR-GAN",
            Variant::BncrGanNoAc => "BNCR-GAN-no-AC",
            Variant::BncrGanNoAcBlur => "BNCR-GAN-no-ACblur",
            Variant::BncrGanNoAcComp => "BNCR-GAN-no-ACcomp",
            Variant::BncrGanNonadaptive => "BNCR-GAN-nonadaptive-C",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(name))
            .map_or_else(|| invalid(format!("unknown variant {name:?}")), Ok)
    }

    pub fn source(self) -> Source {
        match self {
            Variant::Gan => Source::None,
            Variant::AmbientGan => Source::GroundTruth,
            Variant::PAmbientGan => Source::Parametric,
            _ => Source::Learned,
        }
    }

    fn is_bncr(self) -> bool {
        matches!(
            self,
            Variant::BncrGan
                | Variant::BncrGanNoAc
                | Variant::BncrGanNoAcBlur
                | Variant::BncrGanNoAcComp
                | Variant::BncrGanNonadaptive
        )
    }

    pub fn blur(self) -> Stage {
        match self {
            Variant::BrGan => Stage::Masked,
            Variant::BrGanNoMask => Stage::Unmasked,
            v if v.is_bncr() => Stage::Masked,
            _ => Stage::Off,
        }
    }

    pub fn noise(self) -> bool {
        self == Variant::NrGan || self.is_bncr()
    }

    pub fn comp(self) -> Stage {
        match self {
            Variant::CrGan | Variant::CrGanAcComp => Stage::Masked,
            Variant::CrGanNoMask => Stage::Unmasked,
            v if v.is_bncr() => Stage::Masked,
            _ => Stage::Off,
        }
    }

    pub fn ac_blur(self) -> bool {
        matches!(self, Variant::BncrGan | Variant::BncrGanNoAcComp | Variant::BncrGanNonadaptive)
    }

    pub fn ac_comp(self) -> bool {
        matches!(self, Variant::CrGanAcComp | Variant::BncrGan | Variant::BncrGanNoAcBlur | Variant::BncrGanNonadaptive)
    }

    /// Whether the consistency losses use entropy/quality weights rather than
    /// a constant weight of one.
    pub fn adaptive_ac(self) -> bool {
        self != Variant::BncrGanNonadaptive
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    /// Degradation setting of the corpus; drives the ground-truth and
    /// parametric baselines.
    #[serde(default = "default_setting")]
    pub setting: char,
    /// Use the enlarged blur of the 128×128 experiments for the setting.
    #[serde(default)]
    pub enlarged_blur: bool,
    /// Directory of training images.
    pub data: PathBuf,
    /// Output directory for logs, checkpoints and sample grids.
    pub out: PathBuf,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_cadence")]
    pub checkpoint_every: u64,
    #[serde(default = "default_cadence")]
    pub sample_every: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Latent pairs per step for the diversity regularizers.
    #[serde(default = "default_pairs")]
    pub diversity_pairs: usize,
    /// Images in each sample grid.
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    /// Checkpoint to continue from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

fn default_setting() -> char {
    'A'
}
fn default_batch() -> usize {
    64
}
fn default_ema() -> f64 {
    0.999
}
fn default_log_every() -> u64 {
    100
}
fn default_cadence() -> u64 {
    1000
}
fn default_pairs() -> usize {
    1
}
fn default_grid() -> usize {
    16
}

/// `[nets]`: a preset name plus field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

fn default_preset() -> String {
    "tiny32".into()
}

impl Default for NetSection {
    fn default() -> Self {
        Self { preset: default_preset(), overrides: toml::Table::new() }
    }
}

impl NetSection {
    pub fn resolve(&self) -> Result<NetConfig> {
        let base = NetConfig::preset(&self.preset)?;
        let mut table = toml::Table::try_from(&base)
            .map_err(|e| crate::Error::Format { what: "nets config", reason: e.to_string() })?;
        for (k, v) in &self.overrides {
            if !table.contains_key(k) {
                return invalid(format!("unknown nets key {k:?}"));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: NetConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| crate::Error::Format { what: "nets config", reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub nets: NetSection,
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = crate::config::parse_with_overrides(text, std::iter::empty::<(&str, &str)>())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: Self = crate::config::load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        crate::config::to_text(self)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.iterations == 0 {
            return invalid("iterations must be positive");
        }
        if t.batch == 0 || t.diversity_pairs == 0 {
            return invalid("batch and diversity_pairs must be positive");
        }
        if !(t.ema_decay > 0.0 && t.ema_decay < 1.0) {
            return invalid(format!("ema_decay must lie in (0, 1), got {}", t.ema_decay));
        }
        if t.log_every == 0 || t.checkpoint_every == 0 || t.sample_every == 0 {
            return invalid("cadences must be positive");
        }
        self.adam.validate()?;
        self.losses.validate()?;
        self.nets.resolve()?;
        self.degradation_setting()?;
        Ok(())
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        self.nets.resolve()
    }

    pub fn degradation_setting(&self) -> Result<DegradationSetting> {
        let s = build_setting(self.train.setting)?;
        Ok(if self.train.enlarged_blur { s.enlarged() } else { s })
    }
}

#[cfg(test)]
mod tests;
