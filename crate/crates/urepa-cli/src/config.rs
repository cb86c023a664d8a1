//! Run configuration: one TOML file fully determines a run. Unknown keys are
//! rejected so a typo cannot silently fall back to a default.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use urepa_core::alignment::AlignmentSpec;
use urepa_core::data::ToyDatasetConfig;
use urepa_core::error::{Error, Result};
use urepa_core::flow::GuidanceConfig;
use urepa_core::model::ModelConfig;
use urepa_core::teacher::{FeatureStore, StubEncoder, StubEncoderConfig, TeacherProvider};
use urepa_core::trainer::TrainerOptions;
use urepa_core::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypeChoice {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub provider: TeacherKind,
    pub stub: StubEncoderConfig,
    /// URFT file, required when `provider = "file"`.
    pub features_path: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            provider: TeacherKind::Stub,
            stub: StubEncoderConfig::default(),
            features_path: None,
        }
    }
}

impl TeacherConfig {
    pub fn build<T: Scalar>(&self) -> Result<TeacherProvider<T>> {
        match self.provider {
            TeacherKind::Stub => Ok(TeacherProvider::Stub(StubEncoder::new(self.stub)?)),
            TeacherKind::File => {
                let path = self.features_path.as_ref().ok_or_else(|| {
                    Error::Config("teacher.provider = \"file\" requires teacher.features_path".into())
                })?;
                let store = FeatureStore::load(path).map_err(|e| {
                    Error::Config(format!("teacher features {}: {e}", path.display()))
                })?;
                Ok(TeacherProvider::File(store))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dtype: DTypeChoice,
    /// Training steps for `train`.
    pub iters: usize,
    /// Extra checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Projector fitting steps per depth for `probe-depth`.
    pub probe_fit_iters: usize,
    /// Class labels drawn by `sample`, one output sample each.
    pub sample_labels: Vec<usize>,
    pub model: ModelConfig,
    pub alignment: AlignmentSpec,
    pub guidance: GuidanceConfig,
    pub trainer: TrainerOptions,
    pub dataset: ToyDatasetConfig,
    pub teacher: TeacherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dtype: DTypeChoice::F32,
            iters: 2000,
            checkpoint_every: 0,
            probe_fit_iters: 30,
            sample_labels: (0..urepa_core::data::NUM_CLASSES).collect(),
            model: ModelConfig::default(),
            alignment: AlignmentSpec::default(),
            guidance: GuidanceConfig::default(),
            trainer: TrainerOptions::default(),
            dataset: ToyDatasetConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.alignment.validate()?;
        self.guidance.validate()?;
        self.trainer.optimizer.validate()?;
        self.dataset.validate()?;
        self.teacher.stub.validate()?;
        if self.iters == 0 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        if self.sample_labels.is_empty() {
            return Err(Error::Config("sample_labels must not be empty".into()));
        }
        for &l in &self.sample_labels {
            if l >= self.model.num_classes {
                return Err(Error::Config(format!(
                    "sample label {l} outside 0..{}",
                    self.model.num_classes
                )));
            }
        }
        if self.dataset.input_size != self.model.input_size
            || self.dataset.input_channels != self.model.input_channels
        {
            return Err(Error::Config(format!(
                "dataset emits {}x{}x{} but the model expects {}x{}x{}",
                self.dataset.input_channels,
                self.dataset.input_size,
                self.dataset.input_size,
                self.model.input_channels,
                self.model.input_size,
                self.model.input_size
            )));
        }
        Ok(())
    }

    /// Canonical TOML; embedded in checkpoints and echoed into output dirs
    /// so a run is reconstructible from its artifacts alone.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\nlearning_rate_typo = 3\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.is_user_error());
    }

    #[test]
    fn nested_unknown_keys_are_rejected() {
        let text = "[model]\nchanels = 64\n";
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn file_provider_requires_path() {
        let mut config = RunConfig::default();
        config.teacher.provider = TeacherKind::File;
        assert!(config.teacher.build::<f32>().is_err());
    }

    #[test]
    fn dataset_and_model_dims_must_agree() {
        let mut config = RunConfig::default();
        config.dataset.input_size = 8;
        assert!(config.validate().is_err());
    }
}
