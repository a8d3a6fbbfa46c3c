//! Run configuration: every knob of a transfer run, serialized as versioned JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignerKind;
use crate::error::{Error, Result};
use crate::optimizer::{LatentStageOptions, SharingConfig, TuningOptions};
use crate::toy::ToyConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Paths of the six per-run inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub face_image: PathBuf,
    pub face_semantics: PathBuf,
    pub face_keypoints: PathBuf,
    pub hair_image: PathBuf,
    pub hair_semantics: PathBuf,
    pub hair_keypoints: PathBuf,
}

impl InputPaths {
    /// `(role, path)` pairs in a fixed order.
    pub fn entries(&self) -> [(&'static str, &Path); 6] {
        [
            ("face image", &self.face_image),
            ("face semantics", &self.face_semantics),
            ("face keypoints", &self.face_keypoints),
            ("hair image", &self.hair_image),
            ("hair semantics", &self.hair_semantics),
            ("hair keypoints", &self.hair_keypoints),
        ]
    }

    /// Resolves relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> InputPaths {
        let r = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        InputPaths {
            face_image: r(&self.face_image),
            face_semantics: r(&self.face_semantics),
            face_keypoints: r(&self.face_keypoints),
            hair_image: r(&self.hair_image),
            hair_semantics: r(&self.hair_semantics),
            hair_keypoints: r(&self.hair_keypoints),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// The built-in toy generator.
    #[default]
    Toy,
    /// A StyleGAN2 checkpoint behind an external adapter; not bundled.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// For the toy backend: a parameter file replacing the seeded weights.
    pub checkpoint: Option<PathBuf>,
    pub toy: ToyConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            checkpoint: None,
            toy: ToyConfig::default(),
        }
    }
}

/// Every random draw of a run comes from one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub mean_latent: u64,
    pub mean_latent_samples: usize,
    /// Initial noise maps (the hair view uses `noise + 1`).
    pub noise: u64,
    /// Per-iteration interpolation weights in stage 1.
    pub alpha: u64,
    /// Random codes of the tuning-stage regularizer.
    pub regularizer: u64,
    /// Weights of the built-in perceptual extractor.
    pub extractor: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            mean_latent: 0,
            mean_latent_samples: 10_000,
            noise: 1,
            alpha: 2,
            regularizer: 3,
            extractor: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub inputs: InputPaths,
    pub backend: BackendConfig,
    /// Canvas side length; inputs are checked against it and the backend must
    /// render at it.
    pub resolution: usize,
    pub aligner: AlignerKind,
    pub stage1: LatentStageOptions,
    pub stage2: LatentStageOptions,
    pub stage3: TuningOptions,
    pub sharing: SharingConfig,
    pub seeds: Seeds,
    /// Paste the face image's background back into the final output.
    pub paste_back: bool,
    /// Run directory. Not part of the snapshot written into the run itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            inputs: InputPaths::default(),
            backend: BackendConfig::default(),
            resolution: ToyConfig::default().resolution,
            aligner: AlignerKind::Similarity2d,
            stage1: LatentStageOptions::stage1(),
            stage2: LatentStageOptions::stage2(),
            stage3: TuningOptions::default(),
            sharing: SharingConfig::default(),
            seeds: Seeds::default(),
            paste_back: false,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    /// Reads a config file; relative input paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.inputs = config.inputs.resolved(base);
        Ok(config)
    }

    /// The config as recorded inside a run directory: everything that determines
    /// the result, without the location it was written to.
    pub fn snapshot(&self) -> RunConfig {
        RunConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    /// Shortens every stage to `iters` iterations, keeping the schedule shape.
    pub fn with_iterations(mut self, stage1: usize, stage2: usize, stage3: usize) -> Self {
        self.stage1.iters = stage1;
        self.stage1.schedule.total_iters = stage1;
        self.stage2.iters = stage2;
        self.stage2.schedule.total_iters = stage2;
        self.stage3.iters = stage3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema version {}", self.schema_version)));
        }
        if self.backend.kind == BackendKind::Toy && self.backend.toy.resolution != self.resolution {
            return Err(Error::Config(format!(
                "toy backend renders {}px but the run resolution is {}px",
                self.backend.toy.resolution, self.resolution
            )));
        }
        if self.seeds.mean_latent_samples == 0 {
            return Err(Error::Config("mean_latent_samples must be at least 1".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if !(self.stage3.lr >= 0.0) || !(self.stage3.lambda_reg >= 0.0) {
            return Err(Error::Config("stage3 lr and lambda_reg must be non-negative".into()));
        }
        self.sharing.validate(self.backend.toy.layers)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.stage1.iters, 1000);
        assert_eq!(c.stage2.iters, 500);
        assert_eq!(c.stage3.iters, 500);
        assert_eq!(c.sharing.l, 4);
        assert_eq!(c.seeds.mean_latent_samples, 10_000);
        assert_eq!(c.stage1.schedule.peak, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.inputs.face_image = "a/face.png".into();
        c.paste_back = true;
        c.output_dir = Some("runs/x".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn missing_fields_take_defaults() {
        let c = RunConfig::from_json(r#"{"schema_version": 1, "paste_back": true}"#).unwrap();
        assert!(c.paste_back);
        assert_eq!(c.stage1, RunConfig::default().stage1);
    }

    #[test]
    fn rejects_unknown_schema_version() {
        assert!(matches!(
            RunConfig::from_json(r#"{"schema_version": 7}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn snapshot_drops_output_location() {
        let c = RunConfig {
            output_dir: Some("somewhere".into()),
            ..RunConfig::default()
        };
        assert!(c.snapshot().output_dir.is_none());
        assert!(!c.snapshot().to_json().contains("output_dir"));
    }

    #[test]
    fn shortened_schedule_stays_valid() {
        let c = RunConfig::default().with_iterations(20, 10, 5);
        c.validate().unwrap();
        assert_eq!(c.stage2.schedule.total_iters, 10);
    }
}
