//! Pipeline configuration: one TOML file covering data generation, every
//! training phase, QC and the annotation server.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! workspace = "workspace"
//!
//! [generator]
//! width = 64
//! height = 64
//!
//! [train.finetune_teacher]
//! iterations = 2000
//! base_fraction = 0.8
//! ```
//!
//! Every section and field is optional; omitted values take their defaults.

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::qc::{SolverConfig, Thresholds};
use crate::stage_sim::GeneratorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding `manifest.jsonl`; relative paths resolve against
    /// the config file's directory.
    pub workspace: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workspace: PathBuf::from("workspace"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPhases {
    #[serde(deserialize_with = "base_phase")]
    pub base_teacher: TrainConfig,
    #[serde(deserialize_with = "base_phase")]
    pub base_student: TrainConfig,
    pub finetune_teacher: TrainConfig,
    pub finetune_student: TrainConfig,
    pub direct_student: TrainConfig,
    /// Keep the refiner frozen in the direct scribble-trained student.
    pub direct_freeze_refiner: bool,
}

/// Fields omitted from a base-training section fall back to
/// [`TrainConfig::base`] rather than the fine-tuning defaults.
fn base_phase<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    let overrides = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(TrainConfig::base()).map_err(D::Error::custom)?;
    table.extend(overrides);
    toml::Value::Table(table).try_into().map_err(D::Error::custom)
}

impl Default for TrainPhases {
    fn default() -> Self {
        TrainPhases {
            base_teacher: TrainConfig::base(),
            base_student: TrainConfig::base(),
            finetune_teacher: TrainConfig::default(),
            finetune_student: TrainConfig::default(),
            direct_student: TrainConfig::default(),
            direct_freeze_refiner: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcConfig {
    pub band_radius: usize,
    pub solver: SolverConfig,
    pub thresholds: Thresholds,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            band_radius: 3,
            solver: SolverConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Noise level of the corrupted-input evaluation.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise_sigma: 0.05,
            noise_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub port: u16,
    /// Built frontend assets; served at `/` when present.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: 8080,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub generator: GeneratorConfig,
    pub train: TrainPhases,
    pub qc: QcConfig,
    pub eval: EvalConfig,
    pub server: ServerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            paths: PathsConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainPhases::default(),
            qc: QcConfig::default(),
            eval: EvalConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Reads a config file; a relative workspace path is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if cfg.paths.workspace.is_relative() {
            let dir = path.parent().unwrap_or(Path::new(""));
            cfg.paths.workspace = dir.join(&cfg.paths.workspace);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let t = &self.train;
        for (name, c) in [
            ("base_teacher", &t.base_teacher),
            ("base_student", &t.base_student),
            ("finetune_teacher", &t.finetune_teacher),
            ("finetune_student", &t.finetune_student),
            ("direct_student", &t.direct_student),
        ] {
            c.validate().map_err(|e| Error::Config(format!("train.{name}: {e}")))?;
        }
        if self.qc.band_radius == 0 {
            return Err(Error::Config("qc.band_radius must be at least 1".into()));
        }
        if !(self.eval.noise_sigma >= 0.0) {
            return Err(Error::Config("eval.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = PipelineConfig::default();
        c.train.finetune_teacher.base_fraction = 0.5;
        c.qc.thresholds.grad = Some(1.0);
        c.server.static_dir = Some("ui/dist".into());
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let c = PipelineConfig::from_toml("[train.finetune_teacher]\niterations = 10\n").unwrap();
        assert_eq!(c.train.finetune_teacher.iterations, 10);
        assert_eq!(c.train.finetune_teacher.batch_size, 16);
        assert_eq!(c.train.base_teacher.lr_initial, 1e-3);
        assert!(PipelineConfig::from_toml("[train.finetune_teacher]\niters = 10\n").is_err());
        let c = PipelineConfig::from_toml("[train.base_student]\niterations = 10\n").unwrap();
        assert_eq!(c.train.base_student.iterations, 10);
        assert_eq!(c.train.base_student.lr_initial, TrainConfig::base().lr_initial);
        assert_eq!(c.train.base_student.base_fraction, 1.0);
        assert!(PipelineConfig::from_toml("[train.base_student]\niters = 10\n").is_err());
        assert!(PipelineConfig::from_toml("[train.finetune_teacher]\nbase_fraction = 1.5\n").is_err());
    }

    #[test]
    fn relative_workspace_resolves_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[paths]\nworkspace = \"ws\"\n").unwrap();
        assert_eq!(PipelineConfig::load(&p).unwrap().paths.workspace, dir.path().join("ws"));
    }
}
