//! Declarative study configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{MetadataSchema, ModalitySet};
use crate::error::{Error, IoContext, Result};
use crate::eval::Averaging;
use crate::models::ArchitectureId;
use crate::preprocess::PipelineParams;
use crate::train::{PretrainTask, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Patient directories with `week-*` session folders.
    pub root: PathBuf,
    /// Per-session rating table.
    pub metadata: PathBuf,
    #[serde(default)]
    pub clinical: Option<PathBuf>,
    #[serde(default = "default_grid")]
    pub grid: [usize; 3],
    #[serde(default = "default_gap")]
    pub min_gap_weeks: i64,
    #[serde(default)]
    pub schema: MetadataSchema,
}

fn default_grid() -> [usize; 3] {
    [32, 32, 32]
}

fn default_gap() -> i64 {
    13
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub enabled: bool,
    pub template: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub params: PipelineParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            template: None,
            cache_dir: PathBuf::from("cache"),
            params: PipelineParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub seed: u64,
    pub n_folds: usize,
    pub group_by_patient: bool,
    pub output: PathBuf,
    pub averaging: Averaging,
    /// Append survival weeks to the clinical vector.
    pub include_survival: bool,
    pub vit_patch: usize,
    /// Test samples explained for the final pipeline.
    pub explain_samples: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            n_folds: 5,
            group_by_patient: false,
            output: PathBuf::from("runs/study"),
            averaging: Averaging::Prevalence,
            include_survival: false,
            vit_patch: crate::models::vit::DEFAULT_PATCH,
            explain_samples: 4,
        }
    }
}

/// Option lists per axis. The first entry of each list is the baseline
/// used before that axis is decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxesConfig {
    pub subtraction: Vec<bool>,
    pub modalities: Vec<String>,
    pub architecture: Vec<String>,
    pub pretraining: Vec<PretrainTask>,
    pub clinical: Vec<bool>,
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self {
            subtraction: vec![false, true],
            modalities: ModalitySet::study_sets().iter().map(|m| m.key()).collect(),
            architecture: ArchitectureId::ALL
                .iter()
                .map(|a| a.name().to_string())
                .collect(),
            pretraining: vec![
                PretrainTask::None,
                PretrainTask::RotationSelfSupervised {
                    n_rotations: 24,
                    epochs: 10,
                },
            ],
            clinical: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub study: StudySettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub axes: AxesConfig,
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        let base = base.canonicalize().unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.data.root);
        absolutize(base, &mut self.data.metadata);
        if let Some(c) = self.data.clinical.as_mut() {
            absolutize(base, c);
        }
        if let Some(t) = self.preprocess.template.as_mut() {
            absolutize(base, t);
        }
        absolutize(base, &mut self.preprocess.cache_dir);
        absolutize(base, &mut self.study.output);
        for p in &mut self.axes.pretraining {
            match p {
                PretrainTask::OrganClassification { corpus, .. } => absolutize(base, corpus),
                PretrainTask::ExternalCheckpoint { path } => absolutize(base, path),
                _ => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.grid.iter().any(|&g| g == 0) {
            return Err(Error::Config("data.grid extents must be positive".into()));
        }
        if self.study.n_folds < 2 {
            return Err(Error::Config("study.n_folds must be at least 2".into()));
        }
        let a = &self.axes;
        if a.subtraction.is_empty()
            || a.modalities.is_empty()
            || a.architecture.is_empty()
            || a.pretraining.is_empty()
            || a.clinical.is_empty()
        {
            return Err(Error::Config("every axis needs at least one option".into()));
        }
        for m in &a.modalities {
            m.parse::<ModalitySet>()?;
        }
        for arch in &a.architecture {
            arch.parse::<ArchitectureId>()?;
        }
        if a.clinical.contains(&true) && self.data.clinical.is_none() {
            return Err(Error::Config(
                "clinical axis includes `true` but data.clinical is not set".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the fully resolved configuration next to run outputs.
    pub fn write_snapshot(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(name);
        fs::write(&p, self.to_toml()?).at(&p)?;
        Ok(p)
    }
}
