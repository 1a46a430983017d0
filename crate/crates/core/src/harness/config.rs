use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::{MaskShape, MotionParams, NormConstants, PhantomParams, Split};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Synthetic phantoms; no input files.
    Procedural,
    /// Clean slices from `data.clean_dir`, degraded by k-space undersampling.
    Undersample,
    /// Clean slices from `data.clean_dir`, degraded by simulated motion.
    Motion,
    /// Pre-paired slices from `data.a_dir` and `data.b_dir`, matched by file stem.
    PairedDirs,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Procedural => "procedural",
            Task::Undersample => "undersample",
            Task::Motion => "motion",
            Task::PairedDirs => "paired-dirs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing manifest to use instead of building the dataset.
    pub manifest: Option<PathBuf>,
    /// Seed for dataset construction; defaults to the run seed.
    pub seed: Option<u64>,
    /// Procedural task: subject count and slice size.
    pub subjects: usize,
    pub height: usize,
    pub width: usize,
    pub phantom: PhantomParams,
    pub clean_dir: Option<PathBuf>,
    pub a_dir: Option<PathBuf>,
    pub b_dir: Option<PathBuf>,
    pub keep_fraction: f64,
    pub mask: MaskShape,
    pub motion: MotionParams,
    /// Declared raw dynamic range of domain B (defaults to `[0, 1]`).
    pub b_range: Option<NormConstants>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: None,
            subjects: 10,
            height: 64,
            width: 64,
            phantom: PhantomParams::default(),
            clean_dir: None,
            a_dir: None,
            b_dir: None,
            keep_fraction: 0.08,
            mask: MaskShape::CenteredSquare,
            motion: MotionParams::default(),
            b_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Emit per-image panels of prediction, residual, α, β and σ.
    pub figures: bool,
    pub max_figures: usize,
    pub split: Split,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            figures: true,
            max_figures: 4,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Training-subject counts.
    pub levels: Vec<usize>,
    /// Training seeds per level; empty means the run seed alone.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            levels: vec![3, 6, 10],
            seeds: Vec::new(),
        }
    }
}

/// Top-level experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the command-line `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file. Relative paths inside it
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.data.manifest);
        resolve(&mut cfg.data.clean_dir);
        resolve(&mut cfg.data.a_dir);
        resolve(&mut cfg.data.b_dir);
        resolve(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        let d = &self.data;
        let need_dir = |p: &Option<PathBuf>, key: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("task {} needs data.{key}", self.task.name()))),
                Some(p) if !p.is_dir() => Err(Error::Config(format!("data.{key} {} is not a directory", p.display()))),
                Some(_) => Ok(()),
            }
        };
        if let Some(m) = &d.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("data.manifest {} does not exist", m.display())));
            }
        } else {
            match self.task {
                Task::Procedural => {
                    d.phantom.validate()?;
                    if d.subjects < 3 {
                        return Err(Error::Config(format!("data.subjects must be at least 3, got {}", d.subjects)));
                    }
                }
                Task::Undersample | Task::Motion => need_dir(&d.clean_dir, "clean_dir")?,
                Task::PairedDirs => {
                    need_dir(&d.a_dir, "a_dir")?;
                    need_dir(&d.b_dir, "b_dir")?;
                }
            }
        }
        if !(d.keep_fraction > 0.0 && d.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("data.keep_fraction must lie in (0, 1], got {}", d.keep_fraction)));
        }
        if let Some(r) = d.b_range {
            if !(r.max > r.min) {
                return Err(Error::Config("data.b_range needs max > min".into()));
            }
        }
        if self.sweep.levels.is_empty() {
            return Err(Error::Config("sweep.levels must not be empty".into()));
        }
        Ok(())
    }
}
