//! Run configuration: a TOML document over [`TrainConfig`] plus dataset
//! locations and the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udgan_core::data::{load_manifest, DatasetManifest, LabelPattern, SplitLayout, DEFAULT_PATTERN};
use udgan_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// File name of the effective configuration inside the output directory.
pub const EFFECTIVE_CONFIG: &str = "config.toml";
/// Manifest written next to generated datasets; preferred over scanning.
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Where a dataset lives and how its file names are labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub layout: SplitLayout,
    pub label_pattern: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: SplitLayout::default(),
            label_pattern: DEFAULT_PATTERN.to_string(),
        }
    }
}

impl DatasetConfig {
    /// Reads `manifest.csv` under the root when present, otherwise scans the
    /// split directories.
    pub fn open(&self, role: &str) -> CliResult<DatasetManifest> {
        let root = self
            .root
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("no {role} dataset given (set `{role}.root` or pass --{role})")))?;
        open_dataset(root, &self.layout, &self.label_pattern)
    }
}

pub fn open_dataset(root: &Path, layout: &SplitLayout, pattern: &str) -> CliResult<DatasetManifest> {
    if !root.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        return Ok(DatasetManifest::read_csv(&manifest, root)?);
    }
    Ok(load_manifest(root, &LabelPattern::new(pattern)?, layout)?)
}

/// Named starting points for the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale reference settings.
    #[default]
    Default,
    /// Small images and short schedules for CPU smoke runs.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub source: DatasetConfig,
    pub target: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Default)
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            out: PathBuf::from("runs/udgan"),
            source: DatasetConfig::default(),
            target: DatasetConfig::default(),
            train: match preset {
                Preset::Default => TrainConfig::default(),
                Preset::Toy => TrainConfig::toy(),
            },
        }
    }

    /// Parses a TOML document, filling absent fields from `preset`.
    pub fn from_toml(text: &str, preset: Preset) -> CliResult<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::from_preset(preset)).map_err(|e| CliError::Runtime(e.to_string()))?;
        let merged = merge(base, overrides);
        merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    /// Preset, then the optional file on top.
    pub fn load(path: Option<&Path>, preset: Preset) -> CliResult<Self> {
        match path {
            None => Ok(Self::from_preset(preset)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text, preset).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        for (role, ds) in [("source", &self.source), ("target", &self.target)] {
            LabelPattern::new(&ds.label_pattern)
                .map_err(|e| CliError::Config(format!("{role}.label_pattern: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))
    }

    /// Writes the effective configuration into the output directory.
    pub fn write_effective(&self) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

fn merge(mut base: toml::Table, overrides: toml::Table) -> toml::Table {
    for (key, value) in overrides {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
