//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::McmcSettings;
use crate::io;
use crate::model::{Dataset, ModelSpec};
use crate::partition::COVARIATE_SPLIT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub column: String,
    /// Rows with `column <= train_max` are training rows.
    pub train_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    pub response: String,
    /// Extra columns to load beyond those the effects reference.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRule>,
    #[serde(default = "comma")]
    pub delimiter: char,
}

fn comma() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    #[serde(default = "covariate_split")]
    pub node: String,
    #[serde(default = "default_q")]
    pub q_values: Vec<f64>,
}

fn covariate_split() -> String {
    COVARIATE_SPLIT.to_string()
}

fn default_q() -> Vec<f64> {
    vec![1.0, 0.5, 1.0 / 6.0]
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            node: covariate_split(),
            q_values: default_q(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file; relative data and point-cloud paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        let delimiter = cfg.delimiter()?;
        io::resolve_point_clouds(&mut cfg.model, base, delimiter)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    fn delimiter(&self) -> Result<u8> {
        u8::try_from(self.data.delimiter)
            .map_err(|_| Error::Config(format!("delimiter '{}' is not a single byte", self.data.delimiter)))
    }

    /// Every column the run needs: effect covariates, the split column and
    /// any listed extras.
    pub fn required_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.model.effects.iter().flat_map(|e| e.covariates.clone()).collect();
        if let Some(s) = &self.data.split {
            cols.push(s.column.clone());
        }
        cols.extend(self.data.columns.iter().cloned());
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        if self.sensitivity.q_values.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(Error::Config("sensitivity q values must be positive".into()));
        }
        crate::model::Model::build(&self.model)?;
        Ok(())
    }

    pub fn ingest(&self) -> Result<Dataset> {
        let mut data = io::read_dataset(&self.data.path, &self.data.response, &self.required_columns(), self.delimiter()?)?;
        if let Some(s) = &self.data.split {
            data.split_by_threshold(&s.column, s.train_max)?;
        }
        Ok(data)
    }
}
