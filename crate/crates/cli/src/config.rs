//! Run configuration file (TOML).
//!
//! ```toml
//! [data]
//! path = "field.fgrid"          # or a [data.synth] table
//!
//! [model]                       # hierarchy: n_layers, refine_factors, layers = [...]
//!
//! [training]
//! train_fraction = 0.7
//! validate_fraction = 0.1       # the rest is the test split
//!
//! [forecast]
//! warmup = 100
//! horizon = 200
//!
//! [sweep]                       # optional grid search
//!
//! [output]
//! directory = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xsrc::experiments::{ForecastWindows, SweepSpec, SynthSpec};
use xsrc::field::{load_grid_series, GridSeries};
use xsrc::hierarchy::ModelConfig;
use xsrc::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub validate_fraction: f64,
    /// Overrides applied to every layer when present.
    #[serde(default)]
    pub washout: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
}

fn default_train_fraction() -> f64 {
    0.7
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            train_fraction: default_train_fraction(),
            validate_fraction: 0.0,
            washout: None,
            beta: None,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub directory: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub forecast: Option<ForecastWindows>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Data split into consecutive train / validate / test blocks.
pub struct Splits {
    pub train: GridSeries,
    pub validate: Option<GridSeries>,
    pub test: Option<GridSeries>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return Err(config_error("data", "give either path or synth, not both")),
            (None, None) => return Err(config_error("data", "give a data path or a synth table")),
            (None, Some(s)) => s.validate().map_err(|e| prefix_field(e, "data.synth"))?,
            _ => {}
        }
        let t = &self.training;
        if !(t.train_fraction > 0.0 && t.train_fraction <= 1.0) {
            return Err(config_error("training.train_fraction", "must lie in (0, 1]"));
        }
        if !(t.validate_fraction >= 0.0 && t.train_fraction + t.validate_fraction <= 1.0) {
            return Err(config_error(
                "training.validate_fraction",
                "must be non-negative with train_fraction + validate_fraction <= 1",
            ));
        }
        if let Some(m) = &self.model {
            self.apply_overrides(m).validate().map_err(|e| prefix_field(e, "model"))?;
            if let Some(s) = &self.sweep {
                s.validate(m.n_layers).map_err(|e| prefix_field(e, ""))?;
            }
        }
        Ok(())
    }

    /// Canonical text of the whole configuration.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn apply_overrides(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        for l in &mut m.layers {
            if let Some(w) = self.training.washout {
                l.hyper.washout = w;
            }
            if let Some(b) = self.training.beta {
                l.hyper.beta = b;
            }
            if let Some(n) = self.training.noise {
                l.hyper.noise_std = n;
            }
        }
        m
    }

    /// Model configuration with training overrides and an optional seed.
    pub fn model(&self, seed: Option<u64>) -> Result<ModelConfig> {
        let m = self.model.as_ref().ok_or_else(|| config_error("model", "section is required"))?;
        let mut m = self.apply_overrides(m);
        if let Some(s) = seed {
            m.master_seed = s;
        }
        Ok(m)
    }

    pub fn windows(&self) -> Result<ForecastWindows> {
        self.forecast.ok_or_else(|| config_error("forecast", "section is required"))
    }

    pub fn load_data(&self, base: &Path, seed: Option<u64>) -> Result<GridSeries> {
        match (&self.data.path, &self.data.synth) {
            (Some(p), _) => load_series(&resolve(base, p)),
            (None, Some(s)) => {
                let mut s = s.clone();
                if let Some(seed) = seed {
                    s.seed = seed;
                }
                xsrc::experiments::gen_multiscale_synthetic(&s)
            }
            (None, None) => Err(config_error("data", "give a data path or a synth table")),
        }
    }

    pub fn split(&self, data: &GridSeries) -> Result<Splits> {
        let n = data.n_time();
        let n_train = (self.training.train_fraction * n as f64).round() as usize;
        let n_valid = (self.training.validate_fraction * n as f64).round() as usize;
        if n_train == 0 {
            return Err(config_error("training.train_fraction", "leaves no training frames"));
        }
        let part = |a: usize, b: usize| if b > a { Some(data.slice_time(a, b)).transpose() } else { Ok(None) };
        Ok(Splits {
            train: data.slice_time(0, n_train.min(n))?,
            validate: part(n_train, (n_train + n_valid).min(n))?,
            test: part((n_train + n_valid).min(n), n)?,
        })
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        resolve(base, &self.output.directory)
    }
}

/// Loads an FGRID file. Malformed content (size or value errors) counts as an
/// input file problem and is reported in the I/O class.
pub fn load_series(path: &Path) -> Result<GridSeries> {
    load_grid_series(path).map_err(|e| as_input_error(path, e))
}

pub fn as_input_error(path: &Path, e: Error) -> Error {
    match e {
        Error::DimensionMismatch(_) | Error::NonFinite { .. } => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        },
        other => other,
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_error(field: &str, message: &str) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } if !prefix.is_empty() => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}
