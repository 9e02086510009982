//! Experiment manifests: everything needed to re-run a training experiment.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ectn_core::data::{generate_synthetic, parse_qos_log};
use ectn_core::{Dims, ModelConfig, ObservedTensor, SyntheticSpec, TrainConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub data: DataSource,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub repeats: usize,
    /// Run `r` uses split and init seed `seed + r`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<[usize; 3]>,
    },
    Synthetic(SynthSettings),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub dims: [usize; 3],
    pub rank: usize,
    pub expansion: usize,
    pub density: f64,
    pub noise_sigma: f64,
    pub bias_scale: f64,
    pub seed: u64,
}

impl SynthSettings {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            dims: dims_of(self.dims),
            rank: self.rank,
            expansion: self.expansion,
            density: self.density,
            noise_sigma: self.noise_sigma,
            bias_scale: self.bias_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub rank: usize,
    pub expansion: usize,
    pub lambda: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub init_scale: f64,
    pub workers: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            rank: d.model.rank,
            expansion: d.model.expansion,
            lambda: d.lambda,
            tol: d.tol,
            max_epochs: d.max_epochs,
            init_scale: d.model.init_scale,
            workers: d.workers,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                rank: self.rank,
                expansion: self.expansion,
                init_scale: self.init_scale,
                seed,
            },
            lambda: self.lambda,
            max_epochs: self.max_epochs,
            tol: self.tol,
            workers: self.workers,
            ..TrainConfig::default()
        }
    }
}

pub fn dims_of(d: [usize; 3]) -> Dims {
    Dims::new(d[0], d[1], d[2])
}

impl ExperimentManifest {
    /// Reads a manifest; relative data paths are taken relative to the manifest file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut manifest: ExperimentManifest =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let DataSource::File { path: data, .. } = &mut manifest.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 {
            return Err(CliError::Usage("repeats must be at least 1".into()));
        }
        self.train.config(self.seed).validate()?;
        Ok(())
    }

    /// Loads or generates the observed tensor.
    pub fn load_tensor(&self) -> Result<ObservedTensor, CliError> {
        load_source(&self.data)
    }
}

pub fn load_source(source: &DataSource) -> Result<ObservedTensor, CliError> {
    match source {
        DataSource::File { path, dims } => load_log(path, dims.map(dims_of)),
        DataSource::Synthetic(s) => Ok(generate_synthetic(&s.spec())?.0),
    }
}

pub fn load_log(path: &Path, dims: Option<Dims>) -> Result<ObservedTensor, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut log = parse_qos_log(BufReader::new(file))?;
    if log.skipped > 0 {
        warn!("{}: skipped {} missing measurements", path.display(), log.skipped);
    }
    if let Some(d) = dims {
        log = log.with_dims(d)?;
    }
    let tensor = log.into_tensor()?;
    info!(
        "{}: {} entries, dims {}, density {:.4}",
        path.display(),
        tensor.len(),
        tensor.dims(),
        tensor.density()
    );
    Ok(tensor)
}
