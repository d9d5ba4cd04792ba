//! Reading and writing configs, datasets, missing masks and checkpoints.

use std::fs;
use std::path::Path;

use fedmac_core::config::ExperimentConfig;
use fedmac_core::datagen::{decode_dataset, encode_dataset, Dataset, MissingMatrix};
use fedmac_core::params::ModelParams;

use crate::Error;

pub const DATASET_FILE: &str = "dataset.fmd1";
pub const MASK_FILE: &str = "mask.fmm1";
pub const CHECKPOINT_FILE: &str = "final.fmc1";

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses TOML, rejecting unknown keys, and validates every field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Error> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Unreadable files are config errors too: the run cannot start.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serialises to TOML")
}

pub fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    decode_dataset(&read(path)?).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<(), Error> {
    write(path, &encode_dataset(d))
}

pub fn load_mask(path: &Path) -> Result<MissingMatrix, Error> {
    MissingMatrix::decode(&read(path)?).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_mask(path: &Path, m: &MissingMatrix) -> Result<(), Error> {
    write(path, &m.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, Error> {
    ModelParams::decode(&read(path)?).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_checkpoint(path: &Path, p: &ModelParams) -> Result<(), Error> {
    write(path, &p.encode())
}
