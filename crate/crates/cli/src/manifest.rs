//! `manifest.json`: everything needed to replay an output directory.

use std::path::Path;

use bilevel::solvers::RunStatus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MERGED_FILE: &str = "merged.csv";
pub const CELL_DIR: &str = "cells";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
    pub family: String,
}

impl Platform {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            family: std::env::consts::FAMILY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub method: String,
    pub seed: u64,
    pub status: RunStatus,
    pub iterations: usize,
    pub oracle_calls: u64,
    /// Path of the cell CSV relative to the output directory.
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    /// The experiment file verbatim.
    pub config: String,
    pub seed_offset: u64,
    pub platform: Platform,
    pub cells: Vec<CellEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(config_text: &str, seed_offset: u64, cells: Vec<CellEntry>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            config: config_text.into(),
            seed_offset,
            platform: Platform::current(),
            cells,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The recorded experiment, checked against its hash.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let actual = sha256_hex(self.config.as_bytes());
        if actual != self.config_sha256 {
            return Err(crate::CliError::Checksum {
                name: "manifest config".into(),
                expected: self.config_sha256.clone(),
                actual,
            });
        }
        ExperimentConfig::from_toml(&self.config)
    }

    pub fn diverged(&self) -> usize {
        self.cells.iter().filter(|c| c.status.is_diverged()).count()
    }
}
