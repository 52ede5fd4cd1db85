//! Output directory handling: atomic writes and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mavrl_core::experiment::Selection;
use mavrl_core::{EvalReport, ExperimentConfig};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.toml";
pub const RESULTS: &str = "results.csv";
pub const MANIFEST_FORMAT: u32 = 1;

/// Writes `bytes` to a temp file beside `path`, then renames it into place,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot replace {}", path.display()))?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub lambda_kl: f64,
    pub lambda_td: f64,
    /// Mean normalized return over the tuning seeds.
    pub score: f64,
    pub tuning_seeds: usize,
}

impl SelectionRecord {
    pub fn new(s: Selection, tuning_seeds: usize) -> Self {
        SelectionRecord { lambda_kl: s.lambda_kl, lambda_td: s.lambda_td, score: s.score, tuning_seeds }
    }
}

/// What produced the files in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub command: String,
    pub tool_version: String,
    pub core_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Robustness levels evaluated besides the unperturbed grid.
    #[serde(default)]
    pub p_rand: Vec<f64>,
    pub csv_columns: String,
    pub files: Vec<String>,
    pub created_unix: u64,
    pub selection: Option<SelectionRecord>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        Manifest {
            format: MANIFEST_FORMAT,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            core_version: mavrl_core::VERSION.into(),
            config_hash: config.hash(),
            seeds,
            p_rand: Vec::new(),
            csv_columns: EvalReport::CSV_HEADER.into(),
            files: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            selection: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST), toml::to_string(self)?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("malformed {}", path.display()))
    }
}

/// Writes the canonical config next to the outputs so a run can be repeated.
pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    write_atomic(&path, config.to_toml().as_bytes())?;
    Ok(path)
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
