use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Record of one command run, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub started: String,
    pub finished: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String]) -> Self {
        RunManifest {
            command: command.into(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            argv: argv.to_vec(),
            started: now(),
            finished: String::new(),
        }
    }

    pub fn config(mut self, path: Option<&Path>) -> Self {
        self.config_path = path.map(Path::to_path_buf);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn finish(mut self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        self.finished = now();
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Parses a JSON config; problems with the file are usage errors.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

/// Patch files (`*.cnpy`) in a directory, sorted by name.
pub fn patch_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cnpy"))
        .collect();
    files.sort();
    if files.is_empty() {
        anyhow::bail!(canopy_core::Error::Format(format!("no .cnpy patches in {}", dir.display())));
    }
    Ok(files)
}
