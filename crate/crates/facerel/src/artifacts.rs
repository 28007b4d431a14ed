//! Output placement, overwrite protection, input hashing and the run record
//! written next to every primary artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{RunError, RunResult};

/// Relative output paths are placed under this directory when it is set.
pub const OUTPUT_DIR_ENV: &str = "FACEREL_OUTPUT_DIR";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads input files and remembers their digests.
#[derive(Debug, Default, Clone)]
pub struct Inputs {
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> RunResult<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
        self.hashes.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> RunResult<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|_| RunError::validation(format!("{}: not UTF-8 text", path.display())))
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }
}

#[derive(Debug, Clone)]
pub struct Outputs {
    root: Option<PathBuf>,
    force: bool,
}

impl Outputs {
    pub fn new(root: Option<PathBuf>, force: bool) -> Self {
        Self { root, force }
    }

    pub fn from_env(force: bool) -> Self {
        Self::new(std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from), force)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Resolves an output path and refuses an existing one unless forced.
    pub fn claim(&self, path: &Path) -> RunResult<PathBuf> {
        let p = self.resolve(path);
        if p.exists() && !self.force {
            return Err(RunError::validation(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn write(&self, resolved: &Path, bytes: &[u8]) -> RunResult<()> {
        if let Some(dir) = resolved.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        }
        std::fs::write(resolved, bytes).map_err(|e| RunError::io(resolved, e))
    }
}

/// `<artifact>.run.toml`: the command, its paths, the digests of everything
/// it read and the fully resolved configuration.
pub fn record_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.toml");
    artifact.with_file_name(name)
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    paths: &'a BTreeMap<String, String>,
    inputs: &'a BTreeMap<String, String>,
    config: &'a C,
}

pub fn run_record<C: Serialize>(command: &str, paths: &BTreeMap<String, String>, inputs: &Inputs, config: &C) -> RunResult<String> {
    toml::to_string(&RunRecord {
        command,
        paths,
        inputs: inputs.hashes(),
        config,
    })
    .map_err(|e| RunError::validation(format!("run record: {e}")))
}
