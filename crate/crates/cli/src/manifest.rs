//! Run manifest: what went in, what came out (with content hashes), seeds
//! and stage timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// SHA-256 of each effective configuration as compact JSON.
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub timings_s: BTreeMap<String, f64>,
    /// Stage failures that did not abort the run.
    pub failures: Vec<serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: hex(&Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Files a volume sidecar refers to: the sidecar and its payload.
pub fn volume_files(sidecar: &Path) -> [PathBuf; 2] {
    [sidecar.to_path_buf(), sidecar.with_extension("raw")]
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_hashes: BTreeMap::new(),
            seeds: BTreeMap::new(),
            timings_s: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(sha256_file(path)?);
        Ok(())
    }

    pub fn config<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let json = serde_json::to_vec(value)?;
        self.config_hashes.insert(name.to_string(), hex(&Sha256::digest(&json)));
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn time(&mut self, stage: &str, start: Instant) {
        *self.timings_s.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
    }

    /// Lists every file under `dir` as an output, paths relative to `dir`,
    /// skipping `exclude`.
    pub fn outputs_under(&mut self, dir: &Path, exclude: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        files.sort();
        for f in files {
            if f == exclude {
                continue;
            }
            let mut entry = sha256_file(&f)?;
            entry.path = f.strip_prefix(dir).unwrap_or(&f).display().to_string();
            self.outputs.push(entry);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        gesta_core::io::write_json(path, self)?;
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
