//! Run directories: one fresh directory per invocation, files created once,
//! and a manifest written last.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "MIXLIFT_OUT";
pub const DEFAULT_OUT: &str = "mixlift-runs";

#[derive(Debug, Serialize)]
struct ManifestEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    run: String,
    config: &'a ExperimentConfig,
    files: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize)]
struct Summary<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a ExperimentConfig,
    result: &'a T,
}

pub struct RunDir {
    path: PathBuf,
    files: Vec<ManifestEntry>,
}

impl RunDir {
    /// Create `root/<command>/run-NNNN` with the first free index.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        let parent = root.join(command);
        fs::create_dir_all(&parent).with_context(|| format!("cannot create {}", parent.display()))?;
        for i in 1..=9999 {
            let path = parent.join(format!("run-{i:04}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, files: Vec::new() }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("cannot create {}", path.display())),
            }
        }
        anyhow::bail!("no free run directory under {}", parent.display())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path.join(name);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        f.write_all(bytes)?;
        self.files.push(ManifestEntry {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv flush: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, cfg: &ExperimentConfig, result: &T) -> Result<()> {
        let s = Summary { schema_version: SCHEMA_VERSION, command: &cfg.command, config: cfg, result };
        let mut bytes = serde_json::to_vec_pretty(&s)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn finish(self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let run = self.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let m = Manifest { schema_version: SCHEMA_VERSION, command: &cfg.command, run, config: cfg, files: self.files };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        let path = self.path.join("manifest.json");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        f.write_all(&bytes)?;
        Ok(self.path)
    }
}
