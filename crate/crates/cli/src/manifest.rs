//! Per-run manifest: resolved flags, seed, input and output digests and
//! format versions. It carries no timestamps, so a rerun with the same
//! inputs writes an identical manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use qexpand_core::io::{EMBEDDINGS_FILE, LQEM_VERSION, METADATA_FILE, QEXP_VERSION, TEST_FILE, VAL_FILE};

#[derive(Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
struct Formats {
    qexp: u32,
    lqem: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a serde_json::Value,
    seed: u64,
    threads: usize,
    formats: Formats,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Files of a dataset directory that exist.
pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    [EMBEDDINGS_FILE, METADATA_FILE, VAL_FILE, TEST_FILE]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

pub struct Run<'a> {
    pub command: &'a str,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
}

impl Run<'_> {
    pub fn write(&self, out: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: &self.config,
            seed: self.seed,
            threads: self.threads,
            formats: Formats {
                qexp: QEXP_VERSION,
                lqem: LQEM_VERSION,
            },
            inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        };
        let path = out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
