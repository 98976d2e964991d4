//! Output directories: creation policy, artifact writing and the `run.json` record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ConfigSource;

pub const RECORD: &str = "run.json";

pub struct RunDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Record<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: Option<u64>,
    config_hash: Option<&'a str>,
    config: Option<&'a ConfigSource>,
    inputs: &'a BTreeMap<String, String>,
    artifacts: &'a BTreeMap<String, String>,
}

impl RunDir {
    /// Refuses an existing non-empty directory unless `force` is set.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            if !root.is_dir() {
                bail!("{} exists and is not a directory", root.display());
            }
            let non_empty = fs::read_dir(root)
                .with_context(|| format!("reading {}", root.display()))?
                .next()
                .is_some();
            if non_empty && !force {
                bail!("output directory {} is not empty (use --force to write into it)", root.display());
            }
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file some other routine wrote into the directory.
    pub fn track(&mut self, name: &str) -> Result<()> {
        let hash = hash_file(&self.path(name))?;
        self.artifacts.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Writes `run.json`; call last so every artifact hash is included.
    pub fn finish(self, command: &str, seed: Option<u64>, config_hash: Option<&str>, config: Option<&ConfigSource>) -> Result<()> {
        let record = Record {
            command,
            args: std::env::args().skip(1).collect(),
            seed,
            config_hash,
            config,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let text = serde_json::to_string_pretty(&record)? + "\n";
        let path = self.path(RECORD);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
