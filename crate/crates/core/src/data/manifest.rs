//! Line-delimited JSON manifests of paired acoustic/vibration recordings.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "outer_race", "inner_race", "ball", "cage"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Finetune,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "finetune" => Ok(Split::Finetune),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub acoustic_path: PathBuf,
    pub vibration_path: PathBuf,
    pub acoustic_rate: f64,
    pub vibration_rate: f64,
    pub label: usize,
    pub split: Split,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    acoustic_path: PathBuf,
    vibration_path: PathBuf,
    acoustic_rate: f64,
    vibration_rate: f64,
    label: i64,
    split: Split,
}

/// Parses manifest text. Relative paths are resolved against `base`; `check_files` also
/// requires every referenced file to exist.
pub fn parse_manifest(text: &str, source: &Path, base: &Path, check_files: bool) -> Result<Vec<SampleRecord>> {
    let err = |line: usize, msg: String| Error::Manifest {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(raw_line).map_err(|e| err(line, e.to_string()))?;
        if raw.label < 0 || raw.label as usize >= NUM_CLASSES {
            return Err(err(line, format!("label {} out of range at line {line}", raw.label)));
        }
        for (what, rate) in [("acoustic", raw.acoustic_rate), ("vibration", raw.vibration_rate)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(err(line, format!("{what} rate {rate} must be positive")));
            }
        }
        if !seen.insert(raw.id.clone()) {
            return Err(err(line, format!("duplicate id `{}`", raw.id)));
        }
        let acoustic_path = base.join(&raw.acoustic_path);
        let vibration_path = base.join(&raw.vibration_path);
        if check_files {
            for p in [&acoustic_path, &vibration_path] {
                if !p.is_file() {
                    return Err(err(line, format!("missing file {}", p.display())));
                }
            }
        }
        out.push(SampleRecord {
            id: raw.id,
            acoustic_path,
            vibration_path,
            acoustic_rate: raw.acoustic_rate,
            vibration_rate: raw.vibration_rate,
            label: raw.label as usize,
            split: raw.split,
        });
    }
    Ok(out)
}

/// Reads a manifest; paths inside are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base, true)
}

/// Writes records atomically, one JSON object per line. Paths are written as given.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())
}

pub fn class_counts(records: &[SampleRecord]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[r.label] += 1;
    }
    counts
}
