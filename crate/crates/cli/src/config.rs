//! Effective training configuration: a preset base, an optional TOML file, then dotted
//! `key=value` overrides and the dedicated flags, in that order.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mavgram_core::features::Variant;
use mavgram_core::pipeline::TrainConfig;
use serde::Serialize;
use toml::{Table, Value};

/// Config-related flags shared by the training commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML file with training settings (top-level keys of the training config).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `arcface.margin=0.5`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature variant: MAV, ST, MV or AV.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Start from the full-scale defaults (canonical network, 200 epochs) instead of the
    /// desk-scale synthetic preset.
    #[arg(long)]
    pub full_scale: bool,
}

/// Provenance of an effective configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigSource {
    pub base: String,
    pub file: Option<PathBuf>,
    /// File contents as read.
    pub file_text: Option<String>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: TrainConfig,
    pub source: ConfigSource,
}

pub fn resolve(args: &ConfigArgs) -> Result<Resolved> {
    let (base, name) = if args.full_scale {
        (TrainConfig::default(), "full-scale")
    } else {
        (TrainConfig::desk(), "desk")
    };
    resolve_from(args, base, name)
}

/// Like [`resolve`] but starting from an existing configuration, e.g. a checkpoint's.
pub fn resolve_from(args: &ConfigArgs, base: TrainConfig, base_name: &str) -> Result<Resolved> {
    let mut table = to_table(&base)?;
    let file_text = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut table, file);
            Some(text)
        }
        None => None,
    };
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: TrainConfig = Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(v) = args.variant {
        config.variant = v;
    }
    config.validate()?;
    Ok(Resolved {
        config,
        source: ConfigSource {
            base: base_name.to_string(),
            file: args.config.clone(),
            file_text,
            overrides: args.overrides.clone(),
        },
    })
}

pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}

fn to_table(cfg: &TrainConfig) -> Result<Table> {
    match Value::try_from(cfg)? {
        Value::Table(t) => Ok(t),
        _ => bail!("configuration did not serialize to a table"),
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
/// Unknown keys survive here and are rejected when the table is deserialized.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{spec}`: `{p}` is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
