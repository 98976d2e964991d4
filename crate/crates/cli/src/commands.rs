//! Single-run subcommands: data synthesis, feature dumps, training and evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use mavgram_core::data::{load_manifest, split_finetune, synth_dataset, SampleRecord, Split, SynthProfile};
use mavgram_core::features::cache::{write_cache, CacheRecord};
use mavgram_core::features::{assemble, tgram_forward, Channel, FeatureMap, Stream};
use mavgram_core::pipeline::{
    evaluate, finetune, load_checkpoint, prepare, pretrain, save_checkpoint, Checkpoint, EpochMetrics, FeatureBuilder,
    Report, TrainConfig,
};

use crate::config::{self, ConfigArgs, Resolved};
use crate::rundir::RunDir;

pub const CHECKPOINT_PRETRAIN: &str = "pretrain.mavg";
pub const CHECKPOINT_FINETUNE: &str = "finetune.mavg";
pub const FEATURES: &str = "features.mavf";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.txt";
pub const ACCURACY: &str = "accuracy.csv";
pub const CONFIG: &str = "config.toml";
pub const ACCURACY_HEADER: &str = "variant,percent,seed,macro_accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileName {
    Source,
    Target,
}

#[derive(Debug, Clone, clap::Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn synth(profile: ProfileName, per_class: usize, seed: u64, out: &OutArgs) -> Result<()> {
    let profile = match profile {
        ProfileName::Source => SynthProfile::source(),
        ProfileName::Target => SynthProfile::target(),
    };
    let mut run = RunDir::create(&out.out, out.force)?;
    let records = synth_dataset(&profile, run.root(), per_class, seed)?;
    for r in &records {
        for p in [&r.acoustic_path, &r.vibration_path] {
            run.track(&relative(p, run.root())?)?;
        }
    }
    run.track(mavgram_core::data::synth::MANIFEST_NAME)?;
    run.write("profile.toml", toml::to_string(&profile)?.as_bytes())?;
    log::info!("wrote {} samples of profile `{}` to {}", records.len(), profile.name, run.root().display());
    run.finish("synth", Some(seed), None, None)
}

/// Log-mel maps for every record, or with a checkpoint the full variant input maps.
pub fn featurize(manifest: &Path, ckpt: Option<&Path>, cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let records = load_manifest(manifest)?;
    let (resolved, checkpoint) = match ckpt {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (from_checkpoint(cfg_args, &ck)?, Some(ck))
        }
        None => (config::resolve(cfg_args)?, None),
    };
    let cfg = &resolved.config;
    let spec = cfg.model_spec();
    let fb = FeatureBuilder::new(&spec)?;
    let data = prepare(&records, &spec.geometry)?;
    let mut cache = Vec::with_capacity(data.len());
    for (r, p) in records.iter().zip(&data) {
        let mgram = fb.log_mel().compute(&p.acoustic)?;
        let map = match &checkpoint {
            None => mgram,
            Some(ck) => {
                ck.verify_config(cfg)?;
                let mut maps: Vec<FeatureMap> = vec![mgram];
                for (stream, wave) in [(Stream::Acoustic, &p.acoustic), (Stream::Vibration, &p.vibration)] {
                    if cfg.variant.uses(stream.channel()) {
                        maps.push(tgram_forward(&ck.store, wave, &spec.tgram, stream)?);
                    }
                }
                let refs: Vec<&FeatureMap> = maps.iter().collect();
                assemble(&refs, cfg.variant)?
            }
        };
        cache.push(CacheRecord {
            name: r.id.clone(),
            shape: map.shape().to_vec(),
            data: map.into_data(),
        });
    }
    let mut run = RunDir::create(&out.out, out.force)?;
    run.input(manifest)?;
    if let Some(p) = ckpt {
        run.input(p)?;
    }
    write_cache(&run.path(FEATURES), &cache)?;
    run.track(FEATURES)?;
    let channels = match checkpoint {
        Some(_) => cfg.variant.channels().to_vec(),
        None => vec![Channel::M],
    };
    run.write("channels.txt", format!("{channels:?}\n").as_bytes())?;
    write_config(&mut run, cfg)?;
    log::info!("cached {} feature maps in {}", cache.len(), run.path(FEATURES).display());
    run.finish("featurize", Some(cfg.seed), Some(&cfg.hash()), Some(&resolved.source))
}

pub fn cmd_pretrain(manifest: &Path, cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let resolved = config::resolve(cfg_args)?;
    let cfg = &resolved.config;
    let records: Vec<SampleRecord> = load_manifest(manifest)?
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    if records.is_empty() {
        bail!("{} has no training records", manifest.display());
    }
    let mut run = RunDir::create(&out.out, out.force)?;
    run.input(manifest)?;
    write_config(&mut run, cfg)?;
    let data = prepare(&records, &cfg.model_spec().geometry)?;
    log::info!("pre-training {} on {} samples", cfg.variant, data.len());
    let outcome = pretrain(cfg, &data)?;
    write_metrics(&mut run, &outcome.metrics)?;
    write_checkpoint(&mut run, CHECKPOINT_PRETRAIN, &outcome.checkpoint)?;
    run.finish("pretrain", Some(cfg.seed), Some(&cfg.hash()), Some(&resolved.source))
}

pub fn cmd_finetune(manifest: &Path, ckpt: &Path, percent: u32, cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let pre = load_checkpoint(ckpt)?;
    let resolved = from_checkpoint(cfg_args, &pre)?;
    let cfg = &resolved.config;
    let (ft, test) = target_split(manifest, percent, cfg.seed)?;
    let mut run = RunDir::create(&out.out, out.force)?;
    run.input(manifest)?;
    run.input(ckpt)?;
    write_config(&mut run, cfg)?;
    let geom = cfg.model_spec().geometry;
    let ft = prepare(&ft, &geom)?;
    log::info!("fine-tuning on {} samples ({percent}%)", ft.len());
    let outcome = finetune(&pre, cfg, &ft)?;
    write_metrics(&mut run, &outcome.metrics)?;
    write_checkpoint(&mut run, CHECKPOINT_FINETUNE, &outcome.checkpoint)?;
    let report = evaluate(&outcome.checkpoint, cfg, &prepare(&test, &geom)?)?;
    write_report(&mut run, &report, cfg, percent)?;
    run.finish("finetune", Some(cfg.seed), Some(&cfg.hash()), Some(&resolved.source))
}

pub fn cmd_eval(manifest: &Path, ckpt: &Path, percent: u32, cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let resolved = from_checkpoint(cfg_args, &ck)?;
    let cfg = &resolved.config;
    ck.verify_config(cfg)?;
    let (_, test) = target_split(manifest, percent, cfg.seed)?;
    let mut run = RunDir::create(&out.out, out.force)?;
    run.input(manifest)?;
    run.input(ckpt)?;
    write_config(&mut run, cfg)?;
    let report = evaluate(&ck, cfg, &prepare(&test, &cfg.model_spec().geometry)?)?;
    write_report(&mut run, &report, cfg, percent)?;
    run.finish("eval", Some(cfg.seed), Some(&cfg.hash()), Some(&resolved.source))
}

/// The checkpoint's configuration with any command-line layers applied on top.
fn from_checkpoint(args: &ConfigArgs, ck: &Checkpoint) -> Result<Resolved> {
    if args.full_scale {
        config::resolve(args)
    } else {
        config::resolve_from(args, ck.config.clone(), "checkpoint")
    }
}

/// `(finetune, test)` records among the manifest's non-training records.
fn target_split(manifest: &Path, percent: u32, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let target: Vec<SampleRecord> = load_manifest(manifest)?
        .into_iter()
        .filter(|r| r.split != Split::Train)
        .collect();
    if target.is_empty() {
        bail!("{} has no fine-tune or test records", manifest.display());
    }
    Ok(split_finetune(&target, percent, seed)?)
}

fn relative(path: &Path, root: &Path) -> Result<String> {
    let rel = path
        .strip_prefix(root)
        .with_context(|| format!("{} is outside {}", path.display(), root.display()))?;
    Ok(rel.display().to_string())
}

fn write_config(run: &mut RunDir, cfg: &TrainConfig) -> Result<()> {
    run.write(CONFIG, config::to_toml(cfg)?.as_bytes())
}

fn write_metrics(run: &mut RunDir, metrics: &[EpochMetrics]) -> Result<()> {
    let text: String = metrics.iter().map(|m| m.to_json_line() + "\n").collect();
    run.write(METRICS, text.as_bytes())
}

fn write_checkpoint(run: &mut RunDir, name: &str, ck: &Checkpoint) -> Result<()> {
    save_checkpoint(ck, &run.path(name))?;
    run.track(name)?;
    log::info!("saved {} (epoch {})", run.path(name).display(), ck.epoch);
    Ok(())
}

fn write_report(run: &mut RunDir, report: &Report, cfg: &TrainConfig, percent: u32) -> Result<()> {
    run.write(REPORT, report.to_text().as_bytes())?;
    let csv = format!(
        "{ACCURACY_HEADER}\n{},{percent},{},{:.6}\n",
        cfg.variant, cfg.seed, report.macro_accuracy
    );
    run.write(ACCURACY, csv.as_bytes())?;
    log::info!("macro accuracy {:.4} on {} samples", report.macro_accuracy, report.samples);
    Ok(())
}
