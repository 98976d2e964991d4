//! The pretrain, fine-tune and evaluate matrix over feature variants or speed grids.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use mavgram_core::data::SynthProfile;
use mavgram_core::features::Variant;
use mavgram_core::pipeline::{run_transfer_budgets, EpochMetrics, SpeedConfig, TrainConfig, TransferData, TransferSetup};
use serde_json::json;

use crate::commands::{OutArgs, CONFIG};
use crate::config::{self, ConfigArgs};
use crate::rundir::RunDir;

pub const WORKERS_ENV: &str = "MAVGRAM_WORKERS";

#[derive(Debug, Clone, clap::Args)]
pub struct AblateArgs {
    /// Feature variants, one row each; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Fine-tune budgets in percent, one column each.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25")]
    pub percents: Vec<u32>,
    /// Seeds averaged in every cell.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Speed-variant counts; with `--speed-step` the rows become every (n, s) pair.
    #[arg(long, value_delimiter = ',')]
    pub speed_n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub speed_step: Option<Vec<f64>>,
    #[arg(long, default_value_t = 40)]
    pub source_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub target_per_class: usize,
}

#[derive(Debug, Clone)]
struct Row {
    label: String,
    config: TrainConfig,
}

struct Cell {
    accuracies: Vec<f64>,
    metrics: Vec<String>,
}

pub fn ablate(args: &AblateArgs, cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    if cfg_args.seed.is_some() {
        bail!("ablate takes its seeds from --seeds");
    }
    let resolved = config::resolve(cfg_args)?;
    let base = resolved.config.clone();
    let rows = rows(args, &base)?;
    if args.percents.is_empty() || args.seeds.is_empty() {
        bail!("need at least one percent and one seed");
    }
    let setup = TransferSetup {
        source: SynthProfile::source(),
        target: SynthProfile::target(),
        source_per_class: args.source_per_class,
        target_per_class: args.target_per_class,
    };
    let workers = workers()?;
    let mut run = RunDir::create(&out.out, out.force)?;
    run.write(CONFIG, config::to_toml(&base)?.as_bytes())?;
    run.write("setup.toml", toml::to_string(&setup)?.as_bytes())?;

    let jobs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..args.seeds.len()).map(move |s| (r, s)))
        .collect();
    log::info!("{} rows x {} seeds on {workers} worker(s)", rows.len(), args.seeds.len());
    let results: Mutex<Vec<Option<Result<Cell>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(r, s)) = jobs.get(j) else { break };
                let cell = run_cell(&rows[r], args.seeds[s], &setup, &args.percents);
                match &cell {
                    Ok(c) => log::info!("{} seed {}: {:?}", rows[r].label, args.seeds[s], c.accuracies),
                    Err(e) => log::error!("{} seed {}: {e:#}", rows[r].label, args.seeds[s]),
                }
                results.lock().expect("no worker panicked")[j] = Some(cell);
            });
        }
    });
    let cells: Vec<Cell> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .zip(&jobs)
        .map(|(c, &(r, s))| {
            c.expect("every job ran")
                .with_context(|| format!("row {} seed {}", rows[r].label, args.seeds[s]))
        })
        .collect::<Result<_>>()?;

    let mut metrics = String::new();
    let mut per_cell = String::from("row,seed,percent,macro_accuracy\n");
    let mut means = vec![vec![0.0; args.percents.len()]; rows.len()];
    for (cell, &(r, s)) in cells.iter().zip(&jobs) {
        for line in &cell.metrics {
            metrics.push_str(line);
            metrics.push('\n');
        }
        for (k, (&p, &acc)) in args.percents.iter().zip(&cell.accuracies).enumerate() {
            writeln!(per_cell, "{},{},{p},{acc:.6}", rows[r].label, args.seeds[s])?;
            means[r][k] += acc / args.seeds.len() as f64;
        }
    }
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    run.write("metrics.jsonl", metrics.as_bytes())?;
    run.write("cells.csv", per_cell.as_bytes())?;
    run.write("table.csv", table_csv(&labels, &args.percents, &means).as_bytes())?;
    let text = table_text(&labels, &args.percents, &args.seeds, &means);
    run.write("table.txt", text.as_bytes())?;
    print!("{text}");
    run.finish("ablate", None, Some(&base.hash()), Some(&resolved.source))
}

fn rows(args: &AblateArgs, base: &TrainConfig) -> Result<Vec<Row>> {
    if args.speed_n.is_some() || args.speed_step.is_some() {
        if args.variants.is_some() {
            bail!("give either --variants or a speed grid, not both");
        }
        let ns = args.speed_n.clone().unwrap_or_else(|| vec![base.speed.n]);
        let steps = args.speed_step.clone().unwrap_or_else(|| vec![base.speed.step]);
        let mut out = Vec::new();
        for &n in &ns {
            for &step in &steps {
                let mut config = base.clone();
                config.speed = SpeedConfig { n, step };
                config.validate().with_context(|| format!("speed grid n={n} s={step}"))?;
                out.push(Row {
                    label: format!("n={n} s={step}"),
                    config,
                });
            }
        }
        Ok(out)
    } else {
        let variants = args.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
        if variants.is_empty() {
            bail!("need at least one variant");
        }
        Ok(variants
            .into_iter()
            .map(|v| Row {
                label: v.to_string(),
                config: TrainConfig { variant: v, ..base.clone() },
            })
            .collect())
    }
}

fn run_cell(row: &Row, seed: u64, setup: &TransferSetup, percents: &[u32]) -> Result<Cell> {
    let cfg = TrainConfig { seed, ..row.config.clone() };
    let data = TransferData::generate(setup, seed, &cfg.model_spec().geometry)?;
    let (pre, fine) = run_transfer_budgets(&cfg, &data, percents)?;
    let line = |m: &EpochMetrics, percent: Option<u32>| {
        json!({"row": row.label, "seed": seed, "percent": percent, "stage": m.stage, "epoch": m.epoch,
               "lr": m.lr, "loss": m.loss, "accuracy": m.accuracy})
        .to_string()
    };
    let mut metrics: Vec<String> = pre.metrics.iter().map(|m| line(m, None)).collect();
    for ((outcome, _), &p) in fine.iter().zip(percents) {
        metrics.extend(outcome.metrics.iter().map(|m| line(m, Some(p))));
    }
    Ok(Cell {
        accuracies: fine.iter().map(|(_, r)| r.macro_accuracy).collect(),
        metrics,
    })
}

fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v}"))?;
            if n == 0 {
                bail!("{WORKERS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

pub fn table_csv(rows: &[&str], percents: &[u32], means: &[Vec<f64>]) -> String {
    let mut s = String::from("row");
    for p in percents {
        let _ = write!(s, ",{p}");
    }
    s.push('\n');
    for (label, row) in rows.iter().zip(means) {
        s.push_str(label);
        for v in row {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn table_text(rows: &[&str], percents: &[u32], seeds: &[u64], means: &[Vec<f64>]) -> String {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(3);
    let mut s = format!("mean macro accuracy (%) over seeds {seeds:?}\n{:<width$}", "row");
    for p in percents {
        let _ = write!(s, " {:>7}", format!("{p}%"));
    }
    s.push('\n');
    for (label, row) in rows.iter().zip(means) {
        let _ = write!(s, "{label:<width$}");
        for v in row {
            let _ = write!(s, " {:>7.2}", v * 100.0);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> AblateArgs {
        AblateArgs {
            variants: None,
            percents: vec![5, 25],
            seeds: vec![0],
            speed_n: None,
            speed_step: None,
            source_per_class: 1,
            target_per_class: 4,
        }
    }

    #[test]
    fn speed_grid_rows() {
        let mut a = args();
        a.speed_n = Some(vec![3, 5, 7]);
        a.speed_step = Some(vec![0.1, 0.05, 0.025]);
        let r = rows(&a, &TrainConfig::desk()).unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(r[4].label, "n=5 s=0.05");
        assert_eq!(r[4].config.speed, SpeedConfig { n: 5, step: 0.05 });
        a.variants = Some(vec![Variant::Mav]);
        assert!(rows(&a, &TrainConfig::desk()).is_err());
    }

    #[test]
    fn variant_rows_default_to_all() {
        let r = rows(&args(), &TrainConfig::desk()).unwrap();
        let labels: Vec<_> = r.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["MAV", "ST", "MV", "AV"]);
    }

    #[test]
    fn tables_have_one_row_per_label() {
        let means = vec![vec![0.5, 0.75], vec![1.0, 0.25]];
        let csv = table_csv(&["MAV", "AV"], &[5, 25], &means);
        assert_eq!(csv, "row,5,25\nMAV,0.500000,0.750000\nAV,1.000000,0.250000\n");
        let txt = table_text(&["MAV", "AV"], &[5, 25], &[0], &means);
        assert_eq!(txt.lines().count(), 4);
        assert!(txt.contains("MAV   50.00   75.00"));
    }
}
