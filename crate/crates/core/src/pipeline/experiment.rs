//! Source-to-target transfer runs on synthetic data: pre-train on the source profile,
//! fine-tune on a budgeted share of the target set, evaluate on the fixed target test split.

use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Generator, Geometry, SynthProfile, NUM_CLASSES};
use crate::error::Result;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::eval::{evaluate, Report};
use crate::pipeline::model::Prepared;
use crate::pipeline::train::{finetune, prepare_waves, pretrain, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSetup {
    pub source: SynthProfile,
    pub target: SynthProfile,
    pub source_per_class: usize,
    pub target_per_class: usize,
}

impl Default for TransferSetup {
    fn default() -> Self {
        Self {
            source: SynthProfile::source(),
            target: SynthProfile::target(),
            source_per_class: 40,
            target_per_class: 40,
        }
    }
}

/// Canonicalized source and target samples for one data seed.
#[derive(Debug, Clone)]
pub struct TransferData {
    pub source: Vec<Prepared>,
    pub target: Vec<Prepared>,
}

/// Generates `per_class` samples of every class, canonicalized to `geom`.
pub fn synth_prepared(profile: &SynthProfile, per_class: usize, seed: u64, geom: &Geometry) -> Result<Vec<Prepared>> {
    let g = Generator::new(profile.clone(), seed)?;
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for index in 0..per_class {
            let (a, v) = g.sample(class, index)?;
            out.push(prepare_waves(&a, &v, class, geom)?);
        }
    }
    Ok(out)
}

impl TransferData {
    pub fn generate(setup: &TransferSetup, seed: u64, geom: &Geometry) -> Result<Self> {
        Ok(Self {
            source: synth_prepared(&setup.source, setup.source_per_class, seed, geom)?,
            target: synth_prepared(&setup.target, setup.target_per_class, seed, geom)?,
        })
    }

    /// `(finetune, test)` target samples for a budget of `percent`.
    pub fn target_split(&self, percent: u32, seed: u64) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
        let labels: Vec<usize> = self.target.iter().map(|p| p.label).collect();
        let (ft, test) = split_indices(&labels, percent, seed)?;
        let pick = |ix: &[usize]| ix.iter().map(|&i| self.target[i].clone()).collect::<Vec<_>>();
        Ok((pick(&ft), pick(&test)))
    }
}

#[derive(Debug, Clone)]
pub struct TransferRun {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
    pub report: Report,
}

/// Full protocol for `cfg`; the split uses `cfg.seed`.
pub fn run_transfer(cfg: &TrainConfig, data: &TransferData, percent: u32) -> Result<TransferRun> {
    let (ft, test) = data.target_split(percent, cfg.seed)?;
    let pre = pretrain(cfg, &data.source)?;
    let fine = finetune(&pre.checkpoint, cfg, &ft)?;
    let report = evaluate(&fine.checkpoint, cfg, &test)?;
    Ok(TransferRun {
        pretrain: pre,
        finetune: fine,
        report,
    })
}

/// Pre-trains once and fine-tunes/evaluates for each budget in `percents`.
pub fn run_transfer_budgets(cfg: &TrainConfig, data: &TransferData, percents: &[u32]) -> Result<(TrainOutcome, Vec<(TrainOutcome, Report)>)> {
    let pre = pretrain(cfg, &data.source)?;
    let mut out = Vec::with_capacity(percents.len());
    for &p in percents {
        let (ft, test) = data.target_split(p, cfg.seed)?;
        let fine = finetune(&pre.checkpoint, cfg, &ft)?;
        let report = evaluate(&fine.checkpoint, cfg, &test)?;
        out.push((fine, report));
    }
    Ok((pre, out))
}
