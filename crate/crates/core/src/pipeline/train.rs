//! Pre-training and fine-tuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{canonicalize, load_sample, Geometry, SampleRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::loss::{adam_step, lr_at, AdamState, LrSchedule, HEAD_WEIGHT};
use crate::nn::{Graph, Group, ParamStore};
use crate::pipeline::checkpoint::{Checkpoint, Stage};
use crate::pipeline::config::{HeadInit, TrainConfig};
use crate::pipeline::model::{embed, FeatureBuilder, ItemInputs, Model, Prepared};
use crate::signal::{virtual_label, Waveform};

/// Groups updated during fine-tuning; everything else is frozen.
pub const FINETUNE_GROUPS: [Group; 4] = [Group::TgramA, Group::TgramV, Group::MfnLastFc, Group::ArcfaceHead];

const HEAD_SEED_OFFSET: u64 = 0x6865_6164;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest mean training loss.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub fn prepare_waves(acoustic: &Waveform, vibration: &Waveform, label: usize, geom: &Geometry) -> Result<Prepared> {
    if label >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let (acoustic, vibration) = canonicalize(acoustic, vibration, geom)?;
    Ok(Prepared {
        acoustic,
        vibration,
        label,
    })
}

/// Loads and canonicalizes every record.
pub fn prepare(records: &[SampleRecord], geom: &Geometry) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            let (a, v) = load_sample(r)?;
            prepare_waves(&a, &v, r.label, geom)
        })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn run(model: &mut Model, cfg: &TrainConfig, data: &[Prepared], stage: Stage) -> Result<TrainOutcome> {
    let grid = cfg.speed_grid()?;
    let n = grid.n();
    let sched = LrSchedule::new(cfg.base_lr, cfg.min_lr, cfg.epochs)?;
    let fb = FeatureBuilder::new(&model.spec)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
    });
    let mut items: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..n).map(move |s| (i, s))).collect();
    let mut cache: Vec<Option<ItemInputs>> = vec![None; items.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore, AdamState)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(&sched, epoch - 1)?;
        items.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in items.chunks(cfg.batch) {
            for &(i, s) in chunk {
                if cache[i * n + s].is_none() {
                    cache[i * n + s] = Some(fb.item(&data[i], grid.factors()[s])?);
                }
            }
            let inputs: Vec<(&Prepared, &ItemInputs)> = chunk
                .iter()
                .map(|&(i, s)| (&data[i], cache[i * n + s].as_ref().expect("filled above")))
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&(i, s)| virtual_label(data[i].label, s, n)).collect();
            let batch = fb.assemble(&inputs)?;
            let mut g = Graph::train(&mut model.store);
            let emb = embed(&mut g, &model.spec, &batch)?;
            let (cos, logits) = model.arcface.logits(&mut g, emb, Some(&targets))?;
            let loss = g.cross_entropy(logits, &targets)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Optimizer(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += lv * chunk.len() as f64;
            let classes = g.value(cos).shape()[1];
            correct += g
                .value(cos)
                .data()
                .chunks(classes)
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            g.backward(loss)?;
            drop(g);
            adam_step(&mut model.store, &mut adam, lr, &cfg.adam)?;
        }
        let m = EpochMetrics {
            stage: stage.name(),
            epoch,
            lr,
            loss: loss_sum / items.len() as f64,
            accuracy: correct as f64 / items.len() as f64,
        };
        log::info!(
            "{} epoch {}/{}: lr {:.3e} loss {:.4} acc {:.3}",
            m.stage,
            epoch,
            cfg.epochs,
            lr,
            m.loss,
            m.accuracy
        );
        if best.as_ref().is_none_or(|b| m.loss < b.0) {
            best = Some((m.loss, epoch, model.store.clone(), adam.clone()));
        }
        metrics.push(m);
    }
    let (_, epoch, store, adam) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg, stage, epoch, model, Some(adam)),
        metrics,
    })
}

/// Trains every tensor from scratch on `data` with `n` speed variants per sample.
pub fn pretrain(cfg: &TrainConfig, data: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("pre-training set is empty".into()));
    }
    let mut model = Model::new(cfg.model_spec(), cfg.arcface, NUM_CLASSES, cfg.speed.n, cfg.seed)?;
    run(&mut model, cfg, data, Stage::Pretrain)
}

/// Adapts a pre-trained checkpoint: temporal front ends, the embedding layer and a fresh
/// head are trained; the backbone, including its batch-norm statistics, stays fixed.
pub fn finetune(ckpt: &Checkpoint, cfg: &TrainConfig, data: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning set is empty".into()));
    }
    let mut model = ckpt.model()?;
    if model.spec != cfg.model_spec() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was built for {:?}/{:?}, config asks for {:?}/{:?}",
            ckpt.config.preset, ckpt.config.variant, cfg.preset, cfg.variant
        )));
    }
    if let Some(g) = model.required_groups().into_iter().find(|&g| !model.store.has_group(g)) {
        return Err(Error::Checkpoint(format!("checkpoint lacks parameter group `{}`", g.name())));
    }
    model.reset_head(NUM_CLASSES, cfg.speed.n, cfg.seed.wrapping_add(HEAD_SEED_OFFSET))?;
    if cfg.head_init == HeadInit::Imprint {
        imprint_head(&mut model, cfg, data)?;
    }
    for g in Group::ALL {
        model.store.set_group_trainable(g, FINETUNE_GROUPS.contains(&g));
    }
    run(&mut model, cfg, data, Stage::Finetune)
}

/// Overwrites each head row that has fine-tune items with their mean unit embedding; rows
/// without items keep their random initialization.
fn imprint_head(model: &mut Model, cfg: &TrainConfig, data: &[Prepared]) -> Result<()> {
    let grid = cfg.speed_grid()?;
    let n = grid.n();
    let fb = FeatureBuilder::new(&model.spec)?;
    let dim = model.spec.mfn.embedding_dim;
    let mut sums = vec![vec![0.0f64; dim]; model.virtual_classes()];
    let items: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..n).map(move |s| (i, s))).collect();
    for chunk in items.chunks(cfg.batch) {
        let pairs: Vec<(&Prepared, f64)> = chunk.iter().map(|&(i, s)| (&data[i], grid.factors()[s])).collect();
        let batch = fb.batch(&pairs)?;
        let mut g = Graph::eval(&model.store);
        let emb = embed(&mut g, &model.spec, &batch)?;
        for (row, &(i, s)) in g.value(emb).data().chunks(dim).zip(chunk) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            let acc = &mut sums[virtual_label(data[i].label, s, n)];
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64 / norm);
        }
    }
    let head = model
        .store
        .by_name_mut(HEAD_WEIGHT)
        .ok_or_else(|| Error::MissingParam(HEAD_WEIGHT.into()))?;
    for (dst, sum) in head.value.data_mut().chunks_mut(dim).zip(&sums) {
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            dst.iter_mut().zip(sum).for_each(|(d, v)| *d = (v / norm) as f32);
        }
    }
    Ok(())
}
