//! Additive angular margin head, softmax cross-entropy, Adam and the cosine learning-rate
//! schedule.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kernels, Graph, Group, ParamStore, Tensor, Var};

pub const HEAD_WEIGHT: &str = "arcface.weight";

/// Margin and scale of the angular-margin logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFace {
    pub margin: f64,
    pub scale: f64,
}

impl Default for ArcFace {
    fn default() -> Self {
        Self { margin: 0.7, scale: 30.0 }
    }
}

impl ArcFace {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!("margin {} outside [0, pi)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Registers a `[classes, dim]` head in `store` under [`HEAD_WEIGHT`].
    pub fn init_head<R: Rng>(store: &mut ParamStore, classes: usize, dim: usize, rng: &mut R) -> Result<()> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("head needs at least one class and dimension".into()));
        }
        store.insert_uniform(HEAD_WEIGHT, vec![classes, dim], dim, Group::ArcfaceHead, rng)?;
        Ok(())
    }

    /// Cosines and logits `[B, classes]` for embeddings `[B, dim]`. With `targets` the margin
    /// is applied to each row's target entry; without, all logits are scaled cosines.
    pub fn logits(&self, g: &mut Graph, emb: Var, targets: Option<&[usize]>) -> Result<(Var, Var)> {
        self.validate()?;
        let e = g.l2_normalize(emb)?;
        let w = g.param(HEAD_WEIGHT)?;
        let wn = g.l2_normalize(w)?;
        let cos = g.linear(e, wn, None)?;
        let logits = match targets {
            Some(t) => g.arc_margin(cos, t, self.margin, self.scale)?,
            None => {
                // a zero margin reproduces the cosine exactly
                let rows = g.value(cos).shape()[0];
                g.arc_margin(cos, &vec![0; rows], 0.0, self.scale)?
            }
        };
        Ok((cos, logits))
    }
}

/// A standalone head with its own weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceHead {
    weight: Tensor,
    pub params: ArcFace,
}

impl ArcFaceHead {
    pub fn new(weight: Tensor, params: ArcFace) -> Result<Self> {
        params.validate()?;
        if weight.rank() != 2 {
            return Err(Error::Shape(format!("head weight {:?} must be a matrix", weight.shape())));
        }
        Ok(Self { weight, params })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|&x| x as f64 / n).collect())
}

/// Angular-margin logits of one embedding in `f64`.
pub fn arcface_logits(emb: &[f32], head: &ArcFaceHead, target: Option<usize>) -> Result<Vec<f64>> {
    if emb.len() != head.dim() {
        return Err(Error::Shape(format!("embedding of {} vs head dim {}", emb.len(), head.dim())));
    }
    if let Some(t) = target.filter(|&t| t >= head.classes()) {
        return Err(Error::InvalidArgument(format!("target {t} out of {} classes", head.classes())));
    }
    let e = unit(emb).ok_or_else(|| Error::InvalidArgument("zero or non-finite embedding".into()))?;
    let ArcFace { margin, scale } = head.params;
    head.weight
        .data()
        .chunks(head.dim())
        .enumerate()
        .map(|(j, row)| {
            let w = unit(row).ok_or_else(|| Error::InvalidArgument(format!("head row {j} is zero")))?;
            let c: f64 = e.iter().zip(&w).map(|(a, b)| a * b).sum();
            let c = if target == Some(j) { kernels::margin_cosine(c, margin) } else { c };
            Ok(scale * c)
        })
        .collect()
}

/// `-log softmax(logits)[target]`, max-subtracted.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!("target {target} out of {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln() - logits[target])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every learnable tensor in `store`. Frozen tensors and
/// buffers are never touched. Gradients are consumed.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Optimizer(format!("learning rate {lr} is invalid")));
    }
    if let Some((name, _)) = store.iter().find(|(_, p)| p.is_learnable() && p.grad.is_none()) {
        return Err(Error::Optimizer(format!("trainable tensor `{name}` has no gradient")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.iter_mut() {
        if !p.is_learnable() {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let n = p.value.numel();
        let mo = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if mo.m.len() != n || grad.len() != n {
            return Err(Error::Optimizer(format!("size mismatch for `{name}`")));
        }
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(&mut mo.m).zip(&mut mo.v) {
            let g = g as f64;
            let m1 = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at epoch 0 to `min_lr` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_epochs: usize) -> Result<Self> {
        if !(base_lr >= min_lr && min_lr >= 0.0 && base_lr.is_finite()) || total_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule {base_lr} -> {min_lr} over {total_epochs} epochs"
            )));
        }
        Ok(Self {
            base_lr,
            min_lr,
            total_epochs,
        })
    }
}

pub fn lr_at(sched: &LrSchedule, epoch: usize) -> Result<f64> {
    if epoch > sched.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond schedule of {}",
            sched.total_epochs
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / sched.total_epochs as f64;
    Ok(sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + phase.cos()))
}
