//! Named parameter storage with freeze flags and group tags.

use indexmap::IndexMap;
use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which part of the network a tensor belongs to. The fine-tuning freeze policy is expressed
/// in terms of these groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    TgramA,
    TgramV,
    MfnBackbone,
    MfnLastFc,
    ArcfaceHead,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::TgramA,
        Group::TgramV,
        Group::MfnBackbone,
        Group::MfnLastFc,
        Group::ArcfaceHead,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Group::TgramA => 0,
            Group::TgramV => 1,
            Group::MfnBackbone => 2,
            Group::MfnLastFc => 3,
            Group::ArcfaceHead => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::TgramA => "tgram_a",
            Group::TgramV => "tgram_v",
            Group::MfnBackbone => "mfn_backbone",
            Group::MfnLastFc => "mfn_last_fc",
            Group::ArcfaceHead => "arcface_head",
        }
    }
}

/// Learnable weight or a running statistic that is updated outside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub trainable: bool,
    pub group: Group,
    pub kind: Kind,
}

impl Param {
    /// Receives gradients and optimizer updates.
    pub fn is_learnable(&self) -> bool {
        self.trainable && self.kind == Kind::Weight
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, group: Group, kind: Kind) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let (idx, _) = self.entries.insert_full(
            name.to_string(),
            Param {
                value,
                grad: None,
                trainable: kind == Kind::Weight,
                group,
                kind,
            },
        );
        Ok(ParamId(idx))
    }

    /// Inserts with a centered uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?, group, Kind::Weight)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Removes every tensor of `group`, keeping the order of the rest.
    pub fn remove_group(&mut self, group: Group) {
        self.entries.retain(|_, p| p.group != group);
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.entries.values().any(|p| p.group == group)
    }

    pub fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        for p in self.entries.values_mut() {
            if p.group == group && p.kind == Kind::Weight {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == Kind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }
}
