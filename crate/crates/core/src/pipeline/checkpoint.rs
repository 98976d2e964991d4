//! Binary checkpoint format.
//!
//! Layout (little-endian): `MAVG`, version `u32`, metadata length `u32` and UTF-8
//! `key=value` lines, tensor count `u32`, then per tensor: name length `u32`, name, group
//! tag `u8`, trainable flag `u8` (0 frozen, 1 trainable, 2 buffer), rank `u32`, dims `u32`,
//! values `f32`. An optional optimizer section follows: flag `u8`, step `u64`, and for
//! each moment entry the name and both moment vectors.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::loss::{AdamState, Moments};
use crate::nn::{Group, Kind, ParamStore, Tensor};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::model::Model;

pub const MAGIC: &[u8; 4] = b"MAVG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub stage: Stage,
    pub epoch: usize,
    pub base_classes: usize,
    pub speeds: usize,
    pub store: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, stage: Stage, epoch: usize, model: &Model, optimizer: Option<AdamState>) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            stage,
            epoch,
            base_classes: model.base_classes,
            speeds: model.speeds,
            store: model.store.clone(),
            optimizer,
        }
    }

    /// Rebuilds the runnable model.
    pub fn model(&self) -> Result<Model> {
        let spec = self.config.model_spec();
        spec.validate()?;
        Ok(Model {
            spec,
            store: self.store.clone(),
            arcface: self.config.arcface,
            base_classes: self.base_classes,
            speeds: self.speeds,
        })
    }

    /// Errors unless `cfg` is the configuration that produced this checkpoint.
    pub fn verify_config(&self, cfg: &TrainConfig) -> Result<()> {
        let actual = cfg.hash();
        if actual != self.config_hash {
            return Err(Error::ConfigMismatch {
                expected: self.config_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    fn metadata(&self) -> String {
        let mut virtual_map = String::new();
        for v in 0..self.base_classes * self.speeds {
            if v > 0 {
                virtual_map.push(',');
            }
            virtual_map.push_str(&format!("{v}:{}", v / self.speeds));
        }
        [
            ("stage", self.stage.name().to_string()),
            ("epoch", self.epoch.to_string()),
            ("config_hash", self.config_hash.clone()),
            ("base_classes", self.base_classes.to_string()),
            ("speeds", self.speeds.to_string()),
            ("class_map", virtual_map),
            ("config", self.config.to_json()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.metadata())?;
    put_u32(&mut out, ckpt.store.len())?;
    for (name, p) in ckpt.store.iter() {
        put_str(&mut out, name)?;
        out.push(p.group.tag());
        out.push(match (p.kind, p.trainable) {
            (Kind::Buffer, _) => 2,
            (Kind::Weight, true) => 1,
            (Kind::Weight, false) => 0,
        });
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, p.value.data());
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            put_u32(&mut out, st.moments.len())?;
            for (name, m) in &st.moments {
                put_str(&mut out, name)?;
                put_u32(&mut out, m.m.len())?;
                put_f32s(&mut out, &m.m);
                put_f32s(&mut out, &m.v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_text = r.string()?;
    let mut meta = IndexMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("metadata line `{line}` lacks `=`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
    };
    let number = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not a number")))
    };
    let stage = match field("stage")?.as_str() {
        "pretrain" => Stage::Pretrain,
        "finetune" => Stage::Finetune,
        other => return Err(Error::Checkpoint(format!("unknown stage `{other}`"))),
    };
    let config = TrainConfig::from_json(&field("config")?)?;
    let config_hash = field("config_hash")?;
    let (epoch, base_classes, speeds) = (number("epoch")?, number("base_classes")?, number("speeds")?);

    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.u8()?;
        let group = Group::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown group tag {tag} on `{name}`")))?;
        let flag = r.u8()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let data = r.f32s(numel)?;
        let kind = match flag {
            0 | 1 => Kind::Weight,
            2 => Kind::Buffer,
            f => return Err(Error::Checkpoint(format!("bad trainable flag {f} on `{name}`"))),
        };
        let id = store.insert(&name, Tensor::new(shape, data)?, group, kind)?;
        store.get_mut(id).trainable = flag == 1;
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u32()?;
            let mut moments = IndexMap::new();
            for _ in 0..n {
                let name = r.string()?;
                let len = r.u32()?;
                let m = r.f32s(len)?;
                let v = r.f32s(len)?;
                moments.insert(name, Moments { m, v });
            }
            Some(AdamState { step, moments })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        config_hash,
        stage,
        epoch,
        base_classes,
        speeds,
        store,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
