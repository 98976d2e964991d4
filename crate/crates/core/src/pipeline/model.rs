//! The fused classifier: per-variant feature channels feeding the embedding network, plus
//! the angular-margin head over virtual classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{tgram, Channel, LogMel, Stream};
use crate::loss::ArcFace;
use crate::nn::{mfn, Graph, Group, ParamStore, Tensor, Var};
use crate::pipeline::config::ModelSpec;
use crate::signal::{speed_perturb, Waveform};

/// Canonicalized, normalized recordings of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub acoustic: Waveform,
    pub vibration: Waveform,
    pub label: usize,
}

/// Network inputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub acoustic: Option<Vec<f32>>,
    pub vibration: Option<Vec<f32>>,
    pub mgram: Option<Vec<f32>>,
}

/// Builds network inputs, applying a speed factor per item.
pub struct FeatureBuilder {
    spec: ModelSpec,
    log_mel: LogMel,
}

impl FeatureBuilder {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let log_mel = LogMel::new(spec.stft, spec.mel, spec.geometry.rate)?;
        Ok(Self {
            spec: spec.clone(),
            log_mel,
        })
    }

    pub fn log_mel(&self) -> &LogMel {
        &self.log_mel
    }

    /// Speed-perturbed signals and log-mel map for one item; depends only on the sample
    /// and the factor, so callers may keep it across epochs.
    pub fn item(&self, p: &Prepared, factor: f64) -> Result<ItemInputs> {
        let v = self.spec.variant;
        let n = self.spec.geometry.samples;
        for x in [&p.acoustic, &p.vibration] {
            if x.len() != n || x.rate() != self.spec.geometry.rate {
                return Err(Error::Shape(format!(
                    "prepared signal is {} samples at {} Hz, expected {n} at {} Hz",
                    x.len(),
                    x.rate(),
                    self.spec.geometry.rate
                )));
            }
        }
        let perturb = |x: &Waveform| -> Result<Option<Waveform>> {
            if factor == 1.0 {
                Ok(None)
            } else {
                speed_perturb(x, factor).map(Some)
            }
        };
        let acoustic = if v.uses(Channel::A) || v.uses(Channel::M) {
            perturb(&p.acoustic)?
        } else {
            None
        };
        let mgram = if v.uses(Channel::M) {
            Some(self.log_mel.compute(acoustic.as_ref().unwrap_or(&p.acoustic))?.into_data())
        } else {
            None
        };
        let vibration = if v.uses(Channel::V) { perturb(&p.vibration)? } else { None };
        Ok(ItemInputs {
            acoustic: acoustic.filter(|_| v.uses(Channel::A)),
            vibration,
            mgram,
        })
    }

    /// Stacks per-item inputs into a batch.
    pub fn assemble(&self, items: &[(&Prepared, &ItemInputs)]) -> Result<Batch> {
        let v = self.spec.variant;
        let n = self.spec.geometry.samples;
        let mut acoustic = v.uses(Channel::A).then(|| Vec::with_capacity(items.len() * n));
        let mut vibration = v.uses(Channel::V).then(|| Vec::with_capacity(items.len() * n));
        let mut mgram = v.uses(Channel::M).then(Vec::new);
        for &(p, inputs) in items {
            if let Some(buf) = acoustic.as_mut() {
                buf.extend_from_slice(inputs.acoustic.as_ref().unwrap_or(&p.acoustic).samples());
            }
            if let Some(buf) = vibration.as_mut() {
                buf.extend_from_slice(inputs.vibration.as_ref().unwrap_or(&p.vibration).samples());
            }
            if let Some(buf) = mgram.as_mut() {
                let m = inputs
                    .mgram
                    .as_ref()
                    .ok_or_else(|| Error::Shape("item inputs lack the log-mel map".into()))?;
                buf.extend_from_slice(m);
            }
        }
        Ok(Batch {
            size: items.len(),
            acoustic,
            vibration,
            mgram,
        })
    }

    pub fn batch(&self, items: &[(&Prepared, f64)]) -> Result<Batch> {
        let inputs = items
            .iter()
            .map(|&(p, f)| self.item(p, f))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&Prepared, &ItemInputs)> = items.iter().map(|&(p, _)| p).zip(&inputs).collect();
        self.assemble(&pairs)
    }
}

/// Per-item feature inputs; perturbed signals are `None` when the factor is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemInputs {
    pub acoustic: Option<Waveform>,
    pub vibration: Option<Waveform>,
    pub mgram: Option<Vec<f32>>,
}

/// Parameter store plus the structure needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub arcface: ArcFace,
    pub base_classes: usize,
    pub speeds: usize,
}

impl Model {
    /// Fresh weights; initialization is fully determined by `seed`.
    pub fn new(spec: ModelSpec, arcface: ArcFace, base_classes: usize, speeds: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        arcface.validate()?;
        if base_classes == 0 || speeds == 0 {
            return Err(Error::InvalidArgument("need at least one class and one speed".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for stream in [Stream::Acoustic, Stream::Vibration] {
            if spec.variant.uses(stream.channel()) {
                tgram::init_params(&mut store, stream, &spec.tgram, &mut rng)?;
            }
        }
        mfn::init_params(&mut store, &spec.mfn, &mut rng)?;
        ArcFace::init_head(&mut store, base_classes * speeds, spec.mfn.embedding_dim, &mut rng)?;
        Ok(Self {
            spec,
            store,
            arcface,
            base_classes,
            speeds,
        })
    }

    pub fn virtual_classes(&self) -> usize {
        self.base_classes * self.speeds
    }

    /// Groups that must be present for this variant.
    pub fn required_groups(&self) -> Vec<Group> {
        let mut g = Vec::new();
        if self.spec.variant.uses(Channel::A) {
            g.push(Group::TgramA);
        }
        if self.spec.variant.uses(Channel::V) {
            g.push(Group::TgramV);
        }
        g.extend([Group::MfnBackbone, Group::MfnLastFc, Group::ArcfaceHead]);
        g
    }

    /// Replaces the head with a fresh one over `base_classes * speeds` rows.
    pub fn reset_head(&mut self, base_classes: usize, speeds: usize, seed: u64) -> Result<()> {
        self.store.remove_group(Group::ArcfaceHead);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArcFace::init_head(&mut self.store, base_classes * speeds, self.spec.mfn.embedding_dim, &mut rng)?;
        self.base_classes = base_classes;
        self.speeds = speeds;
        Ok(())
    }
}

/// Embeddings `[B, dim]` for a batch.
pub fn embed(g: &mut Graph, spec: &ModelSpec, batch: &Batch) -> Result<Var> {
    let (b, n) = (batch.size, spec.geometry.samples);
    let (mels, frames) = (spec.mel.n_mels, spec.frames());
    let missing = |c: Channel| Error::InvalidArgument(format!("batch lacks the {c:?} input"));
    let mut parts = Vec::new();
    for &c in spec.variant.channels() {
        let part = match c {
            Channel::M => {
                let m = batch.mgram.clone().ok_or_else(|| missing(c))?;
                g.input(Tensor::new(vec![b, 1, mels, frames], m)?)
            }
            Channel::A | Channel::V => {
                let (stream, data) = if c == Channel::A {
                    (Stream::Acoustic, &batch.acoustic)
                } else {
                    (Stream::Vibration, &batch.vibration)
                };
                let x = g.input(Tensor::new(vec![b, 1, n], data.clone().ok_or_else(|| missing(c))?)?);
                let t = tgram::forward(g, stream, &spec.tgram, x)?;
                g.reshape(t, vec![b, 1, mels, frames])?
            }
        };
        parts.push(part);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_channels(&parts)?
    };
    mfn::forward(g, &spec.mfn, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Variant;
    use crate::pipeline::config::Preset;

    #[test]
    fn variants_own_their_streams() {
        for v in Variant::ALL {
            let m = Model::new(ModelSpec::new(Preset::Micro, v), ArcFace::default(), 5, 3, 1).unwrap();
            assert_eq!(m.store.has_group(Group::TgramA), v.uses(Channel::A));
            assert_eq!(m.store.has_group(Group::TgramV), v.uses(Channel::V));
            assert_eq!(m.store.by_name(crate::loss::HEAD_WEIGHT).unwrap().value.shape()[0], 15);
        }
    }

    #[test]
    fn micro_forward_shapes() {
        let spec = ModelSpec::new(Preset::Micro, Variant::Mav);
        let m = Model::new(spec.clone(), ArcFace::default(), 2, 1, 2).unwrap();
        let fb = FeatureBuilder::new(&spec).unwrap();
        let wave = |f: f64| {
            Waveform::new(
                (0..2048).map(|i| (f * i as f64 / 8000.0 * std::f64::consts::TAU).sin() as f32).collect(),
                8000.0,
            )
            .unwrap()
        };
        let p = Prepared {
            acoustic: wave(440.0),
            vibration: wave(100.0),
            label: 0,
        };
        let batch = fb.batch(&[(&p, 1.0), (&p, 1.1)]).unwrap();
        let mut g = Graph::eval(&m.store);
        let e = embed(&mut g, &spec, &batch).unwrap();
        assert_eq!(g.value(e).shape(), &[2, 16]);
    }
}
