//! Learned temporal front end: a large-kernel strided 1-D conv followed by blocks of
//! [channel layer norm, leaky ReLU, 1-D conv]. Acoustic and vibration streams each own a
//! separate instance, distinguished by parameter prefix and group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::map::{Channel, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{Graph, Group, Kind, ParamStore, Tensor, Var};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgramConfig {
    pub in_kernel: usize,
    pub in_stride: usize,
    pub in_pad: usize,
    pub out_channels: usize,
    pub block_count: usize,
    pub block_kernel: usize,
    pub leaky_slope: f32,
}

impl Default for TgramConfig {
    fn default() -> Self {
        Self {
            in_kernel: 1024,
            in_stride: 512,
            in_pad: 512,
            out_channels: 64,
            block_count: 3,
            block_kernel: 3,
            leaky_slope: 0.01,
        }
    }
}

impl TgramConfig {
    pub fn frames(&self, len: usize) -> usize {
        (len + 2 * self.in_pad - self.in_kernel) / self.in_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_kernel == 0 || self.in_stride == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("front conv dimensions must be positive".into()));
        }
        if self.block_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "block kernel {} must be odd to preserve length",
                self.block_kernel
            )));
        }
        Ok(())
    }
}

/// The two learned streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Acoustic,
    Vibration,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Acoustic => "tgram_a",
            Stream::Vibration => "tgram_v",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Stream::Acoustic => Group::TgramA,
            Stream::Vibration => Group::TgramV,
        }
    }

    pub fn channel(self) -> Channel {
        match self {
            Stream::Acoustic => Channel::A,
            Stream::Vibration => Channel::V,
        }
    }
}

pub fn init_params<R: Rng>(store: &mut ParamStore, stream: Stream, cfg: &TgramConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (p, g, c) = (stream.prefix(), stream.group(), cfg.out_channels);
    store.insert_uniform(&format!("{p}.front.weight"), vec![c, 1, cfg.in_kernel], cfg.in_kernel, g, rng)?;
    store.insert(&format!("{p}.front.bias"), Tensor::zeros(vec![c]), g, Kind::Weight)?;
    for i in 0..cfg.block_count {
        store.insert(&format!("{p}.block{i}.ln.gamma"), Tensor::full(vec![c], 1.0), g, Kind::Weight)?;
        store.insert(&format!("{p}.block{i}.ln.beta"), Tensor::zeros(vec![c]), g, Kind::Weight)?;
        store.insert_uniform(
            &format!("{p}.block{i}.conv.weight"),
            vec![c, c, cfg.block_kernel],
            c * cfg.block_kernel,
            g,
            rng,
        )?;
        store.insert(&format!("{p}.block{i}.conv.bias"), Tensor::zeros(vec![c]), g, Kind::Weight)?;
    }
    Ok(())
}

/// `[B, 1, L]` raw samples to `[B, out_channels, frames]`.
pub fn forward(g: &mut Graph, stream: Stream, cfg: &TgramConfig, x: Var) -> Result<Var> {
    let p = stream.prefix();
    let w = g.param(&format!("{p}.front.weight"))?;
    let b = g.param(&format!("{p}.front.bias"))?;
    let expect = [cfg.out_channels, 1, cfg.in_kernel];
    if g.value(w).shape() != expect {
        return Err(Error::Shape(format!(
            "{p}.front.weight is {:?}, config expects {expect:?}",
            g.value(w).shape()
        )));
    }
    let mut h = g.conv1d(x, w, Some(b), cfg.in_stride, cfg.in_pad)?;
    for i in 0..cfg.block_count {
        let gamma = g.param(&format!("{p}.block{i}.ln.gamma"))?;
        let beta = g.param(&format!("{p}.block{i}.ln.beta"))?;
        h = g.layer_norm_channels(h, gamma, beta)?;
        h = g.leaky_relu(h, cfg.leaky_slope)?;
        let w = g.param(&format!("{p}.block{i}.conv.weight"))?;
        let b = g.param(&format!("{p}.block{i}.conv.bias"))?;
        h = g.conv1d(h, w, Some(b), 1, cfg.block_kernel / 2)?;
    }
    Ok(h)
}

/// Inference-only temporal feature of one waveform.
pub fn tgram_forward(store: &ParamStore, x: &Waveform, cfg: &TgramConfig, stream: Stream) -> Result<FeatureMap> {
    let mut g = Graph::eval(store);
    let input = g.input(Tensor::new(vec![1, 1, x.len()], x.samples().to_vec())?);
    let out = forward(&mut g, stream, cfg, input)?;
    let frames = g.value(out).shape()[2];
    FeatureMap::new(
        vec![stream.channel()],
        cfg.out_channels,
        frames,
        g.value(out).data().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn canonical_geometry() {
        let cfg = TgramConfig::default();
        assert_eq!(cfg.frames(192_000), 376);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_params(&mut store, Stream::Acoustic, &cfg, &mut rng).unwrap();
        let x = Waveform::new((0..192_000).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect(), 48_000.0).unwrap();
        let f = tgram_forward(&store, &x, &cfg, Stream::Acoustic).unwrap();
        assert_eq!(f.shape(), [1, 64, 376]);
        assert_eq!(f.tags(), &[Channel::A]);
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = TgramConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_params(&mut store, Stream::Vibration, &cfg, &mut rng).unwrap();
        let x = Waveform::new(vec![0.0; 4096], 48_000.0).unwrap();
        let f = tgram_forward(&store, &x, &cfg, Stream::Vibration).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn streams_are_independent() {
        let cfg = TgramConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_params(&mut store, Stream::Acoustic, &cfg, &mut rng).unwrap();
        init_params(&mut store, Stream::Vibration, &cfg, &mut rng).unwrap();
        let x = Waveform::new((0..8192).map(|i| (i as f32 * 0.01).sin()).collect(), 48_000.0).unwrap();
        let before = tgram_forward(&store, &x, &cfg, Stream::Vibration).unwrap();
        for (name, p) in store.iter_mut() {
            if name.starts_with("tgram_a") {
                p.value.data_mut().iter_mut().for_each(|v| *v += 0.5);
            }
        }
        let after = tgram_forward(&store, &x, &cfg, Stream::Vibration).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn wrong_kernel_is_rejected() {
        let cfg = TgramConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_params(&mut store, Stream::Acoustic, &cfg, &mut rng).unwrap();
        let other = TgramConfig {
            in_kernel: 512,
            ..cfg
        };
        let x = Waveform::new(vec![0.0; 4096], 48_000.0).unwrap();
        assert!(matches!(
            tgram_forward(&store, &x, &other, Stream::Acoustic),
            Err(Error::Shape(_))
        ));
    }
}
