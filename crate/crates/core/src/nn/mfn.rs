//! A reduced MobileFaceNet-style embedding network.
//!
//! Layout: 3x3/2 stem conv, 3x3 depthwise conv, inverted-residual bottleneck stages, a 1x1
//! conv widening to the pre-embedding width, a global depthwise conv that collapses the
//! remaining spatial extent, and a final linear layer producing the embedding. Every conv is
//! followed by batch norm; PReLU is used as activation except after projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Group, Kind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PRELU_INIT: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckStage {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfnSpec {
    pub in_channels: usize,
    /// Input height and width (mel bins, frames).
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub stages: Vec<BottleneckStage>,
    pub conv_out_channels: usize,
    pub embedding_dim: usize,
}

fn conv_out(n: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1
    (n + 2 - 3) / stride + 1
}

impl MfnSpec {
    /// Full-width network for 64 x 376 inputs.
    pub fn canonical(in_channels: usize) -> Self {
        Self {
            in_channels,
            input_hw: (64, 376),
            stem_channels: 64,
            stages: vec![
                BottleneckStage {
                    expansion: 2,
                    channels: 64,
                    repeats: 2,
                    stride: 2,
                },
                BottleneckStage {
                    expansion: 4,
                    channels: 128,
                    repeats: 2,
                    stride: 2,
                },
                BottleneckStage {
                    expansion: 4,
                    channels: 128,
                    repeats: 2,
                    stride: 2,
                },
            ],
            conv_out_channels: 512,
            embedding_dim: 128,
        }
    }

    /// Same topology and geometry as [`MfnSpec::canonical`] at a quarter of the width.
    pub fn desk(in_channels: usize) -> Self {
        let mut spec = Self::canonical(in_channels);
        spec.stem_channels = 16;
        for (stage, ch) in spec.stages.iter_mut().zip([16, 32, 32]) {
            stage.channels = ch;
        }
        spec.conv_out_channels = 128;
        spec
    }

    /// Spatial size after the stem and after every stage.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (conv_out(self.input_hw.0, 2), conv_out(self.input_hw.1, 2));
        let mut trace = vec![(h, w)];
        for st in &self.stages {
            h = conv_out(h, st.stride);
            w = conv_out(w, st.stride);
            trace.push((h, w));
        }
        trace
    }

    pub fn gdc_kernel(&self) -> (usize, usize) {
        *self.spatial_trace().last().expect("trace is never empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.embedding_dim == 0 || self.conv_out_channels == 0 {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        if self.input_hw.0 < 2 || self.input_hw.1 < 2 {
            return Err(Error::InvalidArgument(format!("input {:?} too small", self.input_hw)));
        }
        if self
            .stages
            .iter()
            .any(|s| s.expansion == 0 || s.channels == 0 || s.repeats == 0 || s.stride == 0)
        {
            return Err(Error::InvalidArgument("bottleneck stage fields must be positive".into()));
        }
        Ok(())
    }
}

fn add_bn(store: &mut ParamStore, prefix: &str, ch: usize) -> Result<()> {
    let g = Group::MfnBackbone;
    store.insert(&format!("{prefix}.bn.gamma"), Tensor::full(vec![ch], 1.0), g, Kind::Weight)?;
    store.insert(&format!("{prefix}.bn.beta"), Tensor::zeros(vec![ch]), g, Kind::Weight)?;
    store.insert(&format!("{prefix}.bn.mean"), Tensor::zeros(vec![ch]), g, Kind::Buffer)?;
    store.insert(&format!("{prefix}.bn.var"), Tensor::full(vec![ch], 1.0), g, Kind::Buffer)?;
    Ok(())
}

fn add_prelu(store: &mut ParamStore, prefix: &str, ch: usize) -> Result<()> {
    store.insert(
        &format!("{prefix}.prelu"),
        Tensor::full(vec![ch], PRELU_INIT),
        Group::MfnBackbone,
        Kind::Weight,
    )?;
    Ok(())
}

fn add_conv<R: Rng>(store: &mut ParamStore, prefix: &str, shape: [usize; 4], rng: &mut R) -> Result<()> {
    let fan_in = shape[1] * shape[2] * shape[3];
    store.insert_uniform(&format!("{prefix}.conv"), shape.to_vec(), fan_in, Group::MfnBackbone, rng)?;
    Ok(())
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("mfn.s{stage}.b{block}")
}

/// Registers every tensor of the network in `store`.
pub fn init_params<R: Rng>(store: &mut ParamStore, spec: &MfnSpec, rng: &mut R) -> Result<()> {
    spec.validate()?;
    let stem = spec.stem_channels;
    add_conv(store, "mfn.stem", [stem, spec.in_channels, 3, 3], rng)?;
    add_bn(store, "mfn.stem", stem)?;
    add_prelu(store, "mfn.stem", stem)?;
    add_conv(store, "mfn.dw", [stem, 1, 3, 3], rng)?;
    add_bn(store, "mfn.dw", stem)?;
    add_prelu(store, "mfn.dw", stem)?;

    let mut cin = stem;
    for (si, st) in spec.stages.iter().enumerate() {
        for bi in 0..st.repeats {
            let p = block_prefix(si, bi);
            let hidden = cin * st.expansion;
            add_conv(store, &format!("{p}.expand"), [hidden, cin, 1, 1], rng)?;
            add_bn(store, &format!("{p}.expand"), hidden)?;
            add_prelu(store, &format!("{p}.expand"), hidden)?;
            add_conv(store, &format!("{p}.dw"), [hidden, 1, 3, 3], rng)?;
            add_bn(store, &format!("{p}.dw"), hidden)?;
            add_prelu(store, &format!("{p}.dw"), hidden)?;
            add_conv(store, &format!("{p}.project"), [st.channels, hidden, 1, 1], rng)?;
            add_bn(store, &format!("{p}.project"), st.channels)?;
            cin = st.channels;
        }
    }

    let wide = spec.conv_out_channels;
    add_conv(store, "mfn.conv_out", [wide, cin, 1, 1], rng)?;
    add_bn(store, "mfn.conv_out", wide)?;
    add_prelu(store, "mfn.conv_out", wide)?;
    let (kh, kw) = spec.gdc_kernel();
    add_conv(store, "mfn.gdc", [wide, 1, kh, kw], rng)?;
    add_bn(store, "mfn.gdc", wide)?;

    let emb = spec.embedding_dim;
    store.insert_uniform("mfn.fc.weight", vec![emb, wide], wide, Group::MfnLastFc, rng)?;
    store.insert("mfn.fc.bias", Tensor::zeros(vec![emb]), Group::MfnLastFc, Kind::Weight)?;
    Ok(())
}

fn conv_bn(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    depthwise: bool,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Var> {
    let w = g.param(&format!("{prefix}.conv"))?;
    let y = if depthwise {
        g.depthwise2d(x, w, (stride, stride), (pad, pad))?
    } else {
        g.conv2d(x, w, (stride, stride), (pad, pad))?
    };
    let y = g.batch_norm(
        y,
        &format!("{prefix}.bn.gamma"),
        &format!("{prefix}.bn.beta"),
        &format!("{prefix}.bn.mean"),
        &format!("{prefix}.bn.var"),
    )?;
    if act {
        let a = g.param(&format!("{prefix}.prelu"))?;
        g.prelu(y, a)
    } else {
        Ok(y)
    }
}

/// Maps `[B, C, H, W]` feature maps to `[B, embedding_dim]` embeddings.
pub fn forward(g: &mut Graph, spec: &MfnSpec, x: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != spec.in_channels || (xs[2], xs[3]) != spec.input_hw {
        return Err(Error::Shape(format!(
            "network expects [B, {}, {}, {}], got {xs:?}",
            spec.in_channels, spec.input_hw.0, spec.input_hw.1
        )));
    }
    let batch = xs[0];
    let mut h = conv_bn(g, x, "mfn.stem", false, 2, 1, true)?;
    h = conv_bn(g, h, "mfn.dw", true, 1, 1, true)?;
    let mut cin = spec.stem_channels;
    for (si, st) in spec.stages.iter().enumerate() {
        for bi in 0..st.repeats {
            let p = block_prefix(si, bi);
            let stride = if bi == 0 { st.stride } else { 1 };
            let e = conv_bn(g, h, &format!("{p}.expand"), false, 1, 0, true)?;
            let d = conv_bn(g, e, &format!("{p}.dw"), true, stride, 1, true)?;
            let out = conv_bn(g, d, &format!("{p}.project"), false, 1, 0, false)?;
            h = if stride == 1 && cin == st.channels {
                g.add(h, out)?
            } else {
                out
            };
            cin = st.channels;
        }
    }
    h = conv_bn(g, h, "mfn.conv_out", false, 1, 0, true)?;
    h = conv_bn(g, h, "mfn.gdc", true, 1, 0, false)?;
    let flat = g.reshape(h, vec![batch, spec.conv_out_channels])?;
    let w = g.param("mfn.fc.weight")?;
    let b = g.param("mfn.fc.bias")?;
    g.linear(flat, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn canonical_spatial_trace() {
        let spec = MfnSpec::canonical(3);
        assert_eq!(spec.spatial_trace(), vec![(32, 188), (16, 94), (8, 47), (4, 24)]);
        assert_eq!(spec.gdc_kernel(), (4, 24));
    }

    #[test]
    fn parameter_counts_are_fixed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_params(&mut store, &MfnSpec::canonical(3), &mut rng).unwrap();
        assert_eq!(store.parameter_count(), CANONICAL_MFN_PARAMS);
        assert!(store.iter().all(|(n, p)| (p.group == Group::MfnLastFc) == n.starts_with("mfn.fc")));
    }

    /// Learnable scalars in `MfnSpec::canonical(3)`.
    const CANONICAL_MFN_PARAMS: usize = 692_736;
}
