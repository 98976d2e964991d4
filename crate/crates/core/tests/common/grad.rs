//! Finite-difference gradient checks shared by the gradient tests and the acceptance run.

use mavgram_core::loss::{ArcFace, HEAD_WEIGHT};
use mavgram_core::nn::{Graph, Group, Kind, ParamStore, Tensor, Var};
use mavgram_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step relative to `max(1, |theta|)`.
const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

struct Case {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], lo: f32, hi: f32) -> &mut Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).unwrap(), Group::MfnBackbone, Kind::Weight)
            .unwrap();
        self
    }

    fn buffer(&mut self, name: &str, value: Tensor) -> &mut Self {
        self.store.insert(name, value, Group::MfnBackbone, Kind::Buffer).unwrap();
        self
    }
}

fn probe_weights(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Scalar objective: either the op output itself (when already scalar) or a fixed random
/// weighting of it.
fn objective<'s, F>(store: &'s mut ParamStore, build: &F, seed: u64) -> Result<(f64, Graph<'s>, Var)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::train(store);
    let y = build(&mut g)?;
    let n = g.value(y).numel();
    let loss = if n == 1 { y } else { g.weighted_sum(y, probe_weights(n, seed))? };
    let v = g.value(loss).data()[0] as f64;
    Ok((v, g, loss))
}

/// Worst per-tensor relative error `||ga - gn|| / max(||ga||, ||gn||)`.
fn gradient_error<F>(store: &ParamStore, build: F, seed: u64) -> f64
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    {
        let (_, mut g, loss) = objective(&mut analytic_store, &build, seed).unwrap();
        g.backward(loss).unwrap();
    }
    let mut worst = 0.0f64;
    for (name, p) in store.iter() {
        if !p.is_learnable() {
            continue;
        }
        let ga = analytic_store.by_name(name).unwrap().grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let mut gn = vec![0.0f64; p.value.numel()];
        for (i, slot) in gn.iter_mut().enumerate() {
            let theta = p.value.data()[i];
            let h = STEP * theta.abs().max(1.0);
            let (hi, lo) = (theta + h, theta - h);
            let eval = |v: f32| {
                let mut s = store.clone();
                s.by_name_mut(name).unwrap().value.data_mut()[i] = v;
                objective(&mut s, &build, seed).unwrap().0
            };
            *slot = (eval(hi) - eval(lo)) / (hi as f64 - lo as f64);
        }
        let diff = ga.iter().zip(&gn).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
        let na = ga.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = gn.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
        let rel = if na.max(nn) < 1e-9 { 0.0 } else { diff / na.max(nn) };
        assert!(rel.is_finite(), "{name}");
        worst = worst.max(rel);
    }
    worst
}

fn check<F>(label: &'static str, store: &ParamStore, build: F) -> (&'static str, f64)
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    (label, gradient_error(store, build, label.len() as u64))
}

pub fn conv1d_strided_padded_with_bias() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(1);
    c.param("x", &[2, 2, 11], -1.0, 1.0)
        .param("w", &[3, 2, 4], -0.5, 0.5)
        .param("b", &[3], -0.5, 0.5);
    out.push(check("conv1d", &c.store, |g| {
        let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
        g.conv1d(x, w, Some(b), 2, 2)
    }));
    out
}

pub fn conv1d_single_channel_front() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(2);
    c.param("x", &[2, 1, 32], -1.0, 1.0)
        .param("w", &[4, 1, 8], -0.5, 0.5)
        .param("b", &[4], -0.5, 0.5);
    out.push(check("conv1d front", &c.store, |g| {
        let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
        g.conv1d(x, w, Some(b), 4, 4)
    }));
    out
}

pub fn conv2d_strided_and_pointwise() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(3);
    c.param("x", &[2, 3, 5, 6], -1.0, 1.0)
        .param("w", &[4, 3, 3, 3], -0.5, 0.5)
        .param("p", &[2, 4, 1, 1], -0.5, 0.5);
    out.push(check("conv2d", &c.store, |g| {
        let (x, w, p) = (g.param("x")?, g.param("w")?, g.param("p")?);
        let y = g.conv2d(x, w, (2, 2), (1, 1))?;
        g.conv2d(y, p, (1, 1), (0, 0))
    }));
    out
}

pub fn depthwise_conv() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(4);
    c.param("x", &[2, 3, 6, 7], -1.0, 1.0).param("w", &[3, 1, 3, 3], -0.5, 0.5);
    out.push(check("depthwise", &c.store, |g| {
        let (x, w) = (g.param("x")?, g.param("w")?);
        g.depthwise2d(x, w, (2, 2), (1, 1))
    }));
    let mut c = Case::new(5);
    c.param("x", &[2, 3, 4, 5], -1.0, 1.0).param("w", &[3, 1, 4, 5], -0.5, 0.5);
    out.push(check("global depthwise", &c.store, |g| {
        let (x, w) = (g.param("x")?, g.param("w")?);
        g.depthwise2d(x, w, (1, 1), (0, 0))
    }));
    out
}

pub fn batch_norm_training_statistics() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(6);
    c.param("x", &[3, 2, 3, 4], -2.0, 2.0)
        .param("gamma", &[2], 0.5, 1.5)
        .param("beta", &[2], -0.5, 0.5)
        .buffer("mean", Tensor::zeros(vec![2]))
        .buffer("var", Tensor::full(vec![2], 1.0));
    out.push(check("batch norm", &c.store, |g| {
        let x = g.param("x")?;
        g.batch_norm(x, "gamma", "beta", "mean", "var")
    }));
    out
}

pub fn batch_norm_frozen_uses_running_statistics() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(7);
    c.param("x", &[2, 2, 3, 3], -2.0, 2.0)
        .param("gamma", &[2], 0.5, 1.5)
        .param("beta", &[2], -0.5, 0.5)
        .buffer("mean", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap())
        .buffer("var", Tensor::new(vec![2], vec![1.7, 0.6]).unwrap());
    c.store.by_name_mut("gamma").unwrap().trainable = false;
    c.store.by_name_mut("beta").unwrap().trainable = false;
    out.push(check("frozen batch norm", &c.store, |g| {
        let x = g.param("x")?;
        g.batch_norm(x, "gamma", "beta", "mean", "var")
    }));
    out
}

pub fn layer_norm_over_channels() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(8);
    c.param("x", &[2, 4, 5], -2.0, 2.0)
        .param("gamma", &[4], 0.5, 1.5)
        .param("beta", &[4], -0.5, 0.5);
    out.push(check("layer norm", &c.store, |g| {
        let (x, ga, be) = (g.param("x")?, g.param("gamma")?, g.param("beta")?);
        g.layer_norm_channels(x, ga, be)
    }));
    out
}

pub fn activations() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(9);
    c.param("x", &[2, 3, 4, 2], -1.0, 1.0).param("alpha", &[3], 0.1, 0.4);
    out.push(check("prelu", &c.store, |g| {
        let (x, a) = (g.param("x")?, g.param("alpha")?);
        g.prelu(x, a)
    }));
    out.push(check("leaky relu", &c.store, |g| {
        let x = g.param("x")?;
        g.leaky_relu(x, 0.01)
    }));
    out
}

pub fn linear_add_reshape_concat() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(10);
    c.param("x", &[3, 5], -1.0, 1.0)
        .param("y", &[3, 5], -1.0, 1.0)
        .param("w", &[4, 5], -0.5, 0.5)
        .param("b", &[4], -0.5, 0.5)
        .param("m", &[3, 1, 2, 2], -1.0, 1.0);
    out.push(check("linear", &c.store, |g| {
        let (x, y, w, b) = (g.param("x")?, g.param("y")?, g.param("w")?, g.param("b")?);
        let s = g.add(x, y)?;
        let h = g.linear(s, w, Some(b))?;
        let h = g.reshape(h, vec![3, 1, 2, 2])?;
        let m = g.param("m")?;
        g.concat_channels(&[h, m, h])
    }));
    out.push(check("linear without bias", &c.store, |g| {
        let (x, w) = (g.param("x")?, g.param("w")?);
        g.linear(x, w, None)
    }));
    out
}

pub fn normalization_margin_and_cross_entropy() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(11);
    c.param("e", &[3, 4], -1.0, 1.0).param(HEAD_WEIGHT, &[5, 4], -1.0, 1.0);
    let arc = ArcFace {
        margin: 0.3,
        scale: 4.0,
    };
    let targets = [1usize, 4, 2];
    out.push(check("arcface cross entropy", &c.store, |g| {
        let e = g.param("e")?;
        let (_, logits) = arc.logits(g, e, Some(&targets))?;
        g.cross_entropy(logits, &targets)
    }));
    out.push(check("l2 normalize", &c.store, |g| {
        let e = g.param("e")?;
        g.l2_normalize(e)
    }));
    out
}

pub fn micro_network_end_to_end() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(12);
    c.param("x", &[2, 1, 6, 6], -1.0, 1.0)
        .param("conv1", &[3, 1, 3, 3], -0.6, 0.6)
        .param("alpha", &[3], 0.1, 0.3)
        .param("conv2", &[4, 3, 3, 3], -0.4, 0.4)
        .param(HEAD_WEIGHT, &[6, 36], -0.3, 0.3);
    let arc = ArcFace {
        margin: 0.5,
        scale: 8.0,
    };
    let targets = [4usize, 1];
    out.push(check("micro network", &c.store, |g| {
        let x = g.param("x")?;
        let w1 = g.param("conv1")?;
        let h = g.conv2d(x, w1, (1, 1), (1, 1))?;
        let a = g.param("alpha")?;
        let h = g.prelu(h, a)?;
        let w2 = g.param("conv2")?;
        let h = g.conv2d(h, w2, (2, 2), (1, 1))?;
        let e = g.reshape(h, vec![2, 36])?;
        let (_, logits) = arc.logits(g, e, Some(&targets))?;
        g.cross_entropy(logits, &targets)
    }));
    out
}

pub const SUITE: &[fn() -> Vec<(&'static str, f64)>] = &[
    conv1d_strided_padded_with_bias,
    conv1d_single_channel_front,
    conv2d_strided_and_pointwise,
    depthwise_conv,
    batch_norm_training_statistics,
    batch_norm_frozen_uses_running_statistics,
    layer_norm_over_channels,
    activations,
    linear_add_reshape_concat,
    normalization_margin_and_cross_entropy,
    micro_network_end_to_end,
];
