//! The embedding network against a direct loop implementation.

use mavgram_core::nn::{mfn, BottleneckStage, Graph, Kind, MfnSpec, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[C, H, W]` planes in `f64`.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0.0
        } else {
            self.v[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

fn p(store: &ParamStore, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = &store.by_name(name).unwrap_or_else(|| panic!("{name}")).value;
    (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
}

fn conv(store: &ParamStore, name: &str, x: &Map, stride: usize, pad: usize, depthwise: bool) -> Map {
    let (s, w) = p(store, name);
    let (o, kh, kw) = (s[0], s[2], s[3]);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut v = vec![0.0; o * oh * ow];
    for co in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                let inputs: Vec<usize> = if depthwise { vec![co] } else { (0..x.c).collect() };
                for (ci_idx, &ci) in inputs.iter().enumerate() {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wi = ((co * s[1] + ci_idx) * kh + ky) * kw + kx;
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            acc += w[wi] * x.at(ci, y, xx);
                        }
                    }
                }
                v[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map { c: o, h: oh, w: ow, v }
}

fn bn(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let (_, g) = p(store, &format!("{prefix}.bn.gamma"));
    let (_, b) = p(store, &format!("{prefix}.bn.beta"));
    let (_, m) = p(store, &format!("{prefix}.bn.mean"));
    let (_, var) = p(store, &format!("{prefix}.bn.var"));
    let mut out = x.clone();
    let plane = x.h * x.w;
    for (i, v) in out.v.iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - m[c]) / (var[c] + 1e-5).sqrt() * g[c] + b[c];
    }
    out
}

fn prelu(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let (_, a) = p(store, &format!("{prefix}.prelu"));
    let mut out = x.clone();
    let plane = x.h * x.w;
    for (i, v) in out.v.iter_mut().enumerate() {
        if *v < 0.0 {
            *v *= a[i / plane];
        }
    }
    out
}

fn unit(store: &ParamStore, prefix: &str, x: &Map, stride: usize, pad: usize, dw: bool, act: bool) -> Map {
    let y = bn(store, prefix, &conv(store, &format!("{prefix}.conv"), x, stride, pad, dw));
    if act {
        prelu(store, prefix, &y)
    } else {
        y
    }
}

fn reference(store: &ParamStore, spec: &MfnSpec, x: Map) -> Vec<f64> {
    let mut h = unit(store, "mfn.stem", &x, 2, 1, false, true);
    h = unit(store, "mfn.dw", &h, 1, 1, true, true);
    let mut cin = spec.stem_channels;
    for (si, st) in spec.stages.iter().enumerate() {
        for bi in 0..st.repeats {
            let pre = format!("mfn.s{si}.b{bi}");
            let stride = if bi == 0 { st.stride } else { 1 };
            let e = unit(store, &format!("{pre}.expand"), &h, 1, 0, false, true);
            let d = unit(store, &format!("{pre}.dw"), &e, stride, 1, true, true);
            let mut out = unit(store, &format!("{pre}.project"), &d, 1, 0, false, false);
            if stride == 1 && cin == st.channels {
                out.v.iter_mut().zip(&h.v).for_each(|(o, r)| *o += r);
            }
            h = out;
            cin = st.channels;
        }
    }
    h = unit(store, "mfn.conv_out", &h, 1, 0, false, true);
    h = unit(store, "mfn.gdc", &h, 1, 0, true, false);
    assert_eq!((h.h, h.w), (1, 1));
    let (ws, w) = p(store, "mfn.fc.weight");
    let (_, b) = p(store, "mfn.fc.bias");
    (0..ws[0])
        .map(|o| b[o] + (0..ws[1]).map(|i| w[o * ws[1] + i] * h.v[i]).sum::<f64>())
        .collect()
}

fn micro_spec() -> MfnSpec {
    MfnSpec {
        in_channels: 2,
        input_hw: (8, 12),
        stem_channels: 8,
        stages: vec![BottleneckStage {
            expansion: 2,
            channels: 8,
            repeats: 2,
            stride: 2,
        }],
        conv_out_channels: 8,
        embedding_dim: 5,
    }
}

fn randomized_store(spec: &MfnSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    mfn::init_params(&mut store, spec, &mut rng).unwrap();
    for (name, p) in store.iter_mut() {
        let (lo, hi) = if name.ends_with(".var") {
            (0.5, 2.0)
        } else if name.ends_with(".gamma") {
            (0.7, 1.3)
        } else if p.kind == Kind::Buffer || name.ends_with(".beta") || name.ends_with(".bias") {
            (-0.3, 0.3)
        } else if name.ends_with(".prelu") {
            (0.1, 0.4)
        } else {
            continue;
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
    store
}

fn input(batch: usize, spec: &MfnSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.input_hw;
    let n = batch * spec.in_channels * h * w;
    Tensor::new(vec![batch, spec.in_channels, h, w], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn eval_forward_matches_loop_reference() {
    let spec = micro_spec();
    let store = randomized_store(&spec, 21);
    let x = input(2, &spec, 22);
    let mut g = Graph::eval(&store);
    let xv = g.input(x.clone());
    let y = mfn::forward(&mut g, &spec, xv).unwrap();
    let got = g.value(y).data().to_vec();
    let per = spec.in_channels * 8 * 12;
    for b in 0..2 {
        let m = Map {
            c: spec.in_channels,
            h: 8,
            w: 12,
            v: x.data()[b * per..(b + 1) * per].iter().map(|&v| v as f64).collect(),
        };
        let expect = reference(&store, &spec, m);
        for (o, e) in expect.iter().enumerate() {
            let a = got[b * spec.embedding_dim + o] as f64;
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "sample {b} output {o}: {a} vs {e}");
        }
    }
}

#[test]
fn eval_batches_are_independent() {
    let spec = micro_spec();
    let store = randomized_store(&spec, 31);
    let x = input(3, &spec, 32);
    let mut g = Graph::eval(&store);
    let xv = g.input(x.clone());
    let y = mfn::forward(&mut g, &spec, xv).unwrap();
    let whole = g.value(y).data().to_vec();
    let per = x.numel() / 3;
    for b in 0..3 {
        let single = Tensor::new(
            vec![1, spec.in_channels, 8, 12],
            x.data()[b * per..(b + 1) * per].to_vec(),
        )
        .unwrap();
        let mut g = Graph::eval(&store);
        let xv = g.input(single);
        let y = mfn::forward(&mut g, &spec, xv).unwrap();
        assert_eq!(g.value(y).data(), &whole[b * 5..(b + 1) * 5]);
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let spec = micro_spec();
    let store = randomized_store(&spec, 41);
    let mut g = Graph::eval(&store);
    let xv = g.input(Tensor::zeros(vec![1, 2, 8, 11]));
    assert!(mfn::forward(&mut g, &spec, xv).is_err());
}
