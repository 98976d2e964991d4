//! Tape-based reverse-mode autodiff over coarse layer ops.
//!
//! A [`Graph`] records every op applied during a forward pass. Values are kept on the tape so
//! that [`Graph::backward`] can walk it in reverse, and gradients for learnable parameters are
//! accumulated into the [`ParamStore`] the graph was built against. Frozen parameters and plain
//! inputs do not require gradients, and no work is done for branches that only lead to them.

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in trainable batch-norm layers, running statistics updated.
    Train,
    /// Running statistics everywhere; the parameter store is never mutated.
    Eval,
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum StoreRef<'s> {
    Shared(&'s ParamStore),
    Exclusive(&'s mut ParamStore),
}

impl StoreRef<'_> {
    fn get(&self) -> &ParamStore {
        match self {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
        cout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Conv2dGeom,
        cout: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: Conv2dGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Prelu {
        x: Var,
        alpha: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    ArcMargin {
        cos: Var,
        targets: Vec<usize>,
        margin: f64,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Graph<'s> {
    store: StoreRef<'s>,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'s> Graph<'s> {
    /// A training graph. Batch-norm layers whose parameters are trainable use batch statistics
    /// and update their running statistics; frozen ones behave as in evaluation.
    pub fn train(store: &'s mut ParamStore) -> Self {
        let n = store.len();
        Self {
            store: StoreRef::Exclusive(store),
            mode: Mode::Train,
            nodes: Vec::new(),
            param_vars: vec![None; n],
        }
    }

    /// An inference graph over a shared store; never mutates parameters.
    pub fn eval(store: &'s ParamStore) -> Self {
        let n = store.len();
        Self {
            store: StoreRef::Shared(store),
            mode: Mode::Eval,
            nodes: Vec::new(),
            param_vars: vec![None; n],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store.get()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Places a named parameter on the tape (once per graph).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.get().id(name)?;
        self.param_by_id(id)
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let p = self.store.get().get(id);
        let (value, rg) = (p.value.clone(), p.is_learnable());
        let v = self.push(value, rg, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// 1-D convolution: `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return shape_err(format!("conv1d input {xs:?} with weight {ws:?}"));
        }
        let (batch, cin, len, cout, kernel) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv1d bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let out_len = kernels::out_dim(len, kernel, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv1d kernel {kernel} longer than padded input {len}+2*{pad}")))?;
        let geom = Conv1dGeom {
            cin,
            len,
            kernel,
            stride,
            pad,
            out_len,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; batch * cout * out_len];
        let ck = cin * kernel;
        for bi in 0..batch {
            let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
            let ob = &mut out[bi * cout * out_len..(bi + 1) * cout * out_len];
            if cin == 1 {
                let xp = kernels::pad1d(xb, pad);
                kernels::gemm(cout, kernel, out_len, 1.0, wv, (kernel, 1), &xp, (1, stride), 0.0, ob, (out_len, 1));
            } else {
                let col = kernels::im2col1d(xb, &geom);
                kernels::gemm(cout, ck, out_len, 1.0, wv, (ck, 1), &col, (out_len, 1), 0.0, ob, (out_len, 1));
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for chunk in out.chunks_mut(out_len).enumerate() {
                let c = chunk.0 % cout;
                chunk.1.iter_mut().for_each(|o| *o += bv[c]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, cout, out_len], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cout,
            },
        ))
    }

    /// 2-D convolution without bias: `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return shape_err(format!("conv2d input {xs:?} with weight {ws:?}"));
        }
        let geom = self.geom2d(&xs, ws[2], ws[3], stride, pad)?;
        let (batch, cout) = (xs[0], ws[0]);
        let (plane_in, plane_out) = (geom.cin * geom.h * geom.w, geom.oh * geom.ow);
        let ck = geom.cin * geom.kh * geom.kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; batch * cout * plane_out];
        for bi in 0..batch {
            let xb = &xv[bi * plane_in..(bi + 1) * plane_in];
            let ob = &mut out[bi * cout * plane_out..(bi + 1) * cout * plane_out];
            if geom.is_pointwise() {
                kernels::gemm(cout, ck, plane_out, 1.0, wv, (ck, 1), xb, (plane_out, 1), 0.0, ob, (plane_out, 1));
            } else {
                let col = kernels::im2col2d(xb, &geom);
                kernels::gemm(cout, ck, plane_out, 1.0, wv, (ck, 1), &col, (plane_out, 1), 0.0, ob, (plane_out, 1));
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(vec![batch, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, geom, cout }))
    }

    /// Depthwise 2-D convolution without bias: `w: [C, 1, kh, kw]`.
    pub fn depthwise2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
            return shape_err(format!("depthwise input {xs:?} with weight {ws:?}"));
        }
        let geom = self.geom2d(&xs, ws[2], ws[3], stride, pad)?;
        let (batch, ch) = (xs[0], xs[1]);
        let (pin, pout, ksz) = (geom.h * geom.w, geom.oh * geom.ow, geom.kh * geom.kw);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; batch * ch * pout];
        for bi in 0..batch {
            for c in 0..ch {
                let plane = (bi * ch + c) * pin;
                kernels::depthwise_plane(
                    &xv[plane..plane + pin],
                    &wv[c * ksz..(c + 1) * ksz],
                    &geom,
                    &mut out[(bi * ch + c) * pout..][..pout],
                );
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(vec![batch, ch, geom.oh, geom.ow], out)?;
        Ok(self.push(value, rg, Op::Depthwise { x, w, geom }))
    }

    fn geom2d(&self, xs: &[usize], kh: usize, kw: usize, stride: (usize, usize), pad: (usize, usize)) -> Result<Conv2dGeom> {
        let oh = kernels::out_dim(xs[2], kh, stride.0, pad.0);
        let ow = kernels::out_dim(xs[3], kw, stride.1, pad.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Conv2dGeom {
                cin: xs[1],
                h: xs[2],
                w: xs[3],
                kh,
                kw,
                sh: stride.0,
                sw: stride.1,
                ph: pad.0,
                pw: pad.1,
                oh,
                ow,
            }),
            _ => shape_err(format!("kernel {kh}x{kw} does not fit input {xs:?} with padding {pad:?}")),
        }
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// Batch statistics are used (and the running buffers updated with momentum 0.1) only in a
    /// training graph whose `gamma` is trainable; otherwise the running buffers are used as-is.
    /// Statistics are accumulated in `f64`.
    pub fn batch_norm(&mut self, x: Var, gamma: &str, beta: &str, running_mean: &str, running_var: &str) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let (rm_id, rv_id) = {
            let s = self.store.get();
            (s.id(running_mean)?, s.id(running_var)?)
        };
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err(format!("batch norm input {xs:?}"));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(g) != [ch] || self.shape(b) != [ch] {
            return shape_err(format!("batch norm affine params for {ch} channels"));
        }
        let gamma_trainable = self.store.get().get(self.param_id_of(g)).trainable;
        let batch_stats = self.mode == Mode::Train && gamma_trainable;
        let count = (batch * inner) as f64;
        let xv = self.value(x).data();
        let (mut mean, mut var) = (vec![0.0f64; ch], vec![0.0f64; ch]);
        if batch_stats {
            for bi in 0..batch {
                for c in 0..ch {
                    let row = &xv[(bi * ch + c) * inner..][..inner];
                    mean[c] += row.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for bi in 0..batch {
                for c in 0..ch {
                    let row = &xv[(bi * ch + c) * inner..][..inner];
                    var[c] += row.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
        } else {
            let s = self.store.get();
            mean = s.get(rm_id).value.data().iter().map(|&v| v as f64).collect();
            var = s.get(rv_id).value.data().iter().map(|&v| v as f64).collect();
        }
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * inner;
                let (m, is) = (mean[c] as f32, inv_std[c]);
                for i in off..off + inner {
                    let h = (xv[i] - m) * is;
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        if batch_stats {
            let StoreRef::Exclusive(store) = &mut self.store else {
                return Err(Error::Autograd("training graph without exclusive store".into()));
            };
            for (id, stat) in [(rm_id, &mean), (rv_id, &var)] {
                let buf = store.get_mut(id).value.data_mut();
                for (r, &s) in buf.iter_mut().zip(stat.iter()) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * s) as f32;
                }
            }
        }
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn param_id_of(&self, v: Var) -> ParamId {
        match self.nodes[v.0].op {
            Op::Param(id) => id,
            _ => unreachable!("not a parameter node"),
        }
    }

    /// Layer normalization across channels at every time step of `[B, C, T]`, with learnable
    /// per-channel gain and bias.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return shape_err(format!("layer norm input {xs:?}"));
        }
        let (batch, ch, t) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return shape_err(format!("layer norm affine params for {ch} channels"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; batch * t];
        let mut mean = vec![0.0f64; t];
        let mut sq = vec![0.0f64; t];
        for bi in 0..batch {
            let xb = &xv[bi * ch * t..(bi + 1) * ch * t];
            mean.iter_mut().for_each(|m| *m = 0.0);
            sq.iter_mut().for_each(|m| *m = 0.0);
            for c in 0..ch {
                for (m, &v) in mean.iter_mut().zip(&xb[c * t..(c + 1) * t]) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= ch as f64);
            for c in 0..ch {
                for ((s, &m), &v) in sq.iter_mut().zip(&mean).zip(&xb[c * t..(c + 1) * t]) {
                    *s += (v as f64 - m).powi(2);
                }
            }
            let is = &mut inv_std[bi * t..(bi + 1) * t];
            for (i, s) in is.iter_mut().zip(&sq) {
                *i = (1.0 / (s / ch as f64 + LN_EPS).sqrt()) as f32;
            }
            for c in 0..ch {
                let off = bi * ch * t + c * t;
                for j in 0..t {
                    let h = (xv[off + j] - mean[j] as f32) * is[j];
                    xhat[off + j] = h;
                    out[off + j] = gv[c] * h + bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::LeakyRelu { x, slope }))
    }

    /// Per-channel parametric ReLU over axis 1.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(alpha) != [xs[1]] {
            return shape_err(format!("prelu input {xs:?} with slopes {:?}", self.shape(alpha)));
        }
        let (ch, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let av = self.value(alpha).data();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_exact_mut(inner.max(1)).enumerate() {
            let a = av[p % ch];
            plane.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { a * *v });
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(value, rg, Op::Prelu { x, alpha }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// `y = x W^T + b` with `x: [B, In]`, `w: [Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear input {xs:?} with weight {ws:?}"));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return shape_err(format!("linear bias {:?} for {fout} outputs", self.shape(b)));
            }
        }
        let mut out = vec![0.0f32; batch * fout];
        kernels::gemm(
            batch,
            fin,
            fout,
            1.0,
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            0.0,
            &mut out,
            (fout, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Concatenation along axis 1 of `[B, C_i, ...]` tensors sharing all other dims.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let fs = self.shape(*first).to_vec();
        if fs.len() < 2 {
            return shape_err(format!("concat input {fs:?}"));
        }
        let batch = fs[0];
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != fs.len() || s[0] != batch || s[2..] != fs[2..] {
                return shape_err(format!("concat {fs:?} with {s:?}"));
            }
            total_c += s[1];
        }
        let inner: usize = fs[2..].iter().product();
        let mut out = Vec::with_capacity(batch * total_c * inner);
        for bi in 0..batch {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = fs.clone();
        shape[1] = total_c;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Row-wise unit L2 normalization of `[B, D]`. A zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err(format!("l2 normalize input {xs:?}"));
        }
        let d = xs[1];
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::InvalidArgument(format!("row {i} has zero or non-finite norm")));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            norms.push(n as f32);
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::L2Normalize { x, norms }))
    }

    /// Scaled cosine logits with an additive angular margin on each row's target entry.
    pub fn arc_margin(&mut self, cos: Var, targets: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let cs = self.shape(cos).to_vec();
        if cs.len() != 2 || cs[0] != targets.len() {
            return shape_err(format!("arc margin over {cs:?} with {} targets", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cs[1]) {
            return Err(Error::InvalidArgument(format!("target {t} out of {} classes", cs[1])));
        }
        let mut out = self.value(cos).data().to_vec();
        for (row, &t) in out.chunks_mut(cs[1]).zip(targets) {
            for (j, v) in row.iter_mut().enumerate() {
                let c = *v as f64;
                let adj = if j == t { kernels::margin_cosine(c, margin) } else { c };
                *v = (scale * adj) as f32;
            }
        }
        let value = Tensor::new(cs, out)?;
        let rg = self.rg(cos);
        Ok(self.push(
            value,
            rg,
            Op::ArcMargin {
                cos,
                targets: targets.to_vec(),
                margin,
                scale,
            },
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] == 0 {
            return shape_err(format!("cross entropy over {ls:?} with {} targets", targets.len()));
        }
        let c = ls[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("target {t} out of {c} classes")));
        }
        let mut probs = Vec::with_capacity(ls[0] * c);
        let mut loss = 0.0f64;
        for (row, &t) in self.value(logits).data().chunks(c).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            loss += lse - row[t] as f64;
            probs.extend(kernels::softmax_row(row));
        }
        let value = Tensor::scalar((loss / ls[0] as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_i w_i x_i` as a scalar; a convenient probe loss.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err(format!("{} weights for {} values", weights.len(), self.value(x).numel()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s as f32), rg, Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from a scalar `loss` and accumulates gradients of every learnable
    /// parameter on the tape into the store. Only valid on a training graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::Autograd("backward requires a forward pass recorded in train mode".into()));
        }
        if loss.0 >= self.nodes.len() || self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autograd("backward needs a scalar loss recorded on this graph".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                let StoreRef::Exclusive(store) = &mut self.store else {
                    return Err(Error::Autograd("training graph without exclusive store".into()));
                };
                let p = store.get_mut(id);
                match &mut p.grad {
                    Some(g) => g.iter_mut().zip(&gy).for_each(|(a, b)| *a += b),
                    None => p.grad = Some(gy),
                }
                continue;
            }
            self.backward_node(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv1d { x, w, b, geom, cout } => {
                let (x, w, g, cout) = (*x, *w, *geom, *cout);
                let batch = val(x).shape()[0];
                let ck = g.cin * g.kernel;
                let xv = val(x).data();
                let wv = val(w).data();
                let per_in = g.cin * g.len;
                let per_out = cout * g.out_len;
                if let Some(b) = *b {
                    if rg(b) {
                        let gb = grad_slot(grads, b, cout);
                        for (r, row) in gy.chunks(g.out_len).enumerate() {
                            gb[r % cout] += row.iter().sum::<f32>();
                        }
                    }
                }
                for bi in 0..batch {
                    let gyb = &gy[bi * per_out..(bi + 1) * per_out];
                    let xb = &xv[bi * per_in..(bi + 1) * per_in];
                    if rg(w) {
                        let gw = grad_slot(grads, w, cout * ck);
                        if g.cin == 1 {
                            let xp = kernels::pad1d(xb, g.pad);
                            kernels::gemm(cout, g.out_len, g.kernel, 1.0, gyb, (g.out_len, 1), &xp, (g.stride, 1), 1.0, gw, (ck, 1));
                        } else {
                            let col = kernels::im2col1d(xb, &g);
                            kernels::gemm(cout, g.out_len, ck, 1.0, gyb, (g.out_len, 1), &col, (1, g.out_len), 1.0, gw, (ck, 1));
                        }
                    }
                    if rg(x) {
                        let mut gcol = vec![0.0f32; ck * g.out_len];
                        kernels::gemm(ck, cout, g.out_len, 1.0, wv, (1, ck), gyb, (g.out_len, 1), 0.0, &mut gcol, (g.out_len, 1));
                        let gx = grad_slot(grads, x, batch * per_in);
                        kernels::col2im1d(&gcol, &g, &mut gx[bi * per_in..(bi + 1) * per_in]);
                    }
                }
            }
            Op::Conv2d { x, w, geom, cout } => {
                let (x, w, g, cout) = (*x, *w, *geom, *cout);
                let batch = val(x).shape()[0];
                let ck = g.cin * g.kh * g.kw;
                let (pin, pout) = (g.cin * g.h * g.w, g.oh * g.ow);
                let xv = val(x).data();
                let wv = val(w).data();
                for bi in 0..batch {
                    let gyb = &gy[bi * cout * pout..(bi + 1) * cout * pout];
                    let xb = &xv[bi * pin..(bi + 1) * pin];
                    if rg(w) {
                        let gw = grad_slot(grads, w, cout * ck);
                        if g.is_pointwise() {
                            kernels::gemm(cout, pout, ck, 1.0, gyb, (pout, 1), xb, (1, pout), 1.0, gw, (ck, 1));
                        } else {
                            let col = kernels::im2col2d(xb, &g);
                            kernels::gemm(cout, pout, ck, 1.0, gyb, (pout, 1), &col, (1, pout), 1.0, gw, (ck, 1));
                        }
                    }
                    if rg(x) {
                        if g.is_pointwise() {
                            let gx = grad_slot(grads, x, batch * pin);
                            kernels::gemm(ck, cout, pout, 1.0, wv, (1, ck), gyb, (pout, 1), 1.0, &mut gx[bi * pin..(bi + 1) * pin], (pout, 1));
                        } else {
                            let mut gcol = vec![0.0f32; ck * pout];
                            kernels::gemm(ck, cout, pout, 1.0, wv, (1, ck), gyb, (pout, 1), 0.0, &mut gcol, (pout, 1));
                            let gx = grad_slot(grads, x, batch * pin);
                            kernels::col2im2d(&gcol, &g, &mut gx[bi * pin..(bi + 1) * pin]);
                        }
                    }
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (x, w, g) = (*x, *w, *geom);
                let xs = val(x).shape();
                let (batch, ch) = (xs[0], xs[1]);
                let (pin, pout, ksz) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
                let xv = val(x).data();
                let wv = val(w).data();
                let mut gw_local = rg(w).then(|| vec![0.0f32; ch * ksz]);
                let mut gx = rg(x).then(|| grad_slot(grads, x, batch * ch * pin));
                for bi in 0..batch {
                    for c in 0..ch {
                        let plane = bi * ch + c;
                        kernels::depthwise_plane_backward(
                            &xv[plane * pin..(plane + 1) * pin],
                            &wv[c * ksz..(c + 1) * ksz],
                            &gy[plane * pout..(plane + 1) * pout],
                            &g,
                            gx.as_mut().map(|v| &mut v[plane * pin..(plane + 1) * pin]),
                            gw_local.as_mut().map(|v| &mut v[c * ksz..(c + 1) * ksz]),
                        );
                    }
                }
                if let Some(d) = gw_local {
                    let gw = grad_slot(grads, w, d.len());
                    gw.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = val(x).shape();
                let (batch, ch) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let count = (batch * inner) as f64;
                let mut sum_dy = vec![0.0f64; ch];
                let mut sum_dy_xhat = vec![0.0f64; ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * inner;
                        for j in off..off + inner {
                            sum_dy[c] += gy[j] as f64;
                            sum_dy_xhat[c] += gy[j] as f64 * xhat[j] as f64;
                        }
                    }
                }
                if rg(gamma) {
                    let gg = grad_slot(grads, gamma, ch);
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b as f32);
                }
                if rg(beta) {
                    let gb = grad_slot(grads, beta, ch);
                    gb.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b as f32);
                }
                if rg(x) {
                    let gv = val(gamma).data();
                    let gx = grad_slot(grads, x, gy.len());
                    for bi in 0..batch {
                        for c in 0..ch {
                            let off = (bi * ch + c) * inner;
                            let k = gv[c] * inv_std[c];
                            if *batch_stats {
                                let mdy = (sum_dy[c] / count) as f32;
                                let mdyx = (sum_dy_xhat[c] / count) as f32;
                                for j in off..off + inner {
                                    gx[j] += k * (gy[j] - mdy - xhat[j] * mdyx);
                                }
                            } else {
                                for j in off..off + inner {
                                    gx[j] += k * gy[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = val(x).shape();
                let (batch, ch, t) = (xs[0], xs[1], xs[2]);
                if rg(gamma) || rg(beta) {
                    let mut dg = vec![0.0f64; ch];
                    let mut db = vec![0.0f64; ch];
                    for bi in 0..batch {
                        for c in 0..ch {
                            let off = (bi * ch + c) * t;
                            for j in off..off + t {
                                dg[c] += gy[j] as f64 * xhat[j] as f64;
                                db[c] += gy[j] as f64;
                            }
                        }
                    }
                    if rg(gamma) {
                        let gg = grad_slot(grads, gamma, ch);
                        gg.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b as f32);
                    }
                    if rg(beta) {
                        let gb = grad_slot(grads, beta, ch);
                        gb.iter_mut().zip(&db).for_each(|(a, &b)| *a += b as f32);
                    }
                }
                if rg(x) {
                    let gv = val(gamma).data();
                    let gx = grad_slot(grads, x, gy.len());
                    let mut m1 = vec![0.0f32; t];
                    let mut m2 = vec![0.0f32; t];
                    for bi in 0..batch {
                        m1.iter_mut().for_each(|v| *v = 0.0);
                        m2.iter_mut().for_each(|v| *v = 0.0);
                        for c in 0..ch {
                            let off = (bi * ch + c) * t;
                            for j in 0..t {
                                let d = gy[off + j] * gv[c];
                                m1[j] += d;
                                m2[j] += d * xhat[off + j];
                            }
                        }
                        let inv_c = 1.0 / ch as f32;
                        for c in 0..ch {
                            let off = (bi * ch + c) * t;
                            for j in 0..t {
                                let d = gy[off + j] * gv[c];
                                gx[off + j] += inv_std[bi * t + j] * (d - m1[j] * inv_c - xhat[off + j] * m2[j] * inv_c);
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x).data();
                let gx = grad_slot(grads, *x, gy.len());
                for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                    *g += if v > 0.0 { d } else { slope * d };
                }
            }
            Op::Prelu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xs = val(x).shape();
                let (ch, inner) = (xs[1], xs[2..].iter().product::<usize>());
                let xv = val(x).data();
                let av = val(alpha).data();
                let inner = inner.max(1);
                if rg(alpha) {
                    let mut da = vec![0.0f64; ch];
                    for (p, (gp, xp)) in gy.chunks_exact(inner).zip(xv.chunks_exact(inner)).enumerate() {
                        da[p % ch] += gp
                            .iter()
                            .zip(xp)
                            .map(|(&d, &v)| if v <= 0.0 { d as f64 * v as f64 } else { 0.0 })
                            .sum::<f64>();
                    }
                    let ga = grad_slot(grads, alpha, ch);
                    ga.iter_mut().zip(&da).for_each(|(a, &b)| *a += b as f32);
                }
                if rg(x) {
                    let gx = grad_slot(grads, x, gy.len());
                    let planes = gx.chunks_exact_mut(inner).zip(gy.chunks_exact(inner).zip(xv.chunks_exact(inner)));
                    for (p, (gp, (dp, vp))) in planes.enumerate() {
                        let a = av[p % ch];
                        for ((g, &d), &v) in gp.iter_mut().zip(dp).zip(vp) {
                            *g += if v > 0.0 { d } else { a * d };
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        let g = grad_slot(grads, v, gy.len());
                        g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let xs = val(x).shape();
                let (batch, fin) = (xs[0], xs[1]);
                let fout = val(w).shape()[0];
                if rg(x) {
                    let gx = grad_slot(grads, x, batch * fin);
                    kernels::gemm(batch, fout, fin, 1.0, gy, (fout, 1), val(w).data(), (fin, 1), 1.0, gx, (fin, 1));
                }
                if rg(w) {
                    let gw = grad_slot(grads, w, fout * fin);
                    kernels::gemm(fout, batch, fin, 1.0, gy, (1, fout), val(x).data(), (fin, 1), 1.0, gw, (fin, 1));
                }
                if let Some(b) = *b {
                    if rg(b) {
                        let gb = grad_slot(grads, b, fout);
                        for row in gy.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let g = grad_slot(grads, *x, gy.len());
                g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
            }
            Op::Concat { inputs } => {
                let os = node.value.shape();
                let (batch, total_c) = (os[0], os[1]);
                let inner: usize = os[2..].iter().product();
                let mut c0 = 0;
                for &v in inputs {
                    let c = val(v).shape()[1];
                    if rg(v) {
                        let g = grad_slot(grads, v, batch * c * inner);
                        for bi in 0..batch {
                            let src = &gy[(bi * total_c + c0) * inner..][..c * inner];
                            let dst = &mut g[bi * c * inner..][..c * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    c0 += c;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                let gx = grad_slot(grads, *x, gy.len());
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &gy[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..d {
                        gx[r * d + j] += ((gr[j] as f64 - yr[j] as f64 * dot) / n as f64) as f32;
                    }
                }
            }
            Op::ArcMargin {
                cos,
                targets,
                margin,
                scale,
            } => {
                let c = node.value.shape()[1];
                let cv = val(*cos).data();
                let gc = grad_slot(grads, *cos, gy.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        let d = if j == t {
                            kernels::margin_cosine_grad(cv[k] as f64, *margin)
                        } else {
                            1.0
                        };
                        gc[k] += (gy[k] as f64 * scale * d) as f32;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).shape()[1];
                let scale = gy[0] as f64 / targets.len() as f64;
                let gl = grad_slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += (scale * (probs[r * c + j] - onehot)) as f32;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let g = grad_slot(grads, *x, weights.len());
                g.iter_mut().zip(weights).for_each(|(a, &w)| *a += gy[0] * w);
            }
        }
    }
}
