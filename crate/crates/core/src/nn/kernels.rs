//! Numeric kernels behind the graph ops. All buffers are row-major `f32`.

/// `C = alpha * A * B + beta * C` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub cin: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

/// Zero-padded copy of a single-channel signal.
pub(crate) fn pad1d(x: &[f32], pad: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len() + 2 * pad];
    out[pad..pad + x.len()].copy_from_slice(x);
    out
}

/// Output positions `lo..hi` whose input index `o * stride + k - pad` lies in `0..len`.
fn span(k: usize, stride: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// `dst[o] = src[o * stride + k - pad]` over the valid output span.
#[inline]
fn gather(dst: &mut [f32], src: &[f32], k: usize, stride: usize, pad: usize) {
    let (lo, hi) = span(k, stride, pad, src.len(), dst.len());
    if lo == hi {
        return;
    }
    let first = lo * stride + k - pad;
    if stride == 1 {
        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
    } else {
        for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
            *d = v;
        }
    }
}

/// `dst[o * stride + k - pad] += scale * src[o]` over the valid output span.
#[inline]
fn scatter_add(dst: &mut [f32], src: &[f32], scale: f32, k: usize, stride: usize, pad: usize) {
    let (lo, hi) = span(k, stride, pad, dst.len(), src.len());
    if lo == hi {
        return;
    }
    let first = lo * stride + k - pad;
    if stride == 1 {
        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(&src[lo..hi]) {
            *d += scale * v;
        }
    } else {
        for (d, &v) in dst[first..].iter_mut().step_by(stride).zip(&src[lo..hi]) {
            *d += scale * v;
        }
    }
}

/// `out[o] += scale * src[o * stride + k - pad]` over the valid output span.
#[inline]
fn gather_add(out: &mut [f32], src: &[f32], scale: f32, k: usize, stride: usize, pad: usize) {
    let (lo, hi) = span(k, stride, pad, src.len(), out.len());
    if lo == hi {
        return;
    }
    let first = lo * stride + k - pad;
    if stride == 1 {
        for (d, &v) in out[lo..hi].iter_mut().zip(&src[first..first + hi - lo]) {
            *d += scale * v;
        }
    } else {
        for (d, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
            *d += scale * v;
        }
    }
}

/// `sum_o a[o] * src[o * stride + k - pad]` over the valid output span.
#[inline]
fn gather_dot(a: &[f32], src: &[f32], k: usize, stride: usize, pad: usize) -> f32 {
    let (lo, hi) = span(k, stride, pad, src.len(), a.len());
    if lo == hi {
        return 0.0;
    }
    let first = lo * stride + k - pad;
    if stride == 1 {
        a[lo..hi].iter().zip(&src[first..first + hi - lo]).map(|(x, y)| x * y).sum()
    } else {
        a[lo..hi]
            .iter()
            .zip(src[first..].iter().step_by(stride))
            .map(|(x, y)| x * y)
            .sum()
    }
}

/// `(cin*kernel) x out_len` patch matrix.
pub(crate) fn im2col1d(x: &[f32], g: &Conv1dGeom) -> Vec<f32> {
    let mut col = vec![0.0; g.cin * g.kernel * g.out_len];
    for ci in 0..g.cin {
        let xc = &x[ci * g.len..(ci + 1) * g.len];
        for k in 0..g.kernel {
            let row = &mut col[(ci * g.kernel + k) * g.out_len..][..g.out_len];
            gather(row, xc, k, g.stride, g.pad);
        }
    }
    col
}

pub(crate) fn col2im1d(col: &[f32], g: &Conv1dGeom, gx: &mut [f32]) {
    for ci in 0..g.cin {
        let dst = &mut gx[ci * g.len..(ci + 1) * g.len];
        for k in 0..g.kernel {
            let row = &col[(ci * g.kernel + k) * g.out_len..][..g.out_len];
            scatter_add(dst, row, 1.0, k, g.stride, g.pad);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

pub(crate) fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// `(cin*kh*kw) x (oh*ow)` patch matrix.
pub(crate) fn im2col2d(x: &[f32], g: &Conv2dGeom) -> Vec<f32> {
    let cols = g.oh * g.ow;
    let mut col = vec![0.0; g.cin * g.kh * g.kw * cols];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = span(ky, g.sh, g.ph, g.h, g.oh);
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * cols..][..cols];
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ky - g.ph;
                    gather(&mut row[oy * g.ow..][..g.ow], &plane[iy * g.w..][..g.w], kx, g.sw, g.pw);
                }
            }
        }
    }
    col
}

pub(crate) fn col2im2d(col: &[f32], g: &Conv2dGeom, gx: &mut [f32]) {
    let cols = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = span(ky, g.sh, g.ph, g.h, g.oh);
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * cols..][..cols];
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ky - g.ph;
                    scatter_add(&mut plane[iy * g.w..][..g.w], &row[oy * g.ow..][..g.ow], 1.0, kx, g.sw, g.pw);
                }
            }
        }
    }
}

/// Per-channel 2-D convolution of one `h x w` plane.
pub(crate) fn depthwise_plane(x: &[f32], k: &[f32], g: &Conv2dGeom, out: &mut [f32]) {
    for ky in 0..g.kh {
        let (ylo, yhi) = span(ky, g.sh, g.ph, g.h, g.oh);
        for oy in ylo..yhi {
            let iy = oy * g.sh + ky - g.ph;
            let src = &x[iy * g.w..][..g.w];
            let dst = &mut out[oy * g.ow..][..g.ow];
            for kx in 0..g.kw {
                gather_add(dst, src, k[ky * g.kw + kx], kx, g.sw, g.pw);
            }
        }
    }
}

/// Gradients of [`depthwise_plane`] with respect to input (`gx`) and kernel (`gk`).
pub(crate) fn depthwise_plane_backward(
    x: &[f32],
    k: &[f32],
    gy: &[f32],
    g: &Conv2dGeom,
    gx: Option<&mut [f32]>,
    gk: Option<&mut [f32]>,
) {
    if let Some(gk) = gk {
        for ky in 0..g.kh {
            let (ylo, yhi) = span(ky, g.sh, g.ph, g.h, g.oh);
            for kx in 0..g.kw {
                let mut acc = 0.0f32;
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ky - g.ph;
                    acc += gather_dot(&gy[oy * g.ow..][..g.ow], &x[iy * g.w..][..g.w], kx, g.sw, g.pw);
                }
                gk[ky * g.kw + kx] += acc;
            }
        }
    }
    if let Some(gx) = gx {
        for ky in 0..g.kh {
            let (ylo, yhi) = span(ky, g.sh, g.ph, g.h, g.oh);
            for oy in ylo..yhi {
                let iy = oy * g.sh + ky - g.ph;
                let dst = &mut gx[iy * g.w..][..g.w];
                let gyr = &gy[oy * g.ow..][..g.ow];
                for kx in 0..g.kw {
                    scatter_add(dst, gyr, k[ky * g.kw + kx], kx, g.sw, g.pw);
                }
            }
        }
    }
}

/// Target logit under an additive angular margin, given the target cosine `c`.
///
/// Uses `cos(theta + m)` while `theta + m < pi`, and the linear fallback `c - m*sin(m)`
/// beyond that point so the logit stays monotone in `theta`.
pub(crate) fn margin_cosine(c: f64, margin: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    if c > (std::f64::consts::PI - margin).cos() {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        c * margin.cos() - sin * margin.sin()
    } else {
        c - margin * margin.sin()
    }
}

/// Derivative of [`margin_cosine`] with respect to `c`.
pub(crate) fn margin_cosine_grad(c: f64, margin: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    if c > (std::f64::consts::PI - margin).cos() {
        let sin = (1.0 - c * c).max(1e-12).sqrt();
        margin.cos() + margin.sin() * c / sin
    } else {
        1.0
    }
}

/// Softmax probabilities (in `f64`) of one logit row, max-subtracted.
pub(crate) fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_matches_exhaustive_search() {
        for len in 1..9 {
            for k in 0..5 {
                for stride in 1..4 {
                    for pad in 0..4 {
                        let Some(out_len) = out_dim(len, k + 1, stride, pad) else { continue };
                        let valid: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let (lo, hi) = span(k, stride, pad, len, out_len);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), valid, "len {len} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }
}
