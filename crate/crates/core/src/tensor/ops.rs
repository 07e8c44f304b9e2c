//! Forward kernels as pure functions over [`Tensor`], together with the
//! vector-Jacobian products the tape replays.
//!
//! Every reduction runs in a fixed ascending order so results are
//! bit-reproducible.

use super::{strides, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------- matmul

/// Batch layout of a broadcast matmul: which slice of `a` and `b` feeds each
/// output slice.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub a_slice: Vec<usize>,
    pub b_slice: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let rank = a_lead.len().max(b_lead.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a_lead), pad(b_lead));
        let mut batch = Vec::with_capacity(rank);
        for (&da, &db) in pa.iter().zip(&pb) {
            if da == db || db == 1 {
                batch.push(da);
            } else if da == 1 {
                batch.push(db);
            } else {
                return Err(mismatch());
            }
        }
        let total: usize = batch.iter().product();
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut a_slice = Vec::with_capacity(total);
        let mut b_slice = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ia += coord[d] * sa[d];
                }
                if pb[d] != 1 {
                    ib += coord[d] * sb[d];
                }
            }
            a_slice.push(ia);
            b_slice.push(ib);
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < batch[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            out_shape,
            a_slice,
            b_slice,
            m,
            k,
            n,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.a_slice.len() * self.m * self.k * self.n) as u64
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c += aᵀ · g` for `a: m×k`, `g: m×n`, `c: k×n`.
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// Batched matrix product `[.., m, k] · [.., k, n]`; leading extents must
/// match or be 1.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    Ok(matmul_with(&plan, a, b))
}

pub(crate) fn matmul_with(plan: &MatmulPlan, a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.a_slice.len() * m * n];
    for (bi, (&ia, &ib)) in plan.a_slice.iter().zip(&plan.b_slice).enumerate() {
        gemm_acc(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::from_parts(plan.out_shape.clone(), out)
}

pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for (bi, (&ia, &ib)) in plan.a_slice.iter().zip(&plan.b_slice).enumerate() {
        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
        gemm_nt_acc(
            gs,
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut ga[ia * m * k..(ia + 1) * m * k],
            m,
            n,
            k,
        );
        gemm_tn_acc(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            gs,
            &mut gb[ib * k * n..(ib + 1) * k * n],
            m,
            k,
            n,
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

// ---------------------------------------------------------------- linear

fn linear_dims(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let mismatch = |rhs: &[usize]| Error::ShapeMismatch {
        op: "linear",
        lhs: x.shape().to_vec(),
        rhs: rhs.to_vec(),
    };
    if weight.ndim() != 2 || x.ndim() == 0 {
        return Err(mismatch(weight.shape()));
    }
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    if *x.shape().last().unwrap() != inp {
        return Err(mismatch(weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(mismatch(b.shape()));
        }
    }
    Ok((x.numel() / inp, inp, out))
}

/// `x · weightᵀ + bias` over the trailing axis.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, inp, out) = linear_dims(x, weight, bias)?;
    let mut y = vec![0.0; rows * out];
    gemm_nt_acc(x.data(), weight.data(), &mut y, rows, inp, out);
    if let Some(b) = bias {
        for row in y.chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Ok(Tensor::from_parts(shape, y))
}

pub(crate) fn linear_macs(x: &Tensor, weight: &Tensor) -> u64 {
    (x.numel() / weight.shape()[1] * weight.numel()) as u64
}

/// Returns gradients for `(x, weight, bias)`.
pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.numel() / inp;
    let mut gx = vec![0.0; x.numel()];
    gemm_acc(g.data(), weight.data(), &mut gx, rows, out, inp);
    let mut gw = vec![0.0; weight.numel()];
    gemm_tn_acc(g.data(), x.data(), &mut gw, rows, out, inp);
    let mut gbias = vec![0.0; out];
    for row in g.data().chunks(out) {
        for (s, &v) in gbias.iter_mut().zip(row) {
            *s += v;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![out], gbias),
    )
}

// ---------------------------------------------------------------- softmax

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    scaled_softmax_lastdim(x, 1.0)
}

/// `softmax(s·x)` over the last axis without materializing `s·x`.
pub fn scaled_softmax_lastdim(x: &Tensor, s: f64) -> Tensor {
    let n = x.shape().last().copied().unwrap_or(1);
    let mut y = vec![0.0; x.numel()];
    for (row, src) in y.chunks_mut(n).zip(x.data().chunks(n)) {
        let max = src.iter().map(|&v| v * s).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = (v * s - max).exp();
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, s: f64) -> Tensor {
    let n = y.shape().last().copied().unwrap_or(1);
    let mut gx = vec![0.0; y.numel()];
    for ((yr, gr), out) in y
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(gx.chunks_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = s * yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

// ---------------------------------------------------------------- layernorm

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layernorm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let c = x.shape().last().copied().unwrap_or(0);
    if x.ndim() == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (xr[j] - mean) * is;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        LayerNormCache { xhat, inv_std },
    ))
}

/// Layer normalization over the trailing (channel) axis, biased variance.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Gradients for `(x, gamma, beta)`.
pub(crate) fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let rows = g.numel() / c;
    let mut gx = vec![0.0; g.numel()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut dh = vec![0.0; c];
    for r in 0..rows {
        let gr = &g.data()[r * c..(r + 1) * c];
        let hr = &cache.xhat[r * c..(r + 1) * c];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..c {
            ggamma[j] += gr[j] * hr[j];
            gbeta[j] += gr[j];
            dh[j] = gr[j] * gamma.data()[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * hr[j];
        }
        mean_dh /= c as f64;
        mean_dh_h /= c as f64;
        let is = cache.inv_std[r];
        for j in 0..c {
            gx[r * c + j] = is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (
        Tensor::from_parts(g.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

// ---------------------------------------------------------------- activations

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

// ---------------------------------------------------------------- depthwise conv

fn nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected [B, C, H, W], got {:?}", x.shape()),
        }),
    }
}

pub(crate) fn dwconv_check(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    let (_, c, _, _) = nchw("depthwise_conv", x)?;
    let [kc, kh, kw] = *kernel.shape() else {
        return Err(Error::InvalidShape {
            op: "depthwise_conv",
            msg: format!("kernel must be [C, kh, kw], got {:?}", kernel.shape()),
        });
    };
    if !matches!((kh, kw), (1, 1) | (3, 3) | (1, 3) | (3, 1)) {
        return Err(Error::UnsupportedKernel { kh, kw });
    }
    if kc != c || bias.is_some_and(|b| b.shape() != [c]) {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-channel same-padded cross-correlation with zero padding.
pub fn depthwise_conv(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    dwconv_check(x, kernel, bias)?;
    let (b, c, h, w) = nchw("depthwise_conv", x)?;
    let (kh, kw) = (kernel.shape()[1], kernel.shape()[2]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut y = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let k = &kernel.data()[ci * kh * kw..(ci + 1) * kh * kw];
            let b0 = bias.map_or(0.0, |t| t.data()[ci]);
            let out = &mut y[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut s = b0;
                    for u in 0..kh {
                        let ii = i + u;
                        if ii < ph || ii - ph >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = j + v;
                            if jj < pw || jj - pw >= w {
                                continue;
                            }
                            s += k[u * kw + v] * plane[(ii - ph) * w + (jj - pw)];
                        }
                    }
                    out[i * w + j] = s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub(crate) fn dwconv_macs(x: &Tensor, kernel: &Tensor) -> u64 {
    (x.numel() * kernel.shape()[1] * kernel.shape()[2]) as u64
}

/// Gradients for `(x, kernel, bias)`.
pub(crate) fn depthwise_conv_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = *x.shape() else { unreachable!() };
    let (kh, kw) = (kernel.shape()[1], kernel.shape()[2]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    let mut gb = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let plane = &x.data()[off..off + h * w];
            let gp = &g.data()[off..off + h * w];
            let k = &kernel.data()[ci * kh * kw..(ci + 1) * kh * kw];
            for i in 0..h {
                for j in 0..w {
                    let gv = gp[i * w + j];
                    gb[ci] += gv;
                    for u in 0..kh {
                        let ii = i + u;
                        if ii < ph || ii - ph >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = j + v;
                            if jj < pw || jj - pw >= w {
                                continue;
                            }
                            let src = (ii - ph) * w + (jj - pw);
                            gk[ci * kh * kw + u * kw + v] += gv * plane[src];
                            gx[off + src] += gv * k[u * kw + v];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![c], gb),
    )
}

// ---------------------------------------------------------------- pooling

/// Spatial mean per (batch, channel): `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = nchw("global_avg_pool", x)?;
    let area = h * w;
    let data = x
        .data()
        .chunks(area)
        .map(|p| p.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

pub(crate) fn global_avg_pool_backward(x_shape: &[usize], g: &Tensor) -> Tensor {
    let area = x_shape[2] * x_shape[3];
    let mut gx = Vec::with_capacity(g.numel() * area);
    for &v in g.data() {
        gx.extend(std::iter::repeat_n(v / area as f64, area));
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

/// Mean over non-overlapping cells; extents must divide evenly.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = nchw("adaptive_avg_pool", x)?;
    if out_h == 0 || out_h > h || h % out_h != 0 {
        return Err(Error::NotDivisible {
            op: "adaptive_avg_pool",
            extent: h,
            by: out_h,
        });
    }
    if out_w == 0 || out_w > w || w % out_w != 0 {
        return Err(Error::NotDivisible {
            op: "adaptive_avg_pool",
            extent: w,
            by: out_w,
        });
    }
    let (sh, sw) = (h / out_h, w / out_w);
    let area = (sh * sw) as f64;
    let mut y = vec![0.0; b * c * out_h * out_w];
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut s = 0.0;
                for i in oi * sh..(oi + 1) * sh {
                    for j in oj * sw..(oj + 1) * sw {
                        s += plane[i * w + j];
                    }
                }
                y[(p * out_h + oi) * out_w + oj] = s / area;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], y))
}

pub(crate) fn adaptive_avg_pool_backward(x_shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let (sh, sw) = (h / out_h, w / out_w);
    let area = (sh * sw) as f64;
    let planes = x_shape[0] * x_shape[1];
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                gx[p * h * w + i * w + j] = g.data()[(p * out_h + i / sh) * out_w + j / sw] / area;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

// ---------------------------------------------------------------- bilinear

/// Source taps `(lo, hi, t)` for each output coordinate using half-pixel
/// centers clamped to the input range.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Separable bilinear interpolation, `[B, C, H, W] -> [B, C, out_h, out_w]`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = nchw("bilinear_resize", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            op: "bilinear_resize",
            msg: format!("target {out_h}x{out_w} must be positive"),
        });
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut y = vec![0.0; b * c * out_h * out_w];
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for (oi, &(y0, y1, ty)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, tx)) in tx.iter().enumerate() {
                let top = (1.0 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1];
                let bot = (1.0 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1];
                y[(p * out_h + oi) * out_w + oj] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], y))
}

pub(crate) fn bilinear_resize_backward(x_shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let planes = x_shape[0] * x_shape[1];
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        for (oi, &(y0, y1, ty)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, tx)) in tx.iter().enumerate() {
                let gv = g.data()[(p * out_h + oi) * out_w + oj];
                gp[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                gp[y0 * w + x1] += gv * (1.0 - ty) * tx;
                gp[y1 * w + x0] += gv * ty * (1.0 - tx);
                gp[y1 * w + x1] += gv * ty * tx;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

// ---------------------------------------------------------------- layout

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::InvalidShape {
            op: "permute",
            msg: format!("axes {axes:?} are not a permutation of {nd} dims"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut coord = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[src]);
        for d in (0..nd).rev() {
            coord[d] += 1;
            src += src_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::InvalidShape {
            op: "transpose",
            msg: format!("need at least 2 dims, got {:?}", x.shape()),
        });
    }
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 2, nd - 1);
    permute(x, &axes)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::InvalidShape {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    if axis >= first.ndim() {
        return Err(Error::InvalidShape {
            op: "concat",
            msg: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    for t in xs {
        let ok = t.ndim() == first.ndim()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat_backward(shapes: &[Vec<usize>], axis: usize, g: &Tensor) -> Vec<Tensor> {
    let outer: usize = g.shape()[..axis].iter().product();
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let mut parts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut src = 0;
    for _ in 0..outer {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            let chunk = s[axis] * inner;
            part.extend_from_slice(&g.data()[src..src + chunk]);
            src += chunk;
        }
    }
    shapes
        .iter()
        .zip(parts)
        .map(|(s, p)| Tensor::from_parts(s.clone(), p))
        .collect()
}

// ---------------------------------------------------------------- elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

/// Multiplies each `[H, W]` plane of `x: [B, C, H, W]` by `w[b, c]`.
pub fn channel_scale(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = nchw("channel_scale", x)?;
    if w.shape() != [b, c] {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let area = h * wd;
    let mut y = x.data().to_vec();
    for (plane, &s) in y.chunks_mut(area).zip(w.data()) {
        for v in plane {
            *v *= s;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub(crate) fn channel_scale_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let area = x.shape()[2] * x.shape()[3];
    let mut gx = g.data().to_vec();
    let mut gw = vec![0.0; w.numel()];
    for (p, (gp, xp)) in gx.chunks_mut(area).zip(x.data().chunks(area)).enumerate() {
        let mut s = 0.0;
        for (gv, &xv) in gp.iter_mut().zip(xp) {
            s += *gv * xv;
            *gv *= w.data()[p];
        }
        gw[p] = s;
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let a = t(&[1, 2], &[1.0, 2.0]);
        let c = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        let a = Tensor::from_fn(vec![2, 1, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(vec![1, 4, 3, 2], |i| (i % 5) as f64);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        assert!(matmul(&Tensor::zeros(vec![2, 2, 3]), &Tensor::zeros(vec![3, 3, 2])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_lastdim(&t(&[2], &[0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_lastdim(&t(&[3], &[1000.0; 3]));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&t(&[2], &[0.0, 3f64.ln()]));
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::ones(vec![3]);
        let zeros = Tensor::zeros(vec![3]);
        let y = layernorm(&t(&[3], &[5.0; 3]), &ones, &zeros, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);

        let eps = 1e-6;
        let y = layernorm(&t(&[2], &[1.0, 3.0]), &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), eps)
            .unwrap();
        let delta = 1.0 - 1.0 / (1.0 + eps).sqrt();
        assert!((y.data()[0] - (-1.0 + delta)).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 - delta)).abs() < 1e-15);

        let y = layernorm(
            &t(&[2], &[-4.0, 9.0]),
            &Tensor::zeros(vec![2]),
            &Tensor::full(vec![2], 7.0),
            eps,
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
    }

    #[test]
    fn depthwise_conv_examples() {
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(vec![2, 1, 1], 2.0);
        let y = depthwise_conv(&x, &k, Some(&Tensor::zeros(vec![2]))).unwrap();
        assert_eq!(y, x.map(|v| 2.0 * v));

        let k = Tensor::zeros(vec![2, 3, 3]);
        let y = depthwise_conv(&x, &k, Some(&Tensor::ones(vec![2]))).unwrap();
        assert_eq!(y, Tensor::ones(vec![1, 2, 3, 3]));

        let bad = Tensor::zeros(vec![2, 5, 5]);
        assert!(matches!(
            depthwise_conv(&x, &bad, None),
            Err(Error::UnsupportedKernel { kh: 5, kw: 5 })
        ));
    }

    #[test]
    fn pooling_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        assert_eq!(adaptive_avg_pool(&x, 1, 1).unwrap().data(), &[2.5]);
        let c = Tensor::full(vec![1, 1, 4, 4], 3.5);
        assert_eq!(adaptive_avg_pool(&c, 2, 2).unwrap(), Tensor::full(vec![1, 1, 2, 2], 3.5));
        assert!(matches!(
            adaptive_avg_pool(&Tensor::zeros(vec![1, 1, 6, 6]), 4, 4),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn bilinear_constant_and_unit_inputs() {
        let one = Tensor::full(vec![1, 1, 1, 1], 2.25);
        assert_eq!(bilinear_resize(&one, 5, 3).unwrap(), Tensor::full(vec![1, 1, 5, 3], 2.25));
        let c = Tensor::full(vec![2, 3, 4, 4], -1.5);
        let y = bilinear_resize(&c, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v + 1.5).abs() < 1e-15));
    }

    #[test]
    fn concat_and_permute_roundtrip() {
        let a = Tensor::from_fn(vec![2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(vec![2, 2, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(&c.data()[..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&c.data()[3..6], &[100.0, 101.0, 102.0]);
        let parts = concat_backward(&[vec![2, 1, 3], vec![2, 2, 3]], 1, &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let axes = [2, 0, 1];
        let p = permute(&c, &axes).unwrap();
        assert_eq!(p.shape(), &[3, 2, 3]);
        assert_eq!(permute(&p, &inverse_axes(&axes)).unwrap(), c);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.5);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(vec![3]))).unwrap(), x);
        let b = t(&[2], &[1.5, -2.0]);
        let y = linear(&x, &Tensor::zeros(vec![2, 3]), Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0, 1.5, -2.0]);
    }
}
