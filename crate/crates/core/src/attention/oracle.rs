//! Scalar-loop reference mixers.
//!
//! Nothing here touches the tensor kernels or the tape; every product is an
//! explicit loop so the fast path can be checked against it.

use super::{SCAParams, VanillaAttnParams};
use crate::error::{Error, Result};
use crate::params::LinearParams;
use crate::tensor::Tensor;

fn project_row(p: &LinearParams, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    (0..out)
        .map(|o| {
            let mut s = match &p.bias {
                Some(b) => b.data()[o],
                None => 0.0,
            };
            for i in 0..inp {
                s += w[o * inp + i] * x[i];
            }
            s
        })
        .collect()
}

struct Reference<'a> {
    wq: &'a LinearParams,
    wk: &'a LinearParams,
    wv: &'a LinearParams,
    wo: &'a LinearParams,
    heads: usize,
    qk_dim: usize,
    dim_head: usize,
    scale: f64,
}

fn run(xq: &Tensor, xkv: &Tensor, r: Reference<'_>) -> Result<Tensor> {
    let (&[b, nq, cq], &[b2, nkv, ckv]) = (xq.shape(), xkv.shape()) else {
        return Err(Error::InvalidShape {
            op: "oracle",
            msg: format!("expected token tensors, got {:?} and {:?}", xq.shape(), xkv.shape()),
        });
    };
    if b != b2 || r.wq.weight.shape()[1] != cq || r.wk.weight.shape()[1] != ckv {
        return Err(Error::ShapeMismatch {
            op: "oracle",
            lhs: xq.shape().to_vec(),
            rhs: xkv.shape().to_vec(),
        });
    }
    let c_out = r.wo.weight.shape()[0];
    let mut out = Vec::with_capacity(b * nq * c_out);
    for bi in 0..b {
        let qrows: Vec<Vec<f64>> = (0..nq)
            .map(|i| project_row(r.wq, &xq.data()[(bi * nq + i) * cq..(bi * nq + i + 1) * cq]))
            .collect();
        let kv_row = |j: usize| &xkv.data()[(bi * nkv + j) * ckv..(bi * nkv + j + 1) * ckv];
        let krows: Vec<Vec<f64>> = (0..nkv).map(|j| project_row(r.wk, kv_row(j))).collect();
        let vrows: Vec<Vec<f64>> = (0..nkv).map(|j| project_row(r.wv, kv_row(j))).collect();
        for q in &qrows {
            let mut concat = vec![0.0; r.heads * r.dim_head];
            for h in 0..r.heads {
                let mut logits = vec![0.0; nkv];
                for (j, k) in krows.iter().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..r.qk_dim {
                        dot += q[h * r.qk_dim + d] * k[h * r.qk_dim + d];
                    }
                    logits[j] = r.scale * dot;
                }
                let mut max = f64::NEG_INFINITY;
                for &l in &logits {
                    if l > max {
                        max = l;
                    }
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for e in 0..r.dim_head {
                    let mut acc = 0.0;
                    for j in 0..nkv {
                        acc += logits[j] / z * vrows[j][h * r.dim_head + e];
                    }
                    concat[h * r.dim_head + e] = acc;
                }
            }
            out.extend(project_row(r.wo, &concat));
        }
    }
    Tensor::new(vec![b, nq, c_out], out)
}

/// Reference vanilla multi-head attention (self-attention when `xq == xkv`).
pub fn oracle_attention(xq: &Tensor, xkv: &Tensor, p: &VanillaAttnParams) -> Result<Tensor> {
    run(
        xq,
        xkv,
        Reference {
            wq: &p.wq,
            wk: &p.wk,
            wv: &p.wv,
            wo: &p.wo,
            heads: p.heads,
            qk_dim: p.dim_head,
            dim_head: p.dim_head,
            scale: p.scale,
        },
    )
}

/// Reference strip cross-attention with scalar per-head queries and keys.
pub fn oracle_strip_attention(xq: &Tensor, xkv: &Tensor, p: &SCAParams) -> Result<Tensor> {
    run(
        xq,
        xkv,
        Reference {
            wq: &p.wq,
            wk: &p.wk,
            wv: &p.wv,
            wo: &p.wo,
            heads: p.heads,
            qk_dim: 1,
            dim_head: p.dim_head,
            scale: p.scale,
        },
    )
}
