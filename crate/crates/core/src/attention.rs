//! Token mixers: vanilla self-attention, vanilla cross-attention and strip
//! cross-attention, where queries and keys are compressed to one scalar per
//! head per token.
//!
//! Head layout is fixed: output channel block `[h·d, (h+1)·d)` of a
//! projection belongs to head `h` (for strip queries/keys `d = 1`, so
//! channel `h` is head `h`'s logit).

pub mod oracle;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, LinearParams};
use crate::synth::SplitMix64;
use crate::tensor::{Region, Tape, Tensor, Var};

/// Which token mixer a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    /// Self-attention over the query tokens only.
    Sa,
    /// Vanilla cross-attention.
    Ca,
    /// Strip cross-attention.
    Sca,
}

impl MixerKind {
    pub const ALL: [MixerKind; 3] = [MixerKind::Sa, MixerKind::Ca, MixerKind::Sca];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Sa => "SA",
            MixerKind::Ca => "CA",
            MixerKind::Sca => "SCA",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Projections of vanilla multi-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaAttnParams<T = Tensor> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub heads: usize,
    pub dim_head: usize,
    pub scale: f64,
}

/// Projections of strip cross-attention: `wq`/`wk` emit `heads` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SCAParams<T = Tensor> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub heads: usize,
    pub dim_head: usize,
    pub scale: f64,
}

impl VanillaAttnParams {
    /// Random init, `scale = 1/√dim_head`.
    pub fn init(
        rng: &mut SplitMix64,
        c_q: usize,
        c_kv: usize,
        heads: usize,
        dim_head: usize,
        std: f64,
    ) -> Self {
        let inner = heads * dim_head;
        VanillaAttnParams {
            wq: LinearParams::init(rng, c_q, inner, std),
            wk: LinearParams::init(rng, c_kv, inner, std),
            wv: LinearParams::init(rng, c_kv, inner, std),
            wo: LinearParams::init(rng, inner, c_q, std),
            heads,
            dim_head,
            scale: 1.0 / (dim_head as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inner = self.heads * self.dim_head;
        check_heads(self.heads, self.dim_head, self.scale)?;
        check_out("wq", &self.wq, inner)?;
        check_out("wk", &self.wk, inner)?;
        check_out("wv", &self.wv, inner)?;
        check_in("wo", &self.wo, inner)
    }

    pub fn forward_self(&self, x: &Tensor) -> Result<AttnOutput> {
        run_detached(|t| {
            let x = t.leaf(x.clone());
            let p = self.map("", &mut |_, w| t.leaf(w.clone()));
            self_attention(t, x, &p)
        })
    }

    pub fn forward_cross(&self, xq: &Tensor, xkv: &Tensor) -> Result<AttnOutput> {
        run_detached(|t| {
            let xq = t.leaf(xq.clone());
            let xkv = t.leaf(xkv.clone());
            let p = self.map("", &mut |_, w| t.leaf(w.clone()));
            cross_attention(t, xq, xkv, &p)
        })
    }
}

impl SCAParams {
    /// Random init, `scale = 1` (keys are one-dimensional).
    pub fn init(
        rng: &mut SplitMix64,
        c_q: usize,
        c_kv: usize,
        heads: usize,
        dim_head: usize,
        std: f64,
    ) -> Self {
        let inner = heads * dim_head;
        SCAParams {
            wq: LinearParams::init(rng, c_q, heads, std),
            wk: LinearParams::init(rng, c_kv, heads, std),
            wv: LinearParams::init(rng, c_kv, inner, std),
            wo: LinearParams::init(rng, inner, c_q, std),
            heads,
            dim_head,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.heads, self.dim_head, self.scale)?;
        check_out("wq", &self.wq, self.heads)?;
        check_out("wk", &self.wk, self.heads)?;
        check_out("wv", &self.wv, self.heads * self.dim_head)?;
        check_in("wo", &self.wo, self.heads * self.dim_head)
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<AttnOutput> {
        run_detached(|t| {
            let xq = t.leaf(xq.clone());
            let xkv = t.leaf(xkv.clone());
            let p = self.map("", &mut |_, w| t.leaf(w.clone()));
            strip_cross_attention(t, xq, xkv, &p)
        })
    }
}

macro_rules! attn_param_traversal {
    ($ty:ident) => {
        impl<T> $ty<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty {
                    wq: self.wq.map(&join(prefix, "wq"), f),
                    wk: self.wk.map(&join(prefix, "wk"), f),
                    wv: self.wv.map(&join(prefix, "wv"), f),
                    wo: self.wo.map(&join(prefix, "wo"), f),
                    heads: self.heads,
                    dim_head: self.dim_head,
                    scale: self.scale,
                }
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                self.wq.visit_mut(&join(prefix, "wq"), f);
                self.wk.visit_mut(&join(prefix, "wk"), f);
                self.wv.visit_mut(&join(prefix, "wv"), f);
                self.wo.visit_mut(&join(prefix, "wo"), f);
            }
        }
    };
}

attn_param_traversal!(VanillaAttnParams);
attn_param_traversal!(SCAParams);

fn check_heads(heads: usize, dim_head: usize, scale: f64) -> Result<()> {
    if heads == 0 || dim_head == 0 || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidShape {
            op: "attention params",
            msg: format!("heads={heads}, dim_head={dim_head}, scale={scale} must be positive"),
        });
    }
    Ok(())
}

fn check_out(name: &'static str, p: &LinearParams, out: usize) -> Result<()> {
    if p.out_features() != out {
        return Err(Error::InvalidShape {
            op: "attention params",
            msg: format!("{name} emits {} features, expected {out}", p.out_features()),
        });
    }
    Ok(())
}

fn check_in(name: &'static str, p: &LinearParams, inp: usize) -> Result<()> {
    if p.in_features() != inp {
        return Err(Error::InvalidShape {
            op: "attention params",
            msg: format!("{name} takes {} features, expected {inp}", p.in_features()),
        });
    }
    Ok(())
}

/// Mixer output with the attention map kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnOutput {
    /// `[B, N_q, C_q]`
    pub out: Tensor,
    /// `[B, heads, N_q, N_kv]`, rows sum to one.
    pub attn: Tensor,
}

/// Tape handles of a mixer output.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub out: Var,
    pub attn: Var,
}

fn run_detached(f: impl FnOnce(&mut Tape) -> Result<AttnVars>) -> Result<AttnOutput> {
    let mut tape = Tape::new();
    let vars = f(&mut tape)?;
    Ok(AttnOutput {
        out: tape.value(vars.out).clone(),
        attn: tape.value(vars.attn).clone(),
    })
}

fn tokens_shape(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.value(x).shape() {
        [b, n, c] => Ok((b, n, c)),
        ref s => Err(Error::InvalidShape {
            op: "attention",
            msg: format!("expected tokens [B, N, C], got {s:?}"),
        }),
    }
}

/// `[B, N, heads·d] -> [B, heads, N, d]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let (b, n, c) = tokens_shape(tape, x)?;
    let r = tape.reshape(x, &[b, n, heads, c / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, heads, N, d] -> [B, N, heads·d]`
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let [b, h, n, d] = *tape.value(x).shape() else {
        unreachable!("merge_heads expects a 4-D head tensor")
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, n, h * d])
}

struct Projections<'a, T> {
    wq: &'a LinearParams<T>,
    wk: &'a LinearParams<T>,
    wv: &'a LinearParams<T>,
    wo: &'a LinearParams<T>,
    heads: usize,
    scale: f64,
}

fn attend(tape: &mut Tape, xq: Var, xkv: Var, p: Projections<'_, Var>) -> Result<AttnVars> {
    let (bq, _, _) = tokens_shape(tape, xq)?;
    let (bk, _, _) = tokens_shape(tape, xkv)?;
    if bq != bk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.value(xq).shape().to_vec(),
            rhs: tape.value(xkv).shape().to_vec(),
        });
    }
    let heads = p.heads;
    let (q, kt) = tape.in_region(Region::QueryKey, |t| -> Result<_> {
        let q = p.wq.apply(t, xq)?;
        let q = split_heads(t, q, heads)?;
        let k = p.wk.apply(t, xkv)?;
        let k = split_heads(t, k, heads)?;
        Ok((q, t.transpose_last2(k)?))
    })?;
    let v = tape.in_region(Region::Value, |t| -> Result<_> {
        let v = p.wv.apply(t, xkv)?;
        split_heads(t, v, heads)
    })?;
    let scores = tape.in_region(Region::Score, |t| t.matmul(q, kt))?;
    let attn = tape.scaled_softmax_lastdim(scores, p.scale);
    let weighted = tape.in_region(Region::WeightedSum, |t| t.matmul(attn, v))?;
    let out = tape.in_region(Region::Output, |t| -> Result<_> {
        let merged = merge_heads(t, weighted)?;
        p.wo.apply(t, merged)
    })?;
    Ok(AttnVars { out, attn })
}

/// Multi-head self-attention on `x: [B, N, C]`.
pub fn self_attention(tape: &mut Tape, x: Var, p: &VanillaAttnParams<Var>) -> Result<AttnVars> {
    cross_attention(tape, x, x, p)
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
pub fn cross_attention(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    p: &VanillaAttnParams<Var>,
) -> Result<AttnVars> {
    attend(
        tape,
        xq,
        xkv,
        Projections {
            wq: &p.wq,
            wk: &p.wk,
            wv: &p.wv,
            wo: &p.wo,
            heads: p.heads,
            scale: p.scale,
        },
    )
}

/// Strip cross-attention: `Q: [B, heads, N_q, 1]`, `K: [B, heads, N_kv, 1]`,
/// `V: [B, heads, N_kv, dim_head]`, `out = wo(concat_h(softmax(s·QKᵀ)·V))`.
pub fn strip_cross_attention(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    p: &SCAParams<Var>,
) -> Result<AttnVars> {
    attend(
        tape,
        xq,
        xkv,
        Projections {
            wq: &p.wq,
            wk: &p.wk,
            wv: &p.wv,
            wo: &p.wo,
            heads: p.heads,
            scale: p.scale,
        },
    )
}

/// Tensor-level convenience wrappers.
pub fn self_attention_tensor(x: &Tensor, p: &VanillaAttnParams) -> Result<AttnOutput> {
    p.validate()?;
    p.forward_self(x)
}

pub fn cross_attention_tensor(xq: &Tensor, xkv: &Tensor, p: &VanillaAttnParams) -> Result<AttnOutput> {
    p.validate()?;
    p.forward_cross(xq, xkv)
}

pub fn strip_cross_attention_tensor(xq: &Tensor, xkv: &Tensor, p: &SCAParams) -> Result<AttnOutput> {
    p.validate()?;
    p.forward(xq, xkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> SplitMix64 {
        SplitMix64::new(17)
    }

    fn rows_stochastic(attn: &Tensor) -> bool {
        let n = *attn.shape().last().unwrap();
        attn.data()
            .chunks(n)
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-10 && r.iter().all(|&v| v >= 0.0))
    }

    #[test]
    fn single_token_self_attention_is_value_path() {
        let mut r = rng();
        let p = VanillaAttnParams::init(&mut r, 4, 4, 2, 3, 0.5);
        let x = r.normal_tensor(vec![1, 1, 4], 1.0);
        let o = self_attention_tensor(&x, &p).unwrap();
        assert_eq!(o.attn.data(), &[1.0, 1.0]);
        let direct = p.wo.forward(&p.wv.forward(&x).unwrap()).unwrap();
        assert!(o.out.max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn zero_value_path_gives_zero_output() {
        let mut r = rng();
        let mut p = VanillaAttnParams::init(&mut r, 4, 4, 2, 2, 0.5);
        p.wv.zero();
        if let Some(b) = &mut p.wo.bias {
            *b = Tensor::zeros(b.shape().to_vec());
        }
        let x = r.normal_tensor(vec![2, 5, 4], 1.0);
        let o = self_attention_tensor(&x, &p).unwrap();
        assert!(o.out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_with_same_input_equals_self() {
        let mut r = rng();
        let p = VanillaAttnParams::init(&mut r, 6, 6, 3, 2, 0.5);
        let x = r.normal_tensor(vec![1, 7, 6], 1.0);
        let a = self_attention_tensor(&x, &p).unwrap();
        let b = cross_attention_tensor(&x, &x, &p).unwrap();
        assert!(a.out.max_abs_diff(&b.out) < 1e-12);
    }

    #[test]
    fn single_key_takes_full_weight() {
        let mut r = rng();
        let p = VanillaAttnParams::init(&mut r, 4, 3, 2, 2, 0.5);
        let xq = r.normal_tensor(vec![1, 5, 4], 1.0);
        let xkv = r.normal_tensor(vec![1, 1, 3], 1.0);
        let o = cross_attention_tensor(&xq, &xkv, &p).unwrap();
        assert!(o.attn.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn strip_single_key_broadcasts_value() {
        let mut r = rng();
        let p = SCAParams::init(&mut r, 4, 6, 2, 3, 0.5);
        let xq = r.normal_tensor(vec![1, 5, 4], 1.0);
        let xkv = r.normal_tensor(vec![1, 1, 6], 1.0);
        let o = strip_cross_attention_tensor(&xq, &xkv, &p).unwrap();
        let direct = p.wo.forward(&p.wv.forward(&xkv).unwrap()).unwrap();
        for row in o.out.data().chunks(4) {
            for (a, b) in row.iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn strip_zero_query_is_uniform() {
        let mut r = rng();
        let mut p = SCAParams::init(&mut r, 4, 6, 2, 3, 0.5);
        p.wq.zero();
        let xq = r.normal_tensor(vec![1, 5, 4], 1.0);
        let xkv = r.normal_tensor(vec![1, 6, 6], 1.0);
        let o = strip_cross_attention_tensor(&xq, &xkv, &p).unwrap();
        assert!(o.attn.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let first = &o.out.data()[..4];
        for row in o.out.data().chunks(4) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut r = rng();
        let xq = r.normal_tensor(vec![2, 6, 8], 2.0);
        let xkv = r.normal_tensor(vec![2, 9, 5], 2.0);
        let v = VanillaAttnParams::init(&mut r, 8, 5, 2, 4, 0.5);
        let s = SCAParams::init(&mut r, 8, 5, 4, 2, 0.5);
        let v_self = VanillaAttnParams::init(&mut r, 8, 8, 2, 4, 0.5);
        assert!(rows_stochastic(&self_attention_tensor(&xq, &v_self).unwrap().attn));
        assert!(rows_stochastic(&cross_attention_tensor(&xq, &xkv, &v).unwrap().attn));
        assert!(rows_stochastic(&strip_cross_attention_tensor(&xq, &xkv, &s).unwrap().attn));
    }

    #[test]
    fn strip_params_must_emit_one_logit_per_head() {
        let mut r = rng();
        let mut p = SCAParams::init(&mut r, 4, 4, 2, 3, 0.5);
        p.wq = LinearParams::init(&mut r, 4, 6, 0.5);
        assert!(p.validate().is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut r = rng();
        let p = SCAParams::init(&mut r, 4, 6, 2, 3, 0.5);
        let xq = r.normal_tensor(vec![1, 5, 3], 1.0);
        let xkv = r.normal_tensor(vec![1, 2, 6], 1.0);
        assert!(matches!(
            strip_cross_attention_tensor(&xq, &xkv, &p),
            Err(Error::ShapeMismatch { op: "linear", .. })
        ));
        let xq = r.normal_tensor(vec![2, 5, 4], 1.0);
        assert!(strip_cross_attention_tensor(&xq, &xkv, &p).is_err());
    }
}
