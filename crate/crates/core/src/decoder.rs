//! The segmentation head: mixed key/value construction, the cross-layer
//! block (mixer, local perception module, MLP) and the four-stage decode
//! from stride 32 back to stride 4.

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, self_attention, strip_cross_attention, AttnVars, MixerKind, SCAParams,
    VanillaAttnParams,
};
use crate::error::{Error, Result};
use crate::params::{join, DwConvParams, LinearParams, NormParams};
use crate::synth::{FeaturePyramid, SplitMix64};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Hyper-parameters of the head. Every value the architecture leaves open
/// lives here so it is echoed with each run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub mixer: MixerKind,
    pub num_classes: usize,
    /// Attention heads for stages 1..4.
    pub heads: [usize; 4],
    pub dim_head: usize,
    pub mlp_expansion: usize,
    pub lpm_enabled: bool,
    pub lpm_reduction: usize,
    /// Cross-layer key/value mixing for stages 1..4.
    pub cross_layer: [bool; 4],
    pub eps: f64,
    /// Logit scale of strip attention (keys are one-dimensional).
    pub sca_scale: f64,
    /// Logit scale of vanilla attention; `None` resolves to `1/√dim_head`.
    pub vanilla_scale: Option<f64>,
    pub init_std: f64,
    /// Zero every residual branch's final projection so each block is the
    /// identity map.
    pub identity_init: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            mixer: MixerKind::Sca,
            num_classes: 19,
            heads: [1, 2, 4, 8],
            dim_head: 8,
            mlp_expansion: 4,
            lpm_enabled: true,
            lpm_reduction: 4,
            cross_layer: [true; 4],
            eps: 1e-6,
            sca_scale: 1.0,
            vanilla_scale: None,
            init_std: 0.02,
            identity_init: false,
        }
    }
}

impl DecoderConfig {
    /// Fills derived defaults in place.
    pub fn resolve(&mut self) {
        if self.vanilla_scale.is_none() && self.dim_head > 0 {
            self.vanilla_scale = Some(1.0 / (self.dim_head as f64).sqrt());
        }
    }

    pub fn validate(&self, channels: &[usize; 4]) -> Result<()> {
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("decoder.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("num_classes", self.num_classes)?;
        pos("dim_head", self.dim_head)?;
        pos("mlp_expansion", self.mlp_expansion)?;
        pos("lpm_reduction", self.lpm_reduction)?;
        for h in self.heads {
            pos("heads", h)?;
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("decoder.eps", "must be positive"));
        }
        for (field, s) in [("sca_scale", Some(self.sca_scale)), ("vanilla_scale", self.vanilla_scale)] {
            if let Some(s) = s {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::config(format!("decoder.{field}"), "must be positive"));
                }
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("decoder.init_std", "must be non-negative"));
        }
        if self.lpm_enabled {
            for (i, &c) in channels.iter().enumerate() {
                if c % self.lpm_reduction != 0 {
                    return Err(Error::config(
                        "decoder.lpm_reduction",
                        format!("stage {} channels {c} not divisible by {}", i + 1, self.lpm_reduction),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ params

/// Local perception module: depthwise 1×1 → ReLU → depthwise 3×3, an
/// SE-style channel gate, and a depthwise 1×1 output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LpmParams<T = Tensor> {
    pub dw1: DwConvParams<T>,
    pub dw3: DwConvParams<T>,
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    pub dw_out: DwConvParams<T>,
    pub reduction: usize,
}

impl LpmParams {
    pub fn init(rng: &mut SplitMix64, c: usize, reduction: usize, std: f64) -> Result<Self> {
        if reduction == 0 || !c.is_multiple_of(reduction) {
            return Err(Error::NotDivisible {
                op: "lpm",
                extent: c,
                by: reduction,
            });
        }
        Ok(LpmParams {
            dw1: DwConvParams::init(rng, c, 1, std),
            dw3: DwConvParams::init(rng, c, 3, std),
            fc1: LinearParams::init(rng, c, c / reduction, std),
            fc2: LinearParams::init(rng, c / reduction, c, std),
            dw_out: DwConvParams::init(rng, c, 1, std),
            reduction,
        })
    }
}

impl<T> LpmParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LpmParams<U> {
        LpmParams {
            dw1: self.dw1.map(&join(prefix, "dw1"), f),
            dw3: self.dw3.map(&join(prefix, "dw3"), f),
            fc1: self.fc1.map(&join(prefix, "fc1"), f),
            fc2: self.fc2.map(&join(prefix, "fc2"), f),
            dw_out: self.dw_out.map(&join(prefix, "dw_out"), f),
            reduction: self.reduction,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.dw1.visit_mut(&join(prefix, "dw1"), f);
        self.dw3.visit_mut(&join(prefix, "dw3"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.dw_out.visit_mut(&join(prefix, "dw_out"), f);
    }
}

/// Token mixer parameters for one block.
#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams<T = Tensor> {
    Sa(VanillaAttnParams<T>),
    Ca(VanillaAttnParams<T>),
    Sca(SCAParams<T>),
}

impl<T> MixerParams<T> {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Sa(_) => MixerKind::Sa,
            MixerParams::Ca(_) => MixerKind::Ca,
            MixerParams::Sca(_) => MixerKind::Sca,
        }
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MixerParams<U> {
        match self {
            MixerParams::Sa(p) => MixerParams::Sa(p.map(prefix, f)),
            MixerParams::Ca(p) => MixerParams::Ca(p.map(prefix, f)),
            MixerParams::Sca(p) => MixerParams::Sca(p.map(prefix, f)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        match self {
            MixerParams::Sa(p) | MixerParams::Ca(p) => p.visit_mut(prefix, f),
            MixerParams::Sca(p) => p.visit_mut(prefix, f),
        }
    }

    pub fn output_projection_mut(&mut self) -> &mut LinearParams<T> {
        match self {
            MixerParams::Sa(p) | MixerParams::Ca(p) => &mut p.wo,
            MixerParams::Sca(p) => &mut p.wo,
        }
    }
}

/// One cross-layer block.
#[derive(Clone, Debug, PartialEq)]
pub struct ClbParams<T = Tensor> {
    pub ln1: NormParams<T>,
    /// Norm of the key/value input; absent for self-attention.
    pub ln_kv: Option<NormParams<T>>,
    pub ln2: NormParams<T>,
    pub ln3: NormParams<T>,
    pub mixer: MixerParams<T>,
    pub lpm: Option<LpmParams<T>>,
    pub mlp1: LinearParams<T>,
    pub mlp2: LinearParams<T>,
}

impl ClbParams {
    pub fn init(
        rng: &mut SplitMix64,
        c: usize,
        c_kv: usize,
        heads: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        let std = cfg.init_std;
        let mixer = match cfg.mixer {
            MixerKind::Sa => {
                let mut p = VanillaAttnParams::init(rng, c, c, heads, cfg.dim_head, std);
                p.scale = cfg.vanilla_scale.unwrap_or(p.scale);
                MixerParams::Sa(p)
            }
            MixerKind::Ca => {
                let mut p = VanillaAttnParams::init(rng, c, c_kv, heads, cfg.dim_head, std);
                p.scale = cfg.vanilla_scale.unwrap_or(p.scale);
                MixerParams::Ca(p)
            }
            MixerKind::Sca => {
                let mut p = SCAParams::init(rng, c, c_kv, heads, cfg.dim_head, std);
                p.scale = cfg.sca_scale;
                MixerParams::Sca(p)
            }
        };
        let lpm = if cfg.lpm_enabled {
            Some(LpmParams::init(rng, c, cfg.lpm_reduction, std)?)
        } else {
            None
        };
        let hidden = cfg.mlp_expansion * c;
        let mut p = ClbParams {
            ln1: NormParams::identity(c),
            ln_kv: (cfg.mixer != MixerKind::Sa).then(|| NormParams::identity(c_kv)),
            ln2: NormParams::identity(c),
            ln3: NormParams::identity(c),
            mixer,
            lpm,
            mlp1: LinearParams::init(rng, c, hidden, std),
            mlp2: LinearParams::init(rng, hidden, c, std),
        };
        if cfg.identity_init {
            p.zero_branches();
        }
        Ok(p)
    }

    /// Zeroes the final projection of every residual branch.
    pub fn zero_branches(&mut self) {
        self.mixer.output_projection_mut().zero();
        if let Some(lpm) = &mut self.lpm {
            lpm.dw_out.zero();
        }
        self.mlp2.zero();
    }

    pub fn channels(&self) -> usize {
        self.ln1.gamma.numel()
    }
}

impl<T> ClbParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ClbParams<U> {
        ClbParams {
            ln1: self.ln1.map(&join(prefix, "ln1"), f),
            ln_kv: self.ln_kv.as_ref().map(|n| n.map(&join(prefix, "ln_kv"), f)),
            ln2: self.ln2.map(&join(prefix, "ln2"), f),
            ln3: self.ln3.map(&join(prefix, "ln3"), f),
            mixer: self.mixer.map(&join(prefix, "mixer"), f),
            lpm: self.lpm.as_ref().map(|l| l.map(&join(prefix, "lpm"), f)),
            mlp1: self.mlp1.map(&join(prefix, "mlp1"), f),
            mlp2: self.mlp2.map(&join(prefix, "mlp2"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        if let Some(n) = &mut self.ln_kv {
            n.visit_mut(&join(prefix, "ln_kv"), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ln3.visit_mut(&join(prefix, "ln3"), f);
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        if let Some(l) = &mut self.lpm {
            l.visit_mut(&join(prefix, "lpm"), f);
        }
        self.mlp1.visit_mut(&join(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&join(prefix, "mlp2"), f);
    }
}

/// Parameters of the whole head. `stages[k]` is the block of stage `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T = Tensor> {
    pub stages: [ClbParams<T>; 4],
    pub fuse: LinearParams<T>,
    pub num_classes: usize,
    pub cross_layer: [bool; 4],
    pub mixer: MixerKind,
    pub lpm_enabled: bool,
    pub eps: f64,
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, channels: [usize; 4], seed: u64) -> Result<Self> {
        cfg.validate(&channels)?;
        let total: usize = channels.iter().sum();
        let mut stages = Vec::with_capacity(4);
        for (k, &c) in channels.iter().enumerate() {
            let mut rng = SplitMix64::substream(seed, 0x5EED_0000 + k as u64);
            let c_kv = if cfg.cross_layer[k] { total } else { c };
            stages.push(ClbParams::init(&mut rng, c, c_kv, cfg.heads[k], cfg).map_err(|e| e.at_stage(k + 1))?);
        }
        let mut rng = SplitMix64::substream(seed, 0x5EED_F05E);
        let fuse = LinearParams::init(&mut rng, total, cfg.num_classes, cfg.init_std);
        Ok(DecoderParams {
            stages: stages.try_into().expect("four stages"),
            fuse,
            num_classes: cfg.num_classes,
            cross_layer: cfg.cross_layer,
            mixer: cfg.mixer,
            lpm_enabled: cfg.lpm_enabled,
            eps: cfg.eps,
        })
    }

    pub fn stage(&self, i: usize) -> &ClbParams {
        &self.stages[i - 1]
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|k| self.stages[k].channels())
    }

    /// Dotted name and element count of every learnable tensor, in
    /// traversal order.
    pub fn leaf_sizes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.map("", &mut |name, t| out.push((name.to_string(), t.numel())));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.leaf_sizes().iter().map(|(_, n)| n).sum()
    }
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DecoderParams<U> {
        let stages = std::array::from_fn(|k| self.stages[k].map(&join(prefix, &format!("stage{}", k + 1)), f));
        DecoderParams {
            stages,
            fuse: self.fuse.map(&join(prefix, "fuse"), f),
            num_classes: self.num_classes,
            cross_layer: self.cross_layer,
            mixer: self.mixer,
            lpm_enabled: self.lpm_enabled,
            eps: self.eps,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", k + 1)), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

// ------------------------------------------------------------------ layout helpers

/// `[B, C, h, w] -> [B, h·w, C]`
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [b, c, h, w] = *tape.value(x).shape() else {
        return Err(Error::InvalidShape {
            op: "to_tokens",
            msg: format!("expected [B, C, H, W], got {:?}", tape.value(x).shape()),
        });
    };
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(p, &[b, h * w, c])
}

/// `[B, h·w, C] -> [B, C, h, w]`
fn to_grid(tape: &mut Tape, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    let [b, n, c] = *tape.value(x).shape() else {
        return Err(Error::InvalidShape {
            op: "to_grid",
            msg: format!("expected [B, N, C], got {:?}", tape.value(x).shape()),
        });
    };
    if n != h * w {
        return Err(Error::InvalidShape {
            op: "to_grid",
            msg: format!("{n} tokens do not fill a {h}x{w} grid"),
        });
    }
    let r = tape.reshape(x, &[b, h, w, c])?;
    tape.permute(r, &[0, 3, 1, 2])
}

fn grid_of(t: &Tensor) -> (usize, usize) {
    (t.shape()[2], t.shape()[3])
}

// ------------------------------------------------------------------ ops on the tape

/// Mixed key/value of stage `stage`: ρ(F₁..Fᵢ) and D_{i+1}..D₄, each pooled
/// to the stage-4 grid and concatenated along channels, as tokens.
pub fn build_mixed_kv_on(
    tape: &mut Tape,
    features: &[Var; 4],
    decoded: &[Option<Var>; 4],
    stage: usize,
) -> Result<Var> {
    let (h4, w4) = grid_of(tape.value(features[3]));
    let mut parts = Vec::with_capacity(4);
    for j in 1..=4 {
        let src = if j <= stage {
            features[j - 1]
        } else {
            decoded[j - 1].ok_or(Error::MissingDecoderOutput(j))?
        };
        parts.push(tape.adaptive_avg_pool(src, h4, w4)?);
    }
    let cat = tape.concat(&parts, 1)?;
    to_tokens(tape, cat)
}

/// Gating branch of the local perception module, `DWConv₁ₓ₁(ω ⊙ x_d)`, on an
/// NCHW input.
pub fn lpm_branch_on(tape: &mut Tape, x: Var, p: &LpmParams<Var>) -> Result<Var> {
    let a = p.dw1.apply(tape, x)?;
    let a = tape.relu(a);
    let xd = p.dw3.apply(tape, a)?;
    let s = tape.global_avg_pool(xd)?;
    let z = p.fc1.apply(tape, s)?;
    let z = tape.relu(z);
    let z = p.fc2.apply(tape, z)?;
    let omega = tape.sigmoid(z);
    let gated = tape.channel_scale(xd, omega)?;
    p.dw_out.apply(tape, gated)
}

/// Local perception module on tokens laid out on an `h × w` grid:
/// `y = x + DWConv₁ₓ₁(ω ⊙ x_d)`.
pub fn lpm_on(tape: &mut Tape, x: Var, grid: (usize, usize), p: &LpmParams<Var>) -> Result<Var> {
    let g = to_grid(tape, x, grid)?;
    let branch = lpm_branch_on(tape, g, p)?;
    let branch = to_tokens(tape, branch)?;
    tape.add(x, branch)
}

/// Runs the block's token mixer on already-normalized inputs.
fn mix(tape: &mut Tape, q: Var, kv: Var, p: &MixerParams<Var>) -> Result<AttnVars> {
    match p {
        MixerParams::Sa(p) => self_attention(tape, q, p),
        MixerParams::Ca(p) => cross_attention(tape, q, kv, p),
        MixerParams::Sca(p) => strip_cross_attention(tape, q, kv, p),
    }
}

/// Cross-layer block on query tokens `f` (grid `h × w`) and key/value tokens
/// `m`; returns the output tokens and the attention map.
pub fn clb_on(
    tape: &mut Tape,
    f: Var,
    m: Var,
    grid: (usize, usize),
    p: &ClbParams<Var>,
    eps: f64,
) -> Result<(Var, Var)> {
    let q = p.ln1.apply(tape, f, eps)?;
    let attn = match &p.ln_kv {
        Some(ln) => {
            let kv = ln.apply(tape, m, eps)?;
            mix(tape, q, kv, &p.mixer)?
        }
        None => mix(tape, q, q, &p.mixer)?,
    };
    let zg = tape.add(attn.out, f)?;

    let zgl = match &p.lpm {
        Some(lpm) => {
            let n = p.ln2.apply(tape, zg, eps)?;
            let g = to_grid(tape, n, grid)?;
            let branch = lpm_branch_on(tape, g, lpm)?;
            let branch = to_tokens(tape, branch)?;
            tape.add(branch, zg)?
        }
        None => zg,
    };

    let n = p.ln3.apply(tape, zgl, eps)?;
    let h = p.mlp1.apply(tape, n)?;
    let h = tape.gelu(h);
    let h = p.mlp2.apply(tape, h)?;
    let d = tape.add(h, zgl)?;
    Ok((d, attn.attn))
}

/// Tape handles of a full decode.
#[derive(Clone, Debug)]
pub struct DecodeVars {
    pub m: [Var; 4],
    pub d: [Var; 4],
    pub attn: [Var; 4],
    pub mask: Var,
}

/// Decodes stages 4 → 1 and fuses the upsampled outputs into class logits.
pub fn decode_on(tape: &mut Tape, features: &[Var; 4], p: &DecoderParams<Var>) -> Result<DecodeVars> {
    let mut decoded: [Option<Var>; 4] = [None; 4];
    let mut m_out = [None; 4];
    let mut attn_out = [None; 4];
    let (h4, w4) = grid_of(tape.value(features[3]));
    for stage in (1..=4).rev() {
        let k = stage - 1;
        let run = |tape: &mut Tape| -> Result<(Var, Var, Var)> {
            let m = if p.cross_layer[k] {
                build_mixed_kv_on(tape, features, &decoded, stage)?
            } else {
                let pooled = tape.adaptive_avg_pool(features[k], h4, w4)?;
                to_tokens(tape, pooled)?
            };
            let grid = grid_of(tape.value(features[k]));
            let f = to_tokens(tape, features[k])?;
            let (d, attn) = clb_on(tape, f, m, grid, &p.stages[k], p.eps)?;
            Ok((m, to_grid(tape, d, grid)?, attn))
        };
        let (m, d, attn) = run(tape).map_err(|e| e.at_stage(stage))?;
        m_out[k] = Some(m);
        decoded[k] = Some(d);
        attn_out[k] = Some(attn);
    }
    let d = decoded.map(|v| v.expect("all stages decoded"));
    let (h1, w1) = grid_of(tape.value(d[0]));
    let mut ups = Vec::with_capacity(4);
    for &di in &d {
        ups.push(tape.bilinear_resize(di, h1, w1)?);
    }
    let cat = tape.concat(&ups, 1)?;
    let tokens = to_tokens(tape, cat)?;
    let logits = p.fuse.apply(tape, tokens)?;
    let mask = to_grid(tape, logits, (h1, w1))?;
    Ok(DecodeVars {
        m: m_out.map(|v| v.expect("all stages decoded")),
        d,
        attn: attn_out.map(|v| v.expect("all stages decoded")),
        mask,
    })
}

// ------------------------------------------------------------------ tensor-level API

fn check_pyramid(pyramid: &FeaturePyramid, p: &DecoderParams) -> Result<()> {
    for (k, f) in pyramid.features.iter().enumerate() {
        if f.ndim() != 4 || f.shape()[1] != p.stages[k].channels() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: f.shape().to_vec(),
                rhs: vec![p.stages[k].channels()],
            }
            .at_stage(k + 1));
        }
    }
    let expected: usize = p.channels().iter().sum();
    if p.fuse.in_features() != expected || p.fuse.out_features() != p.num_classes {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: p.fuse.weight.shape().to_vec(),
            rhs: vec![p.num_classes, expected],
        });
    }
    Ok(())
}

/// Pure-tensor wrapper of [`build_mixed_kv_on`]; `decoded[j-1]` must hold
/// Dⱼ for every `j > stage`.
pub fn build_mixed_kv(
    pyramid: &FeaturePyramid,
    decoded: &[Option<Tensor>; 4],
    stage: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let features = pyramid.features.clone().map(|f| tape.leaf(f));
    let dvars = decoded.clone().map(|d| d.map(|t| tape.leaf(t)));
    let m = build_mixed_kv_on(&mut tape, &features, &dvars, stage)?;
    Ok(tape.value(m).clone())
}

/// Local perception module on tokens `x: [B, h·w, C]`.
pub fn lpm(x: &Tensor, grid: (usize, usize), p: &LpmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    let y = lpm_on(&mut tape, xv, grid, &pv)?;
    Ok(tape.value(y).clone())
}

/// Cross-layer block on tokens; returns `(D, attention map)`.
pub fn clb(
    f: &Tensor,
    m: &Tensor,
    grid: (usize, usize),
    p: &ClbParams,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let mv = tape.leaf(m.clone());
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    let (d, a) = clb_on(&mut tape, fv, mv, grid, &pv, eps)?;
    Ok((tape.value(d).clone(), tape.value(a).clone()))
}

/// Every intermediate of a decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    /// Mixed key/value tokens `[B, N_kv, C_kv]` per stage.
    pub m: [Tensor; 4],
    /// Decoder outputs, shaped like the matching pyramid stage.
    pub d: [Tensor; 4],
    /// Attention maps `[B, heads, N_i, N_kv]`.
    pub attn: [Tensor; 4],
    /// Class logits `[B, num_classes, H/4, W/4]`.
    pub mask: Tensor,
}

pub fn decode(pyramid: &FeaturePyramid, p: &DecoderParams) -> Result<DecodeTrace> {
    check_pyramid(pyramid, p)?;
    let mut tape = Tape::new();
    let features = pyramid.features.clone().map(|f| tape.leaf(f));
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    let v = decode_on(&mut tape, &features, &pv)?;
    let get = |x: Var| tape.value(x).clone();
    Ok(DecodeTrace {
        m: v.m.map(get),
        d: v.d.map(get),
        attn: v.attn.map(get),
        mask: get(v.mask),
    })
}

/// Multiply-accumulates of one decode, counted on an instrumented tape.
pub fn count_decode_macs(pyramid: &FeaturePyramid, p: &DecoderParams) -> Result<u64> {
    check_pyramid(pyramid, p)?;
    let mut tape = Tape::instrumented();
    let features = pyramid.features.clone().map(|f| tape.leaf(f));
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    decode_on(&mut tape, &features, &pv)?;
    tape.total_macs()
}

/// `sum(mask)` and its gradient with respect to every parameter, keyed by
/// leaf name in [`DecoderParams::leaf_sizes`] order.
pub fn mask_sum_gradients(
    pyramid: &FeaturePyramid,
    p: &DecoderParams,
    tamper: bool,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    check_pyramid(pyramid, p)?;
    let mut tape = Tape::new();
    tape.set_tamper(tamper);
    let features = pyramid.features.clone().map(|f| tape.leaf(f));
    let mut names = Vec::new();
    let pv = p.map("", &mut |name, t| {
        let v = tape.leaf(t.clone());
        names.push((name.to_string(), v));
        v
    });
    let v = decode_on(&mut tape, &features, &pv)?;
    let loss = tape.sum(v.mask);
    let grads: Gradients = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let out = names
        .into_iter()
        .map(|(n, var)| {
            let g = grads.get_or_zeros(var, tape.value(var));
            (n, g)
        })
        .collect();
    Ok((value, out))
}

/// `sum(mask)` only.
pub fn mask_sum(pyramid: &FeaturePyramid, p: &DecoderParams) -> Result<f64> {
    Ok(decode(pyramid, p)?.mask.sum())
}

/// `sum(mask)` together with the evaluation's [`Tape::relu_pattern`].
pub fn mask_sum_with_pattern(pyramid: &FeaturePyramid, p: &DecoderParams) -> Result<(f64, Vec<bool>)> {
    check_pyramid(pyramid, p)?;
    let mut tape = Tape::new();
    let features = pyramid.features.clone().map(|f| tape.leaf(f));
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    let v = decode_on(&mut tape, &features, &pv)?;
    Ok((tape.value(v.mask).sum(), tape.relu_pattern()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::oracle::{oracle_attention, oracle_strip_attention};
    use crate::synth::{generate_pyramid, PyramidSpec};
    use crate::tensor::ops;

    fn small_spec() -> PyramidSpec {
        PyramidSpec {
            height: 32,
            width: 64,
            channels: [4, 8, 8, 12],
            batch: 1,
            seed: 3,
        }
    }

    fn cfg(mixer: MixerKind) -> DecoderConfig {
        let mut c = DecoderConfig {
            mixer,
            num_classes: 3,
            heads: [1, 2, 2, 4],
            dim_head: 3,
            init_std: 0.3,
            ..DecoderConfig::default()
        };
        c.resolve();
        c
    }

    fn tokens(x: &Tensor) -> Tensor {
        let [b, c, h, w] = *x.shape() else { panic!() };
        ops::permute(x, &[0, 2, 3, 1]).unwrap().reshape(vec![b, h * w, c]).unwrap()
    }

    fn grid(x: &Tensor, (h, w): (usize, usize)) -> Tensor {
        let [b, _, c] = *x.shape() else { panic!() };
        ops::permute(&x.reshape(vec![b, h, w, c]).unwrap(), &[0, 3, 1, 2]).unwrap()
    }

    /// The block assembled from pure-tensor kernels and the scalar-loop
    /// attention oracle.
    fn reference_clb(f: &Tensor, m: &Tensor, g: (usize, usize), p: &ClbParams, eps: f64) -> Tensor {
        let ln = |x: &Tensor, n: &NormParams| ops::layernorm(x, &n.gamma, &n.beta, eps).unwrap();
        let q = ln(f, &p.ln1);
        let kv = p.ln_kv.as_ref().map(|n| ln(m, n));
        let attn = match &p.mixer {
            MixerParams::Sa(a) => oracle_attention(&q, &q, a),
            MixerParams::Ca(a) => oracle_attention(&q, kv.as_ref().unwrap(), a),
            MixerParams::Sca(a) => oracle_strip_attention(&q, kv.as_ref().unwrap(), a),
        }
        .unwrap();
        let zg = ops::add(&attn, f).unwrap();
        let zgl = match &p.lpm {
            Some(l) => {
                let x = grid(&ln(&zg, &p.ln2), g);
                let dw = |x: &Tensor, d: &DwConvParams| ops::depthwise_conv(x, &d.kernel, Some(&d.bias)).unwrap();
                let xd = dw(&ops::relu(&dw(&x, &l.dw1)), &l.dw3);
                let s = ops::global_avg_pool(&xd).unwrap();
                let z = ops::relu(&l.fc1.forward(&s).unwrap());
                let omega = ops::sigmoid(&l.fc2.forward(&z).unwrap());
                let branch = dw(&ops::channel_scale(&xd, &omega).unwrap(), &l.dw_out);
                ops::add(&tokens(&branch), &zg).unwrap()
            }
            None => zg,
        };
        let h = ops::gelu(&p.mlp1.forward(&ln(&zgl, &p.ln3)).unwrap());
        ops::add(&p.mlp2.forward(&h).unwrap(), &zgl).unwrap()
    }

    #[test]
    fn clb_matches_composed_reference() {
        for mixer in MixerKind::ALL {
            for lpm_enabled in [true, false] {
                let mut rng = SplitMix64::new(11);
                let c = DecoderConfig { lpm_enabled, ..cfg(mixer) };
                let p = ClbParams::init(&mut rng, 8, 12, 2, &c).unwrap();
                let f = rng.normal_tensor(vec![1, 12, 8], 1.0);
                let m = rng.normal_tensor(vec![1, 6, 12], 1.0);
                let (d, attn) = clb(&f, &m, (3, 4), &p, c.eps).unwrap();
                let r = reference_clb(&f, &m, (3, 4), &p, c.eps);
                assert!(d.max_abs_diff(&r) < 1e-10, "{mixer} lpm={lpm_enabled}");
                let n_kv = if mixer == MixerKind::Sa { 12 } else { 6 };
                assert_eq!(attn.shape(), [1, 2, 12, n_kv]);
            }
        }
    }

    #[test]
    fn zero_branch_block_is_identity() {
        let mut rng = SplitMix64::new(2);
        for mixer in MixerKind::ALL {
            let c = DecoderConfig { identity_init: true, ..cfg(mixer) };
            let p = ClbParams::init(&mut rng, 8, 12, 2, &c).unwrap();
            let f = rng.normal_tensor(vec![1, 6, 8], 1.0);
            let m = rng.normal_tensor(vec![1, 2, 12], 1.0);
            assert_eq!(clb(&f, &m, (2, 3), &p, c.eps).unwrap().0, f);
        }
    }

    #[test]
    fn self_attention_ignores_mixed_kv() {
        let mut rng = SplitMix64::new(4);
        let c = cfg(MixerKind::Sa);
        let p = ClbParams::init(&mut rng, 8, 12, 2, &c).unwrap();
        assert!(p.ln_kv.is_none());
        let f = rng.normal_tensor(vec![1, 6, 8], 1.0);
        let m1 = rng.normal_tensor(vec![1, 2, 12], 1.0);
        let m2 = rng.normal_tensor(vec![1, 5, 12], 1.0);
        assert_eq!(clb(&f, &m1, (2, 3), &p, c.eps).unwrap(), clb(&f, &m2, (2, 3), &p, c.eps).unwrap());
    }

    #[test]
    fn lpm_with_zero_output_projection_is_identity() {
        let mut rng = SplitMix64::new(5);
        let mut p = LpmParams::init(&mut rng, 8, 4, 0.5).unwrap();
        let x = rng.normal_tensor(vec![1, 12, 8], 1.0);
        let y = lpm(&x, (3, 4), &p).unwrap();
        assert!(y.max_abs_diff(&x) > 1e-3);
        p.dw_out.zero();
        assert_eq!(lpm(&x, (3, 4), &p).unwrap(), x);
        assert!(lpm(&x, (4, 4), &p).is_err());
    }

    #[test]
    fn lpm_rejects_indivisible_reduction() {
        let mut rng = SplitMix64::new(0);
        assert!(LpmParams::init(&mut rng, 6, 4, 0.1).is_err());
    }

    #[test]
    fn mixed_kv_layout() {
        let spec = small_spec();
        let pyr = generate_pyramid(&spec).unwrap();
        let (h4, w4) = spec.grid(4);
        let d: [Option<Tensor>; 4] = std::array::from_fn(|k| Some(pyr.features[k].map(|v| 2.0 * v)));
        let m = build_mixed_kv(&pyr, &d, 2).unwrap();
        assert_eq!(m.shape(), [1, h4 * w4, spec.total_channels()]);
        // Channel block 0 is F1 pooled, block 2 is D3 pooled.
        let f1 = tokens(&ops::adaptive_avg_pool(pyr.stage(1), h4, w4).unwrap());
        let d3 = tokens(&ops::adaptive_avg_pool(&pyr.features[2].map(|v| 2.0 * v), h4, w4).unwrap());
        for t in 0..h4 * w4 {
            let row = &m.data()[t * 32..(t + 1) * 32];
            assert_eq!(&row[..4], &f1.data()[t * 4..(t + 1) * 4]);
            assert_eq!(&row[12..20], &d3.data()[t * 8..(t + 1) * 8]);
        }
        let missing = [None, None, None, d[3].clone()];
        assert!(matches!(build_mixed_kv(&pyr, &missing, 2), Err(Error::MissingDecoderOutput(3))));
        assert!(build_mixed_kv(&pyr, &[None, None, None, None], 4).is_ok());
    }

    #[test]
    fn default_mask_shape() {
        let mut c = DecoderConfig::default();
        c.resolve();
        let spec = PyramidSpec::default();
        let pyr = generate_pyramid(&spec).unwrap();
        let p = DecoderParams::init(&c, spec.channels, 0).unwrap();
        let t = decode(&pyr, &p).unwrap();
        assert_eq!(t.mask.shape(), [1, 19, 16, 16]);
        for i in 0..4 {
            assert_eq!(t.d[i].shape(), pyr.features[i].shape());
            assert_eq!(t.m[i].shape(), [1, 4, 120]);
        }
        assert_eq!(t.attn[3].shape(), [1, 8, 4, 4]);
        assert!(t.mask.is_finite());
    }

    #[test]
    fn identity_decoder_passes_features_through() {
        let spec = small_spec();
        let pyr = generate_pyramid(&spec).unwrap();
        for mixer in MixerKind::ALL {
            let c = DecoderConfig { identity_init: true, ..cfg(mixer) };
            let p = DecoderParams::init(&c, spec.channels, 9).unwrap();
            let t = decode(&pyr, &p).unwrap();
            assert_eq!(t.d, pyr.features);
            let (h1, w1) = spec.grid(1);
            let ups: Vec<Tensor> = pyr.features.iter().map(|f| ops::bilinear_resize(f, h1, w1).unwrap()).collect();
            let cat = ops::concat(&ups.iter().collect::<Vec<_>>(), 1).unwrap();
            let mask = grid(&p.fuse.forward(&tokens(&cat)).unwrap(), (h1, w1));
            assert_eq!(t.mask, mask);
        }
    }

    #[test]
    fn identity_fuse_gradient_is_feature_sum() {
        // With every block the identity, sum(mask) = Σ_pixels (W u + b) so
        // dL/dW[k, c] = Σ_pixels u_c and dL/db[k] = pixel count.
        let spec = small_spec();
        let pyr = generate_pyramid(&spec).unwrap();
        let c = DecoderConfig { identity_init: true, ..cfg(MixerKind::Sca) };
        let p = DecoderParams::init(&c, spec.channels, 1).unwrap();
        let (_, grads) = mask_sum_gradients(&pyr, &p, false).unwrap();
        let (h1, w1) = spec.grid(1);
        let ups: Vec<Tensor> = pyr.features.iter().map(|f| ops::bilinear_resize(f, h1, w1).unwrap()).collect();
        let cat = ops::concat(&ups.iter().collect::<Vec<_>>(), 1).unwrap();
        let plane = h1 * w1;
        let channel_sums: Vec<f64> = cat.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
        let gw = &grads.iter().find(|(n, _)| n == "fuse.weight").unwrap().1;
        let gb = &grads.iter().find(|(n, _)| n == "fuse.bias").unwrap().1;
        let total = spec.total_channels();
        for k in 0..c.num_classes {
            for (a, want) in gw.data()[k * total..(k + 1) * total].iter().zip(&channel_sums) {
                assert!((a - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
            assert_eq!(gb.data()[k], plane as f64);
        }
    }

    #[test]
    fn cross_layer_ablation_changes_mask() {
        let spec = PyramidSpec::default();
        let pyr = generate_pyramid(&spec).unwrap();
        let mut full = DecoderConfig::default();
        full.resolve();
        let only4 = DecoderConfig {
            cross_layer: [false, false, false, true],
            ..full.clone()
        };
        let a = decode(&pyr, &DecoderParams::init(&full, spec.channels, 0).unwrap()).unwrap();
        let b = decode(&pyr, &DecoderParams::init(&only4, spec.channels, 0).unwrap()).unwrap();
        assert!(a.mask.max_abs_diff(&b.mask) > 1e-6, "{}", a.mask.max_abs_diff(&b.mask));
        assert_eq!(b.m[0].shape(), [1, 4, 8]);
    }

    #[test]
    fn decode_is_deterministic() {
        let spec = small_spec();
        let pyr = generate_pyramid(&spec).unwrap();
        let p = DecoderParams::init(&cfg(MixerKind::Ca), spec.channels, 7).unwrap();
        let (a, b) = (decode(&pyr, &p).unwrap(), decode(&pyr, &p).unwrap());
        assert!(a.mask.data().iter().zip(b.mask.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_pyramid_names_the_stage() {
        let pyr = generate_pyramid(&small_spec()).unwrap();
        let p = DecoderParams::init(&cfg(MixerKind::Sca), [4, 8, 16, 12], 0).unwrap();
        let err = decode(&pyr, &p).unwrap_err();
        assert!(err.to_string().starts_with("stage 3:"), "{err}");
    }

    #[test]
    fn parameter_names_are_unique() {
        let p = DecoderParams::init(&cfg(MixerKind::Ca), [4, 8, 8, 12], 0).unwrap();
        let names = p.leaf_sizes();
        let mut sorted: Vec<_> = names.iter().map(|(n, _)| n.clone()).collect();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(sorted.contains(&"stage1.mixer.wq.weight".to_string()));
        assert!(sorted.contains(&"stage4.lpm.fc2.bias".to_string()));
        assert_eq!(p.num_parameters(), names.iter().map(|(_, n)| n).sum::<usize>());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = DecoderConfig { lpm_reduction: 3, ..DecoderConfig::default() };
        let err = bad.validate(&[8, 16, 32, 64]).unwrap_err();
        assert!(err.to_string().contains("decoder.lpm_reduction"));
        let bad = DecoderConfig { heads: [1, 0, 1, 1], ..DecoderConfig::default() };
        assert!(bad.validate(&[8, 16, 32, 64]).unwrap_err().to_string().contains("decoder.heads"));
    }
}
