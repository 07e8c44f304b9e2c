//! Central finite-difference verification of the tape's analytic gradients.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)`. The floor keeps
//! entries whose true gradient is zero (or below the round-off of the
//! difference quotient) from dividing noise by noise; it sits near
//! `ε·|loss|/step` for the loss being differenced.
//!
//! An entry whose `±step` probes flip the sign of any ReLU input straddles a
//! kink, where the difference quotient does not estimate the derivative;
//! such entries are counted as skipped instead of compared.

use std::collections::BTreeMap;

use crate::attention::{
    cross_attention, self_attention, strip_cross_attention, SCAParams, VanillaAttnParams,
};
use crate::decoder::{self, clb_on, lpm_on, ClbParams, DecoderConfig, DecoderParams, LpmParams};
use crate::error::Result;
use crate::synth::{FeaturePyramid, SplitMix64};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor for kernel checks, whose weighted losses are O(1) to O(10).
pub const KERNEL_FLOOR: f64 = 1e-5;
/// Minimum floor for the decoder check.
pub const DECODER_FLOOR: f64 = 1e-4;
/// The decoder floor also tracks the loss: difference-quotient round-off is
/// a few `ε·|loss|/step`, and this factor keeps it ten times under a 1e-3
/// tolerance.
pub const ROUNDOFF_FACTOR: f64 = 1e4;

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient check of one kernel on one set of input shapes.
#[derive(Clone, Debug)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Analytic gradients of the weighted-sum loss `Σ y ⊙ r` with respect to
/// every input; the random weights keep no output direction trivially flat.
fn analytic_grads(build: &Build<'_>, inputs: &[Tensor], weights: &Tensor, tamper: bool) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    tape.set_tamper(tamper);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let r = tape.leaf(weights.clone());
    let prod = tape.mul(y, r)?;
    let loss = tape.sum(prod);
    let g = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| g.get_or_zeros(v, tape.value(v))).collect())
}

fn output_shape(build: &Build<'_>, inputs: &[Tensor]) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    Ok(tape.value(y).shape().to_vec())
}

/// Compares analytic and central-difference gradients of `Σ build(inputs) ⊙ r`
/// for every element of every input.
pub fn check_kernel(
    kernel: &'static str,
    inputs: Vec<Tensor>,
    build: &Build<'_>,
    rng: &mut SplitMix64,
    step: f64,
    tamper: bool,
) -> Result<KernelCheck> {
    let shape = output_shape(build, &inputs)?;
    let weights = rng.uniform_tensor(shape, -1.0, 1.0);
    let analytic = analytic_grads(build, &inputs, &weights, tamper)?;
    let (_, base) = eval_only(build, &inputs, &weights)?;
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..probe[i].numel() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + step;
            let (fp, pp) = eval_only(build, &probe, &weights)?;
            probe[i].data_mut()[e] = orig - step;
            let (fm, pm) = eval_only(build, &probe, &weights)?;
            probe[i].data_mut()[e] = orig;
            if pp != base || pm != base {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(grad.data()[e], numeric, KERNEL_FLOOR));
            checked += 1;
        }
    }
    Ok(KernelCheck {
        kernel,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        max_rel_err: worst,
        checked,
        skipped,
    })
}

/// Loss value and ReLU pattern of one evaluation.
fn eval_only(build: &Build<'_>, inputs: &[Tensor], weights: &Tensor) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let loss = tape.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    Ok((loss, tape.relu_pattern()))
}

fn pick(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

fn input(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    rng.uniform_tensor(shape, -2.0, 2.0)
}

/// Runs the gradient check over every differentiable kernel and every
/// composite block, `shapes_per_kernel` random shapes each.
pub fn kernel_suite(seed: u64, shapes_per_kernel: usize, tamper: bool) -> Result<Vec<KernelCheck>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    let step = DEFAULT_STEP;

    for _ in 0..shapes_per_kernel {
        let (b, m, k, n) = (pick(&mut rng, 1, 2), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4));
        let ins = vec![input(&mut rng, vec![b, 1, m, k]), input(&mut rng, vec![1, 2, k, n])];
        out.push(check_kernel("matmul", ins, &|t, v| t.matmul(v[0], v[1]), &mut rng, step, tamper)?);

        let (rows, i, o) = (pick(&mut rng, 1, 4), pick(&mut rng, 1, 5), pick(&mut rng, 1, 4));
        let ins = vec![
            input(&mut rng, vec![2, rows, i]),
            input(&mut rng, vec![o, i]),
            input(&mut rng, vec![o]),
        ];
        out.push(check_kernel("linear", ins, &|t, v| t.linear(v[0], v[1], Some(v[2])), &mut rng, step, tamper)?);

        let s = vec![pick(&mut rng, 1, 3), pick(&mut rng, 1, 6)];
        let ins = vec![input(&mut rng, s)];
        out.push(check_kernel("softmax_lastdim", ins, &|t, v| Ok(t.softmax_lastdim(v[0])), &mut rng, step, tamper)?);
        let s = vec![pick(&mut rng, 1, 3), pick(&mut rng, 1, 6)];
        let ins = vec![input(&mut rng, s)];
        out.push(check_kernel("scaled_softmax_lastdim", ins, &|t, v| Ok(t.scaled_softmax_lastdim(v[0], 0.37)), &mut rng, step, tamper)?);

        let (rows, c) = (pick(&mut rng, 1, 3), pick(&mut rng, 2, 6));
        let ins = vec![
            input(&mut rng, vec![rows, c]),
            input(&mut rng, vec![c]),
            input(&mut rng, vec![c]),
        ];
        out.push(check_kernel("layernorm", ins, &|t, v| t.layernorm(v[0], v[1], v[2], 1e-6), &mut rng, step, tamper)?);

        let (c, h, w) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4));
        let ks = if rng.next_u64().is_multiple_of(2) { 1 } else { 3 };
        let ins = vec![
            input(&mut rng, vec![1, c, h, w]),
            input(&mut rng, vec![c, ks, ks]),
            input(&mut rng, vec![c]),
        ];
        out.push(check_kernel("depthwise_conv", ins, &|t, v| t.depthwise_conv(v[0], v[1], Some(v[2])), &mut rng, step, tamper)?);

        let s = vec![2, pick(&mut rng, 1, 3), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4)];
        let ins = vec![input(&mut rng, s)];
        out.push(check_kernel("global_avg_pool", ins, &|t, v| t.global_avg_pool(v[0]), &mut rng, step, tamper)?);

        let (oh, ow) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 3));
        let (fh, fw) = (pick(&mut rng, 1, 2), pick(&mut rng, 1, 2));
        let ins = vec![input(&mut rng, vec![1, 2, oh * fh, ow * fw])];
        out.push(check_kernel("adaptive_avg_pool", ins, &|t, v| t.adaptive_avg_pool(v[0], oh, ow), &mut rng, step, tamper)?);

        let (ih, iw) = (pick(&mut rng, 1, 4), pick(&mut rng, 1, 4));
        let (th, tw) = (pick(&mut rng, 1, 7), pick(&mut rng, 1, 7));
        let ins = vec![input(&mut rng, vec![1, 2, ih, iw])];
        out.push(check_kernel("bilinear_resize", ins, &|t, v| t.bilinear_resize(v[0], th, tw), &mut rng, step, tamper)?);

        let s = vec![pick(&mut rng, 1, 3), pick(&mut rng, 1, 3), pick(&mut rng, 1, 3)];
        let ins = vec![input(&mut rng, s)];
        out.push(check_kernel("permute", ins, &|t, v| t.permute(v[0], &[2, 0, 1]), &mut rng, step, tamper)?);

        let (a, b2) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 3));
        let ins = vec![input(&mut rng, vec![2, a, 3]), input(&mut rng, vec![2, b2, 3])];
        out.push(check_kernel("concat", ins, &|t, v| t.concat(&[v[0], v[1]], 1), &mut rng, step, tamper)?);

        let s = vec![pick(&mut rng, 1, 3), pick(&mut rng, 1, 5)];
        let ins = vec![input(&mut rng, s.clone()), input(&mut rng, s)];
        out.push(check_kernel("mul", ins, &|t, v| t.mul(v[0], v[1]), &mut rng, step, tamper)?);

        let (c, h, w) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 3), pick(&mut rng, 1, 3));
        let ins = vec![input(&mut rng, vec![2, c, h, w]), input(&mut rng, vec![2, c])];
        out.push(check_kernel("channel_scale", ins, &|t, v| t.channel_scale(v[0], v[1]), &mut rng, step, tamper)?);

        let s = vec![pick(&mut rng, 1, 4), pick(&mut rng, 1, 4)];
        out.push(check_kernel("relu", vec![input(&mut rng, s.clone())], &|t, v| Ok(t.relu(v[0])), &mut rng, step, tamper)?);
        out.push(check_kernel("gelu", vec![input(&mut rng, s.clone())], &|t, v| Ok(t.gelu(v[0])), &mut rng, step, tamper)?);
        out.push(check_kernel("sigmoid", vec![input(&mut rng, s)], &|t, v| Ok(t.sigmoid(v[0])), &mut rng, step, tamper)?);

        out.extend(mixer_checks(&mut rng, tamper)?);
        out.push(lpm_check(&mut rng, tamper)?);
        out.push(clb_check(&mut rng, tamper)?);
    }
    Ok(out)
}

fn mixer_checks(rng: &mut SplitMix64, tamper: bool) -> Result<Vec<KernelCheck>> {
    let heads = [1, 2, 4][pick(rng, 0, 2)];
    let dim_head = pick(rng, 1, 3);
    let (nq, nkv, cq, ckv) = (pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 2, 5), pick(rng, 2, 5));
    let step = DEFAULT_STEP;
    let mut out = Vec::new();

    let sa = VanillaAttnParams::init(rng, cq, cq, heads, dim_head, 0.7);
    let mut ins = vec![input(rng, vec![1, nq, cq])];
    sa.map("", &mut |_, t| ins.push(t.clone()));
    out.push(check_kernel(
        "self_attention",
        ins,
        &move |t, v| {
            let mut it = v[1..].iter().copied();
            let p = sa.map("", &mut |_, _| it.next().unwrap());
            Ok(self_attention(t, v[0], &p)?.out)
        },
        rng,
        step,
        tamper,
    )?);

    let ca = VanillaAttnParams::init(rng, cq, ckv, heads, dim_head, 0.7);
    let mut ins = vec![input(rng, vec![1, nq, cq]), input(rng, vec![1, nkv, ckv])];
    ca.map("", &mut |_, t| ins.push(t.clone()));
    out.push(check_kernel(
        "cross_attention",
        ins,
        &move |t, v| {
            let mut it = v[2..].iter().copied();
            let p = ca.map("", &mut |_, _| it.next().unwrap());
            Ok(cross_attention(t, v[0], v[1], &p)?.out)
        },
        rng,
        step,
        tamper,
    )?);

    let sca = SCAParams::init(rng, cq, ckv, heads, dim_head, 0.7);
    let mut ins = vec![input(rng, vec![1, nq, cq]), input(rng, vec![1, nkv, ckv])];
    sca.map("", &mut |_, t| ins.push(t.clone()));
    out.push(check_kernel(
        "strip_cross_attention",
        ins,
        &move |t, v| {
            let mut it = v[2..].iter().copied();
            let p = sca.map("", &mut |_, _| it.next().unwrap());
            Ok(strip_cross_attention(t, v[0], v[1], &p)?.out)
        },
        rng,
        step,
        tamper,
    )?);
    Ok(out)
}

fn lpm_check(rng: &mut SplitMix64, tamper: bool) -> Result<KernelCheck> {
    let (h, w) = (pick(rng, 1, 3), pick(rng, 1, 3));
    let c = 4;
    let p = LpmParams::init(rng, c, 2, 0.7)?;
    let mut ins = vec![input(rng, vec![1, h * w, c])];
    p.map("", &mut |_, t| ins.push(t.clone()));
    check_kernel(
        "lpm",
        ins,
        &move |t, v| {
            let mut it = v[1..].iter().copied();
            let pv = p.map("", &mut |_, _| it.next().unwrap());
            lpm_on(t, v[0], (h, w), &pv)
        },
        rng,
        DEFAULT_STEP,
        tamper,
    )
}

fn clb_check(rng: &mut SplitMix64, tamper: bool) -> Result<KernelCheck> {
    let (h, w) = (pick(rng, 1, 3), 2);
    let (c, c_kv, nkv) = (4, 6, pick(rng, 1, 3));
    let cfg = DecoderConfig {
        heads: [2; 4],
        dim_head: 2,
        mlp_expansion: 2,
        lpm_reduction: 2,
        init_std: 0.7,
        ..DecoderConfig::default()
    };
    let p = ClbParams::init(rng, c, c_kv, 2, &cfg)?;
    let mut ins = vec![input(rng, vec![1, h * w, c]), input(rng, vec![1, nkv, c_kv])];
    p.map("", &mut |_, t| ins.push(t.clone()));
    check_kernel(
        "clb",
        ins,
        &move |t, v| {
            let mut it = v[2..].iter().copied();
            let pv = p.map("", &mut |_, _| it.next().unwrap());
            Ok(clb_on(t, v[0], v[1], (h, w), &pv, 1e-6)?.0)
        },
        rng,
        DEFAULT_STEP,
        tamper,
    )
}

/// Worst relative error over one parameter group (a leaf name without its
/// trailing `weight`/`bias`/... component).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Entries whose probes straddle a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

fn group_of(leaf: &str) -> String {
    match leaf.rsplit_once('.') {
        Some((g, _)) => g.to_string(),
        None => leaf.to_string(),
    }
}

/// Outcome of [`decoder_gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGradcheck {
    pub loss: f64,
    /// Denominator floor actually used.
    pub floor: f64,
    pub groups: Vec<GroupReport>,
}

impl DecoderGradcheck {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// End-to-end check of `sum(mask)` against central differences for every
/// element of every decoder parameter.
pub fn decoder_gradcheck(
    pyramid: &FeaturePyramid,
    params: &DecoderParams,
    step: f64,
    floor: f64,
    tamper: bool,
) -> Result<DecoderGradcheck> {
    let (_, analytic) = decoder::mask_sum_gradients(pyramid, params, tamper)?;
    let (loss, base) = decoder::mask_sum_with_pattern(pyramid, params)?;
    let floor = floor.max(ROUNDOFF_FACTOR * f64::EPSILON * loss.abs() / step);
    let mut probe = params.clone();
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    for (leaf_idx, (name, grad)) in analytic.iter().enumerate() {
        let group = group_of(name);
        for e in 0..grad.numel() {
            let orig = leaf_value(&mut probe, leaf_idx, e, None);
            leaf_value(&mut probe, leaf_idx, e, Some(orig + step));
            let (fp, pp) = decoder::mask_sum_with_pattern(pyramid, &probe)?;
            leaf_value(&mut probe, leaf_idx, e, Some(orig - step));
            let (fm, pm) = decoder::mask_sum_with_pattern(pyramid, &probe)?;
            leaf_value(&mut probe, leaf_idx, e, Some(orig));
            let entry = groups.entry(group.clone()).or_insert_with(|| GroupReport {
                group: group.clone(),
                checked: 0,
                skipped: 0,
                max_rel_err: 0.0,
            });
            if pp != base || pm != base {
                entry.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            entry.checked += 1;
            entry.max_rel_err = entry.max_rel_err.max(rel_err(grad.data()[e], numeric, floor));
        }
    }
    Ok(DecoderGradcheck {
        loss,
        floor,
        groups: groups.into_values().collect(),
    })
}

/// Reads element `e` of leaf `leaf_idx`, optionally overwriting it first.
fn leaf_value(p: &mut DecoderParams, leaf_idx: usize, e: usize, set: Option<f64>) -> f64 {
    let mut i = 0;
    let mut out = f64::NAN;
    p.visit_mut("", &mut |_, t| {
        if i == leaf_idx {
            if let Some(v) = set {
                t.data_mut()[e] = v;
            }
            out = t.data()[e];
        }
        i += 1;
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0, KERNEL_FLOOR), 0.0);
        assert!((rel_err(1.0, 1.1, KERNEL_FLOOR) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9, KERNEL_FLOOR) - 1e-4).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9, DECODER_FLOOR) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn kernel_checks_catch_tampering() {
        let mut rng = SplitMix64::new(3);
        let ins = vec![
            input(&mut rng, vec![2, 3]),
            input(&mut rng, vec![2, 3]),
            input(&mut rng, vec![2]),
        ];
        let build: &Build<'_> = &|t, v| t.linear(v[0], v[1], Some(v[2]));
        let ok = check_kernel("linear", ins.clone(), build, &mut SplitMix64::new(1), DEFAULT_STEP, false).unwrap();
        let bad = check_kernel("linear", ins, build, &mut SplitMix64::new(1), DEFAULT_STEP, true).unwrap();
        assert!(ok.max_rel_err < 1e-6, "{ok:?}");
        assert!(bad.max_rel_err > 1e-2, "{bad:?}");
    }
}
