//! End-to-end verification suites behind `scaseg selftest`.

use std::fmt;
use std::time::Instant;

use crate::analysis::{closed_form_flops, measure_flops, MixerShape};
use crate::attention::oracle::{oracle_attention, oracle_strip_attention};
use crate::attention::{MixerKind, SCAParams, VanillaAttnParams};
use crate::config::RunConfig;
use crate::decoder::{self, ClbParams, DecoderConfig, DecoderParams};
use crate::error::Result;
use crate::gradcheck::{decoder_gradcheck, kernel_suite};
use crate::synth::{generate_pyramid, PyramidSpec, SplitMix64};
use crate::tensor::{ops, Tensor};

pub const ORACLE_TOL: f64 = 1e-10;
pub const KERNEL_GRAD_TOL: f64 = 1e-4;
pub const DECODER_GRAD_TOL: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Random mixer shapes with `heads ∈ {1,2,4}` and token counts in `1..=16`.
pub fn random_mixer_shapes(seed: u64, count: usize) -> Vec<MixerShape> {
    let mut rng = SplitMix64::new(seed);
    let mut pick = |lo: u64, hi: u64| (lo + rng.next_u64() % (hi - lo + 1)) as usize;
    (0..count)
        .map(|i| MixerShape {
            n_q: pick(1, 16),
            n_kv: pick(1, 16),
            c_q: pick(1, 12),
            c_kv: pick(1, 12),
            heads: [1, 2, 4][i % 3],
            dim_head: pick(1, 4),
        })
        .collect()
}

/// Max-abs gap between every fast mixer and its scalar-loop oracle.
pub fn oracle_gap(shape: &MixerShape, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let s = shape;
    let xq = rng.normal_tensor(vec![1, s.n_q, s.c_q], 1.0);
    let xkv = rng.normal_tensor(vec![1, s.n_kv, s.c_kv], 1.0);
    let sa = VanillaAttnParams::init(&mut rng, s.c_q, s.c_q, s.heads, s.dim_head, 0.5);
    let ca = VanillaAttnParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, 0.5);
    let sca = SCAParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, 0.5);
    let gaps = [
        sa.forward_self(&xq)?.out.max_abs_diff(&oracle_attention(&xq, &xq, &sa)?),
        ca.forward_cross(&xq, &xkv)?.out.max_abs_diff(&oracle_attention(&xq, &xkv, &ca)?),
        sca.forward(&xq, &xkv)?.out.max_abs_diff(&oracle_strip_attention(&xq, &xkv, &sca)?),
    ];
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn oracle_suite() -> SuiteResult {
    timed("oracle equivalence", || {
        let shapes = random_mixer_shapes(0x0AC1E, 24);
        let mut worst: f64 = 0.0;
        for (i, s) in shapes.iter().enumerate() {
            worst = worst.max(oracle_gap(s, i as u64)?);
        }
        Ok((worst < ORACLE_TOL, format!("{} configs x 3 mixers, max abs {worst:.2e}", shapes.len())))
    })
}

fn kernel_grad_suite(tamper: bool) -> SuiteResult {
    timed("kernel gradients", || {
        let checks = kernel_suite(0x6AAD, 5, tamper)?;
        let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        let failing: Vec<_> = checks
            .iter()
            .filter(|c| c.max_rel_err >= KERNEL_GRAD_TOL)
            .map(|c| c.kernel)
            .collect();
        Ok((
            failing.is_empty(),
            format!("{} checks, max rel {worst:.2e}{}", checks.len(), list_failures(&failing)),
        ))
    })
}

fn list_failures(names: &[&str]) -> String {
    if names.is_empty() {
        String::new()
    } else {
        let mut n = names.to_vec();
        n.dedup();
        format!(", failing: {}", n.join(" "))
    }
}

fn decoder_grad_suite(tamper: bool) -> SuiteResult {
    timed("decoder gradients", || {
        let cfg = resolved(RunConfig::gradcheck_default());
        let pyramid = generate_pyramid(&cfg.pyramid)?;
        let params = DecoderParams::init(&cfg.decoder, cfg.pyramid.channels, cfg.seed)?;
        let report = decoder_gradcheck(&pyramid, &params, cfg.gradcheck.step, cfg.gradcheck.floor, tamper)?;
        let (groups, worst) = (&report.groups, report.max_rel_err());
        let failing: Vec<_> = groups
            .iter()
            .filter(|g| g.max_rel_err >= DECODER_GRAD_TOL)
            .map(|g| g.group.as_str())
            .collect();
        Ok((
            failing.is_empty(),
            format!("{} groups, max rel {worst:.2e}{}", groups.len(), list_failures(&failing)),
        ))
    })
}

fn resolved(mut cfg: RunConfig) -> RunConfig {
    cfg.resolve();
    cfg
}

/// Rows of every attention map sum to one.
pub fn row_stochastic_gap(attn: &Tensor) -> f64 {
    let n = *attn.shape().last().expect("attention map has a key axis");
    attn.data()
        .chunks(n)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Reverses the token order of `[B, N, C]`.
pub fn reverse_tokens(x: &Tensor) -> Tensor {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let (bi, rest) = (i / (n * c), i % (n * c));
        let (t, ch) = (rest / c, rest % c);
        x.data()[(bi * n + (n - 1 - t)) * c + ch]
    })
    .reshape(vec![b, n, c])
    .expect("same shape")
}

fn identity_suite() -> SuiteResult {
    timed("structural identities", || {
        let mut notes = Vec::new();
        let mut ok = true;

        // Zero-branch block is the identity, bit for bit, for every mixer.
        let mut rng = SplitMix64::new(0x1D);
        let f = rng.normal_tensor(vec![1, 12, 8], 1.0);
        let m = rng.normal_tensor(vec![1, 5, 16], 1.0);
        for mixer in MixerKind::ALL {
            let cfg = DecoderConfig {
                mixer,
                identity_init: true,
                init_std: 0.3,
                ..DecoderConfig::default()
            };
            let p = ClbParams::init(&mut rng, 8, 16, 2, &cfg)?;
            let (d, _) = decoder::clb(&f, &m, (3, 4), &p, cfg.eps)?;
            if d != f {
                ok = false;
                notes.push(format!("{mixer} zero-init block is not the identity"));
            }
        }

        let mut worst_rows: f64 = 0.0;
        let mut worst_perm: f64 = 0.0;
        let mut worst_shift: f64 = 0.0;
        for (i, s) in random_mixer_shapes(0x5111F7, 12).iter().enumerate() {
            let mut rng = SplitMix64::new(i as u64);
            let xq = rng.normal_tensor(vec![1, s.n_q, s.c_q], 1.0);
            let xkv = rng.normal_tensor(vec![1, s.n_kv, s.c_kv], 1.0);
            let ca = VanillaAttnParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, 0.5);
            let mut sca = SCAParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, 0.5);

            let a = ca.forward_cross(&xq, &xkv)?;
            let b = sca.forward(&xq, &xkv)?;
            worst_rows = worst_rows.max(row_stochastic_gap(&a.attn)).max(row_stochastic_gap(&b.attn));

            let rev = reverse_tokens(&xkv);
            worst_perm = worst_perm
                .max(ca.forward_cross(&xq, &rev)?.out.max_abs_diff(&a.out))
                .max(sca.forward(&xq, &rev)?.out.max_abs_diff(&b.out));

            // A common offset on every strip key adds a per-row constant to
            // the logits, which softmax ignores.
            if let Some(bias) = &mut sca.wk.bias {
                *bias = bias.map(|v| v + 0.75);
            }
            worst_shift = worst_shift.max(sca.forward(&xq, &xkv)?.attn.max_abs_diff(&b.attn));

            let logits = rng.normal_tensor(vec![s.n_q, s.n_kv], 2.0);
            let shifted = logits.map(|v| v + 3.5);
            worst_shift = worst_shift
                .max(ops::softmax_lastdim(&shifted).max_abs_diff(&ops::softmax_lastdim(&logits)));
        }
        for (what, v) in [("row sums", worst_rows), ("key permutation", worst_perm), ("shift", worst_shift)] {
            if v.is_nan() || v >= IDENTITY_TOL {
                ok = false;
                notes.push(format!("{what} gap {v:.2e}"));
            }
        }
        let detail = if ok {
            format!("identity exact, rows {worst_rows:.1e}, perm {worst_perm:.1e}, shift {worst_shift:.1e}")
        } else {
            notes.join("; ")
        };
        Ok((ok, detail))
    })
}

fn flop_suite() -> SuiteResult {
    timed("flop formulas", || {
        let mut mismatches = 0;
        let mut points = 0;
        for n in [1usize, 4, 16, 64, 256] {
            for c in [1usize, 8, 32, 128] {
                let shape = MixerShape::square(n, 1, c);
                for kind in [MixerKind::Sa, MixerKind::Sca] {
                    let r = measure_flops(kind, &shape, 0)?;
                    if r.counted_attn_flops != closed_form_flops(kind, n as u64, c as u64) {
                        mismatches += 1;
                    }
                }
                let (sa, sca) = (
                    closed_form_flops(MixerKind::Sa, n as u64, c as u64),
                    closed_form_flops(MixerKind::Sca, n as u64, c as u64),
                );
                if c > 1 && sca >= sa {
                    mismatches += 1;
                }
                points += 1;
            }
        }
        Ok((mismatches == 0, format!("{points} grid points, {mismatches} mismatches")))
    })
}

fn determinism_suite() -> SuiteResult {
    timed("shape and determinism", || {
        let cfg = resolved(RunConfig::default());
        let spec = PyramidSpec { ..cfg.pyramid.clone() };
        let run = || -> Result<decoder::DecodeTrace> {
            let pyramid = generate_pyramid(&spec)?;
            let params = DecoderParams::init(&cfg.decoder, spec.channels, cfg.seed)?;
            decoder::decode(&pyramid, &params)
        };
        let (a, b) = (run()?, run()?);
        let expected = [1, cfg.decoder.num_classes, spec.height / 4, spec.width / 4];
        let shape_ok = a.mask.shape() == expected;
        let same = a.mask.data().iter().zip(b.mask.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a == b;
        Ok((shape_ok && same, format!("mask {:?}, bitwise repeatable: {same}", a.mask.shape())))
    })
}

/// Runs every suite in order. `tamper` corrupts the backward pass so the
/// gradient suites must fail.
pub fn run_all(tamper: bool) -> Vec<SuiteResult> {
    vec![
        oracle_suite(),
        kernel_grad_suite(tamper),
        decoder_grad_suite(tamper),
        identity_suite(),
        flop_suite(),
        determinism_suite(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_tokens_is_an_involution() {
        let x = Tensor::from_fn(vec![2, 3, 2], |i| i as f64);
        let r = reverse_tokens(&x);
        assert_eq!(r.data()[..6], [4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        assert_eq!(reverse_tokens(&r), x);
    }

    #[test]
    fn shapes_cover_every_head_count() {
        let s = random_mixer_shapes(1, 20);
        for h in [1, 2, 4] {
            assert!(s.iter().any(|m| m.heads == h));
        }
        assert!(s.iter().all(|m| (1..=16).contains(&m.n_q) && (1..=16).contains(&m.n_kv)));
    }

    #[test]
    fn cheap_suites_pass() {
        for r in [oracle_suite(), identity_suite(), determinism_suite()] {
            assert!(r.passed, "{r}");
        }
    }
}
