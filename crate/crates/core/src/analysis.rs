//! FLOP accounting and wall-clock measurement of the token mixers.
//!
//! "FLOPs" here are multiply-accumulates, the convention under which the
//! closed forms `2N²C` (vanilla) and `N² + N²C` (strip) hold.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, self_attention, strip_cross_attention, AttnVars, MixerKind, SCAParams,
    VanillaAttnParams,
};
use crate::error::{Error, Result};
use crate::synth::SplitMix64;
use crate::tensor::{Region, Tape, Tensor};

/// Token counts, widths and head layout of one mixer evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerShape {
    pub n_q: usize,
    pub n_kv: usize,
    pub c_q: usize,
    pub c_kv: usize,
    pub heads: usize,
    pub dim_head: usize,
}

impl MixerShape {
    /// Square shape with `C = heads · dim_head` on both sides.
    pub fn square(n: usize, heads: usize, dim_head: usize) -> Self {
        let c = heads * dim_head;
        MixerShape {
            n_q: n,
            n_kv: n,
            c_q: c,
            c_kv: c,
            heads,
            dim_head,
        }
    }

    /// Self-attention ignores the key/value side; this is the shape it
    /// actually runs on.
    pub fn effective(self, kind: MixerKind) -> Self {
        match kind {
            MixerKind::Sa => MixerShape {
                n_kv: self.n_q,
                c_kv: self.c_q,
                ..self
            },
            _ => self,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_q", self.n_q),
            ("n_kv", self.n_kv),
            ("c_q", self.c_q),
            ("c_kv", self.c_kv),
            ("heads", self.heads),
            ("dim_head", self.dim_head),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Attention-core cost from the closed forms: `2N²C` for SA/CA and
/// `N² + N²C` for SCA.
pub fn closed_form_flops(kind: MixerKind, n: u64, c: u64) -> u64 {
    match kind {
        MixerKind::Sa | MixerKind::Ca => 2 * n * n * c,
        MixerKind::Sca => n * n + n * n * c,
    }
}

/// Closed form generalized to rectangular token counts and several heads,
/// with `C = heads · dim_head`. Strip scores cost one MAC per head per
/// query/key pair; with one head this is exactly [`closed_form_flops`].
pub fn closed_form_attn_flops(kind: MixerKind, s: &MixerShape) -> u64 {
    let s = s.effective(kind);
    let (nq, nkv) = (s.n_q as u64, s.n_kv as u64);
    let inner = (s.heads * s.dim_head) as u64;
    match kind {
        MixerKind::Sa | MixerKind::Ca => 2 * nq * nkv * inner,
        MixerKind::Sca => s.heads as u64 * nq * nkv + nq * nkv * inner,
    }
}

/// Counted cost of one mixer forward.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub mixer: MixerKind,
    pub shape: MixerShape,
    pub closed_form_attn_flops: u64,
    /// Score product plus attention-weighted sum.
    pub counted_attn_flops: u64,
    /// Every MAC of the forward including projections.
    pub counted_total_flops: u64,
    /// Largest tensor materialized while forming queries and keys.
    pub peak_activation_elems: usize,
}

/// Reads a report off a tape that recorded exactly one mixer forward.
pub fn count_flops(tape: &Tape, kind: MixerKind, shape: &MixerShape) -> Result<FlopReport> {
    Ok(FlopReport {
        mixer: kind,
        shape: shape.effective(kind),
        closed_form_attn_flops: closed_form_attn_flops(kind, shape),
        counted_attn_flops: tape.macs_in(Region::Score)? + tape.macs_in(Region::WeightedSum)?,
        counted_total_flops: tape.total_macs()?,
        peak_activation_elems: tape.peak_elems_in(Region::QueryKey)?,
    })
}

/// Random inputs and parameters for one mixer at `shape`.
pub struct MixerCase {
    pub kind: MixerKind,
    pub shape: MixerShape,
    xq: Tensor,
    xkv: Tensor,
    vanilla: Option<VanillaAttnParams>,
    strip: Option<SCAParams>,
}

impl MixerCase {
    pub fn new(kind: MixerKind, shape: &MixerShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let s = shape.effective(kind);
        let mut rng = SplitMix64::new(seed);
        let xq = rng.normal_tensor(vec![1, s.n_q, s.c_q], 1.0);
        let xkv = rng.normal_tensor(vec![1, s.n_kv, s.c_kv], 1.0);
        let std = 1.0 / (s.c_q.max(s.c_kv) as f64).sqrt();
        let (vanilla, strip) = match kind {
            MixerKind::Sa | MixerKind::Ca => (
                Some(VanillaAttnParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, std)),
                None,
            ),
            MixerKind::Sca => (
                None,
                Some(SCAParams::init(&mut rng, s.c_q, s.c_kv, s.heads, s.dim_head, std)),
            ),
        };
        Ok(MixerCase {
            kind,
            shape: s,
            xq,
            xkv,
            vanilla,
            strip,
        })
    }

    /// Records one forward on `tape`.
    pub fn run(&self, tape: &mut Tape) -> Result<AttnVars> {
        let xq = tape.leaf(self.xq.clone());
        match (self.kind, &self.vanilla, &self.strip) {
            (MixerKind::Sa, Some(p), _) => {
                let p = p.map("", &mut |_, w| tape.leaf(w.clone()));
                self_attention(tape, xq, &p)
            }
            (MixerKind::Ca, Some(p), _) => {
                let xkv = tape.leaf(self.xkv.clone());
                let p = p.map("", &mut |_, w| tape.leaf(w.clone()));
                cross_attention(tape, xq, xkv, &p)
            }
            (MixerKind::Sca, _, Some(p)) => {
                let xkv = tape.leaf(self.xkv.clone());
                let p = p.map("", &mut |_, w| tape.leaf(w.clone()));
                strip_cross_attention(tape, xq, xkv, &p)
            }
            _ => unreachable!("MixerCase::new pairs each kind with its parameters"),
        }
    }
}

/// Instrumented forward of a fresh random mixer.
pub fn measure_flops(kind: MixerKind, shape: &MixerShape, seed: u64) -> Result<FlopReport> {
    let case = MixerCase::new(kind, shape, seed)?;
    let mut tape = Tape::instrumented();
    case.run(&mut tape)?;
    count_flops(&tape, kind, shape)
}

/// Wall-clock of repeated single-threaded forwards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub report: FlopReport,
    pub warmup: usize,
    pub repetitions: usize,
    pub wall_ns_median: u64,
    pub flops_per_sec: f64,
}

/// Median wall-clock over `repetitions` timed forwards after `warmup`
/// untimed ones.
pub fn bench(kind: MixerKind, shape: &MixerShape, warmup: usize, repetitions: usize, seed: u64) -> Result<BenchResult> {
    Ok(bench_interleaved(&[kind], shape, warmup, repetitions, seed)?.remove(0))
}

/// Like [`bench`] for several mixers at once. Each round times every mixer
/// once, so drift in machine load lands on all of them alike.
pub fn bench_interleaved(
    kinds: &[MixerKind],
    shape: &MixerShape,
    warmup: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if repetitions == 0 {
        return Err(Error::config("analysis.repetitions", "must be positive"));
    }
    let cases = kinds
        .iter()
        .map(|&k| MixerCase::new(k, shape, seed))
        .collect::<Result<Vec<_>>>()?;
    let time = |case: &MixerCase| -> Result<u64> {
        let mut tape = Tape::new();
        let t0 = Instant::now();
        let out = case.run(&mut tape)?;
        std::hint::black_box(tape.value(out.out));
        Ok(t0.elapsed().as_nanos() as u64)
    };
    for _ in 0..warmup {
        for case in &cases {
            time(case)?;
        }
    }
    let mut times = vec![Vec::with_capacity(repetitions); cases.len()];
    for _ in 0..repetitions {
        for (case, t) in cases.iter().zip(&mut times) {
            t.push(time(case)?);
        }
    }
    kinds
        .iter()
        .zip(times)
        .map(|(&kind, mut t)| {
            t.sort_unstable();
            let wall_ns_median = t[t.len() / 2];
            let report = measure_flops(kind, shape, seed)?;
            let flops_per_sec = report.counted_total_flops as f64 / (wall_ns_median.max(1) as f64 * 1e-9);
            Ok(BenchResult {
                report,
                warmup,
                repetitions,
                wall_ns_median,
                flops_per_sec,
            })
        })
        .collect()
}

/// One line of the sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub mixer: &'static str,
    #[serde(rename = "N_q")]
    pub n_q: usize,
    #[serde(rename = "N_kv")]
    pub n_kv: usize,
    #[serde(rename = "C_q")]
    pub c_q: usize,
    #[serde(rename = "C_kv")]
    pub c_kv: usize,
    pub heads: usize,
    pub dim_head: usize,
    pub closed_form_flops: u64,
    pub counted_attn_flops: u64,
    pub total_flops: u64,
    pub peak_activation_elems: usize,
    /// Empty unless the sweep was timed.
    pub wall_ns_median: Option<u64>,
}

pub const CSV_HEADER: &str = "mixer,N_q,N_kv,C_q,C_kv,heads,dim_head,closed_form_flops,counted_attn_flops,total_flops,peak_activation_elems,wall_ns_median";

impl SweepRow {
    fn new(r: &FlopReport, wall_ns_median: Option<u64>) -> Self {
        SweepRow {
            mixer: r.mixer.name(),
            n_q: r.shape.n_q,
            n_kv: r.shape.n_kv,
            c_q: r.shape.c_q,
            c_kv: r.shape.c_kv,
            heads: r.shape.heads,
            dim_head: r.shape.dim_head,
            closed_form_flops: r.closed_form_attn_flops,
            counted_attn_flops: r.counted_attn_flops,
            total_flops: r.counted_total_flops,
            peak_activation_elems: r.peak_activation_elems,
            wall_ns_median,
        }
    }
}

/// Timing settings for [`sweep`].
#[derive(Clone, Copy, Debug)]
pub struct Timing {
    pub warmup: usize,
    pub repetitions: usize,
}

/// Every mixer at every shape, in shape-major order.
pub fn sweep(shapes: &[MixerShape], timing: Option<Timing>, seed: u64) -> Result<Vec<SweepRow>> {
    if shapes.is_empty() {
        return Err(Error::EmptySweep);
    }
    let mut rows = Vec::with_capacity(shapes.len() * MixerKind::ALL.len());
    for shape in shapes {
        match timing {
            Some(t) => {
                for b in bench_interleaved(&MixerKind::ALL, shape, t.warmup, t.repetitions, seed)? {
                    rows.push(SweepRow::new(&b.report, Some(b.wall_ns_median)));
                }
            }
            None => {
                for kind in MixerKind::ALL {
                    rows.push(SweepRow::new(&measure_flops(kind, shape, seed)?, None));
                }
            }
        }
    }
    Ok(rows)
}

/// Header plus one line per row, `\n` line endings.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let to_err = |e: csv::Error| Error::io("<csv>", e.into());
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(to_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn csv_string(rows: &[SweepRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ascii"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(closed_form_flops(MixerKind::Sa, 16, 8), 4096);
        assert_eq!(closed_form_flops(MixerKind::Sca, 16, 8), 2304);
        for n in [1u64, 7, 64, 1024] {
            for c in [1u64, 8, 64] {
                let v = closed_form_flops(MixerKind::Ca, n, c);
                let s = closed_form_flops(MixerKind::Sca, n, c);
                assert_eq!(v - s, n * n * (c - 1));
            }
        }
    }

    #[test]
    fn counted_matches_closed_form_single_head() {
        for kind in MixerKind::ALL {
            let shape = MixerShape::square(16, 1, 8);
            let r = measure_flops(kind, &shape, 0).unwrap();
            assert_eq!(r.counted_attn_flops, closed_form_flops(kind, 16, 8), "{kind}");
            assert!(r.counted_total_flops >= r.counted_attn_flops);
        }
    }

    #[test]
    fn strip_scores_cost_one_mac_per_head() {
        let r = measure_flops(MixerKind::Sca, &MixerShape::square(16, 2, 4), 0).unwrap();
        assert_eq!(r.counted_attn_flops, 2 * 256 + 256 * 8);
        assert_eq!(r.counted_attn_flops, r.closed_form_attn_flops);
    }

    #[test]
    fn uninstrumented_tape_is_rejected() {
        let case = MixerCase::new(MixerKind::Ca, &MixerShape::square(4, 1, 2), 0).unwrap();
        let mut tape = Tape::new();
        case.run(&mut tape).unwrap();
        assert!(matches!(
            count_flops(&tape, MixerKind::Ca, &case.shape),
            Err(Error::InstrumentationDisabled)
        ));
    }

    #[test]
    fn strip_peak_is_smaller() {
        let s = MixerShape::square(64, 4, 8);
        let ca = measure_flops(MixerKind::Ca, &s, 1).unwrap();
        let sca = measure_flops(MixerKind::Sca, &s, 1).unwrap();
        assert!(sca.peak_activation_elems < ca.peak_activation_elems);
    }

    #[test]
    fn csv_layout() {
        let rows = sweep(&[MixerShape::square(4, 1, 2)], None, 0).unwrap();
        let text = csv_string(&rows).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "");
        assert!(!text.contains('\r'));
        assert_eq!(lines[3], "SCA,4,4,2,2,1,2,48,48,96,4,");
        assert!(matches!(sweep(&[], None, 0), Err(Error::EmptySweep)));
    }

    #[test]
    fn bench_reports_positive_time() {
        let b = bench(MixerKind::Sca, &MixerShape::square(8, 1, 4), 2, 3, 0).unwrap();
        assert!(b.wall_ns_median > 0);
        assert!(b.flops_per_sec > 0.0);
    }
}
