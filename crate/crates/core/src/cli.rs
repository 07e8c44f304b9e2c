//! `scaseg` subcommands. Exit codes: 0 success, 1 failed check, 2 config
//! error, 3 shape or runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{self, MixerShape, Timing};
use crate::attention::MixerKind;
use crate::config::{parse_sweep, RunConfig, GRADCHECK_MAX_EXTENT};
use crate::decoder::{self, DecoderParams};
use crate::error::{Error, Result};
use crate::gradcheck::decoder_gradcheck;
use crate::selftest;
use crate::synth::generate_pyramid;
use crate::tensor::io as scat;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "scaseg", version, about = "Strip cross-attention segmentation decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a synthetic pyramid and write the mask as SCAT.
    Forward {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write M1..M4, D1..D4 and attn1..attn4.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Compare decoder gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        tamper: bool,
    },
    /// Closed-form versus counted attention MACs as CSV.
    Flops {
        /// Run config or a bare JSON list of mixer shapes.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV file to write instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless every counted value equals its closed form.
        #[arg(long)]
        check: bool,
    },
    /// Time SA, CA and SCA at the configured sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suites.
    Selftest {
        #[arg(long, hide = true)]
        tamper: bool,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::CheckFailed) => EXIT_CHECK_FAILED,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = fallback;
            cfg.resolve();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome> {
    match cmd {
        Command::Forward { config, out, dump_trace } => {
            let mut cfg = load(config.as_deref(), RunConfig::default())?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            forward(&cfg, dump_trace, stdout)
        }
        Command::Gradcheck { config, tamper } => {
            let cfg = load(config.as_deref(), RunConfig::gradcheck_default())?;
            gradcheck(&cfg, tamper, stdout)
        }
        Command::Flops { config, out, check } => {
            let shapes = match &config {
                Some(p) => flops_shapes(p)?,
                None => load(None, RunConfig::default())?.analysis.flops_grid,
            };
            flops(&shapes, out.as_deref(), check, stdout, stderr)
        }
        Command::Bench { config, out } => {
            let cfg = load(config.as_deref(), RunConfig::default())?;
            bench(&cfg, out.as_deref(), stdout, stderr)
        }
        Command::Selftest { tamper } => {
            let results = selftest::run_all(tamper);
            let mut all = true;
            for r in &results {
                writeln!(stdout, "{r}").map_err(|e| Error::io("<stdout>", e))?;
                all &= r.passed;
            }
            Ok(if all { Outcome::Ok } else { Outcome::CheckFailed })
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn forward(cfg: &RunConfig, dump_trace: bool, stdout: &mut dyn Write) -> Result<Outcome> {
    let pyramid = generate_pyramid(&cfg.pyramid)?;
    let params = DecoderParams::init(&cfg.decoder, cfg.pyramid.channels, cfg.seed)?;
    let trace = decoder::decode(&pyramid, &params)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scat::write(dir.join("mask.scat"), &trace.mask)?;
    if dump_trace {
        for i in 0..4 {
            scat::write(dir.join(format!("M{}.scat", i + 1)), &trace.m[i])?;
            scat::write(dir.join(format!("D{}.scat", i + 1)), &trace.d[i])?;
            scat::write(dir.join(format!("attn{}.scat", i + 1)), &trace.attn[i])?;
        }
    }
    write_file(&dir.join("run.json"), cfg.to_json().as_bytes())?;
    writeln!(stdout, "mask {:?} -> {}", trace.mask.shape(), dir.join("mask.scat").display())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(Outcome::Ok)
}

fn gradcheck(cfg: &RunConfig, tamper: bool, stdout: &mut dyn Write) -> Result<Outcome> {
    for (field, v) in [("pyramid.height", cfg.pyramid.height), ("pyramid.width", cfg.pyramid.width)] {
        if v > GRADCHECK_MAX_EXTENT {
            return Err(Error::config(field, format!("{v} exceeds the gradcheck limit of {GRADCHECK_MAX_EXTENT}")));
        }
    }
    let pyramid = generate_pyramid(&cfg.pyramid)?;
    let params = DecoderParams::init(&cfg.decoder, cfg.pyramid.channels, cfg.seed)?;
    let report = decoder_gradcheck(&pyramid, &params, cfg.gradcheck.step, cfg.gradcheck.floor, tamper)?;
    let io = |e| Error::io("<stdout>", e);
    writeln!(
        stdout,
        "loss sum(mask) = {:.6e}, step {:e}, relative-error floor {:.3e}",
        report.loss, cfg.gradcheck.step, report.floor
    )
    .map_err(io)?;
    writeln!(stdout, "{:<28} {:>8} {:>8} {:>12}  status", "group", "checked", "kinks", "max_rel_err").map_err(io)?;
    let mut ok = true;
    for g in &report.groups {
        let pass = g.max_rel_err < cfg.gradcheck.tolerance;
        ok &= pass;
        writeln!(
            stdout,
            "{:<28} {:>8} {:>8} {:>12.3e}  {}",
            g.group,
            g.checked,
            g.skipped,
            g.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        )
        .map_err(io)?;
    }
    Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed })
}

/// A flops input is either a run config or a bare list of shapes.
fn flops_shapes(path: &Path) -> Result<Vec<MixerShape>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    if text.trim_start().starts_with('[') {
        parse_sweep(&text)
    } else {
        Ok(RunConfig::from_json(&text)?.analysis.flops_grid)
    }
}

fn emit_csv(rows: &[analysis::SweepRow], out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            analysis::write_csv(rows, file)
        }
        None => analysis::write_csv(rows, stdout),
    }
}

fn flops(shapes: &[MixerShape], out: Option<&Path>, check: bool, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome> {
    let rows = analysis::sweep(shapes, None, 0)?;
    emit_csv(&rows, out, stdout)?;
    if !check {
        return Ok(Outcome::Ok);
    }
    let bad: Vec<_> = rows
        .iter()
        .filter(|r| r.counted_attn_flops != r.closed_form_flops)
        .collect();
    for r in &bad {
        let _ = writeln!(
            stderr,
            "mismatch: {} N_q={} N_kv={} C={} counted {} closed form {}",
            r.mixer, r.n_q, r.n_kv, r.c_q, r.counted_attn_flops, r.closed_form_flops
        );
    }
    Ok(if bad.is_empty() { Outcome::Ok } else { Outcome::CheckFailed })
}

fn bench(cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome> {
    let timing = Timing {
        warmup: cfg.analysis.warmup,
        repetitions: cfg.analysis.repetitions,
    };
    let rows = analysis::sweep(&cfg.analysis.bench, Some(timing), cfg.seed)?;
    emit_csv(&rows, out, stdout)?;
    for pair in rows.chunks(MixerKind::ALL.len()) {
        let time = |name: &str| pair.iter().find(|r| r.mixer == name).and_then(|r| r.wall_ns_median);
        if let (Some(ca), Some(sca)) = (time("CA"), time("SCA")) {
            let _ = writeln!(
                stderr,
                "N_q={} C={}: SCA/CA wall-clock ratio {:.3}",
                pair[0].n_q,
                pair[0].c_q,
                sca as f64 / ca as f64
            );
        }
    }
    Ok(Outcome::Ok)
}
