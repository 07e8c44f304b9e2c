//! The single JSON document that describes a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::MixerShape;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::synth::PyramidSpec;

/// Largest spatial extent `gradcheck` accepts; finite differences decode
/// once per parameter element, twice.
pub const GRADCHECK_MAX_EXTENT: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Shapes evaluated by `flops`.
    pub flops_grid: Vec<MixerShape>,
    /// Shapes timed by `bench`.
    pub bench: Vec<MixerShape>,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let mut flops_grid = Vec::new();
        for n in [1, 4, 16, 64, 256] {
            for c in [1, 8, 32, 128] {
                flops_grid.push(MixerShape::square(n, 1, c));
            }
        }
        AnalysisConfig {
            flops_grid,
            bench: vec![MixerShape::square(1024, 8, 8)],
            warmup: 2,
            repetitions: 9,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        for (list, shapes) in [("flops_grid", &self.flops_grid), ("bench", &self.bench)] {
            for (i, s) in shapes.iter().enumerate() {
                s.validate().map_err(|e| match e {
                    Error::Config { field, msg } => {
                        Error::config(format!("analysis.{list}[{i}].{field}"), msg)
                    }
                    other => other,
                })?;
            }
        }
        if self.warmup < 2 {
            return Err(Error::config("analysis.warmup", "at least 2 warmup runs are required"));
        }
        if self.repetitions < 9 {
            return Err(Error::config("analysis.repetitions", "at least 9 timed runs are required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Per-group bound on the relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-3,
            floor: crate::gradcheck::DECODER_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the decoder parameters and of analysis inputs.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub pyramid: PyramidSpec,
    pub decoder: DecoderConfig,
    pub analysis: AnalysisConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            pyramid: PyramidSpec::default(),
            decoder: DecoderConfig::default(),
            analysis: AnalysisConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small configuration used by `gradcheck` when none is given.
    pub fn gradcheck_default() -> Self {
        RunConfig {
            pyramid: PyramidSpec {
                height: 32,
                width: 32,
                channels: [4, 8, 8, 8],
                ..PyramidSpec::default()
            },
            decoder: DecoderConfig {
                num_classes: 2,
                heads: [1, 2, 2, 2],
                dim_head: 4,
                mlp_expansion: 2,
                init_std: 0.5,
                ..DecoderConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Parses, resolves derived defaults and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(json_error)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn resolve(&mut self) {
        self.decoder.resolve();
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.decoder.validate(&self.pyramid.channels)?;
        self.analysis.validate()?;
        let g = &self.gradcheck;
        if !(g.step > 0.0 && g.step.is_finite()) {
            return Err(Error::config("gradcheck.step", "must be positive"));
        }
        if !(g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(Error::config("gradcheck.tolerance", "must be positive"));
        }
        if !(g.floor > 0.0 && g.floor.is_finite()) {
            return Err(Error::config("gradcheck.floor", "must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON of the resolved configuration, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// serde_json reports unknown keys as "unknown field `x`, expected ..."; keep
/// its wording, which names the key, and prefix the position.
fn json_error(e: serde_json::Error) -> Error {
    Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string())
}

/// Parses a bare JSON list of mixer shapes.
pub fn parse_sweep(text: &str) -> Result<Vec<MixerShape>> {
    let shapes: Vec<MixerShape> = serde_json::from_str(text).map_err(json_error)?;
    if shapes.is_empty() {
        return Err(Error::EmptySweep);
    }
    for (i, s) in shapes.iter().enumerate() {
        s.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::config(format!("[{i}].{field}"), msg),
            other => other,
        })?;
    }
    Ok(shapes)
}
