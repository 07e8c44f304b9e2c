//! Seeded synthetic feature pyramids standing in for an encoder backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Per-stage salts XORed into the pyramid seed.
const STAGE_SALT: [u64; 4] = [
    0xA076_1D64_78BD_642F,
    0xE703_7ED1_A0B4_28DB,
    0x8EBC_6AF0_9C88_C6E3,
    0x5899_65CC_7537_4CC3,
];

/// One splitmix64 step: returns `(output, next_state)`.
pub fn splitmix64_next(state: u64) -> (u64, u64) {
    let next = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = next;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31), next)
}

/// Value-type splitmix64 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (out, next) = splitmix64_next(self.state);
        self.state = next;
        out
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Box–Muller cosine branch; consumes two outputs per draw.
    pub fn standard_normal(&mut self) -> f64 {
        // (0, 1] keeps the log finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fills a tensor with `std`-scaled standard normals.
    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| std * self.standard_normal())
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * self.next_f64())
    }

    /// Derives an independent stream keyed by `salt`.
    pub fn substream(seed: u64, salt: u64) -> Self {
        SplitMix64::new(splitmix64_next(seed ^ salt).0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 4],
    pub batch: usize,
    pub seed: u64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            height: 64,
            width: 64,
            channels: [8, 16, 32, 64],
            batch: 1,
            seed: 0,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || !self.height.is_multiple_of(32) {
            return Err(Error::config(
                "pyramid.height",
                format!("{} must be a positive multiple of 32", self.height),
            ));
        }
        if self.width == 0 || !self.width.is_multiple_of(32) {
            return Err(Error::config(
                "pyramid.width",
                format!("{} must be a positive multiple of 32", self.width),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("pyramid.channels", "every stage needs at least one channel"));
        }
        if self.batch == 0 {
            return Err(Error::config("pyramid.batch", "must be at least 1"));
        }
        Ok(())
    }

    /// Spatial grid `(h, w)` of stage `i` (1-based): stride `2^(i+1)`.
    pub fn grid(&self, stage: usize) -> (usize, usize) {
        let stride = 1 << (stage + 1);
        (self.height / stride, self.width / stride)
    }

    pub fn tokens(&self, stage: usize) -> usize {
        let (h, w) = self.grid(stage);
        h * w
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }
}

/// Encoder outputs F₁..F₄, each `[B, Cᵢ, H/2^(i+1), W/2^(i+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub features: [Tensor; 4],
}

impl FeaturePyramid {
    /// Stage `i` feature (1-based).
    pub fn stage(&self, i: usize) -> &Tensor {
        &self.features[i - 1]
    }
}

pub fn generate_pyramid(spec: &PyramidSpec) -> Result<FeaturePyramid> {
    spec.validate()?;
    let features = std::array::from_fn(|k| {
        let stage = k + 1;
        let (h, w) = spec.grid(stage);
        let mut rng = SplitMix64::substream(spec.seed, STAGE_SALT[k]);
        rng.normal_tensor(vec![spec.batch, spec.channels[k], h, w], 1.0)
    });
    Ok(FeaturePyramid { features })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vector() {
        assert_eq!(splitmix64_next(0).0, 0xE220_A839_7B1D_CDAF);
        // second output of the seed-0 stream
        let mut s = SplitMix64::new(0);
        s.next_u64();
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_deterministic_and_seed_dependent() {
        let a: Vec<u64> = {
            let mut s = SplitMix64::new(42);
            (0..4).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = SplitMix64::new(42);
            (0..4).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = SplitMix64::new(43);
            (0..4).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).all(|(x, y)| x != y));
    }

    #[test]
    fn normal_moments() {
        let mut s = SplitMix64::new(7);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn normal_draws_reproduce() {
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        for _ in 0..10 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn pyramid_shapes() {
        let spec = PyramidSpec::default();
        let p = generate_pyramid(&spec).unwrap();
        let shapes: Vec<&[usize]> = p.features.iter().map(|f| f.shape()).collect();
        assert_eq!(
            shapes,
            [&[1, 8, 16, 16][..], &[1, 16, 8, 8], &[1, 32, 4, 4], &[1, 64, 2, 2]]
        );
        for i in 1..4 {
            assert_eq!(spec.tokens(i), 4 * spec.tokens(i + 1));
        }
    }

    #[test]
    fn pyramid_is_reproducible() {
        let spec = PyramidSpec {
            seed: 1234,
            ..PyramidSpec::default()
        };
        assert_eq!(generate_pyramid(&spec).unwrap(), generate_pyramid(&spec).unwrap());
        let other = PyramidSpec { seed: 1235, ..spec.clone() };
        assert_ne!(generate_pyramid(&spec).unwrap(), generate_pyramid(&other).unwrap());
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let spec = PyramidSpec {
            height: 65,
            ..PyramidSpec::default()
        };
        let err = generate_pyramid(&spec).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("multiple of 32"));
    }
}
