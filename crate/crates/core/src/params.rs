//! Parameter containers generic over their leaf type.
//!
//! Bundles hold [`Tensor`]s at rest and are mapped to tape [`Var`]s for a
//! forward pass; the same traversal names every leaf for gradient checks.

use crate::error::{Error, Result};
use crate::synth::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight `[out, in]` and optional bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::InvalidShape {
                op: "linear params",
                msg: format!("weight must be 2-D, got {:?}", weight.shape()),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    op: "linear params",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(LinearParams { weight, bias })
    }

    /// Normal weights with standard deviation `std`, zero bias.
    pub fn init(rng: &mut SplitMix64, inp: usize, out: usize, std: f64) -> Self {
        LinearParams {
            weight: rng.normal_tensor(vec![out, inp], std),
            bias: Some(Tensor::zeros(vec![out])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zero(&mut self) {
        self.weight = Tensor::zeros(self.weight.shape().to_vec());
        if let Some(b) = &mut self.bias {
            *b = Tensor::zeros(b.shape().to_vec());
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::ops::linear(x, &self.weight, self.bias.as_ref())
    }
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl LinearParams<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Per-channel affine parameters of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl NormParams {
    pub fn identity(c: usize) -> Self {
        NormParams {
            gamma: Tensor::ones(vec![c]),
            beta: Tensor::zeros(vec![c]),
        }
    }
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> NormParams<U> {
        NormParams {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl NormParams<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        tape.layernorm(x, self.gamma, self.beta, eps)
    }
}

/// Depthwise kernel `[C, kh, kw]` with per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DwConvParams<T = Tensor> {
    pub kernel: T,
    pub bias: T,
}

impl DwConvParams {
    pub fn init(rng: &mut SplitMix64, c: usize, k: usize, std: f64) -> Self {
        DwConvParams {
            kernel: rng.normal_tensor(vec![c, k, k], std),
            bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn zero(&mut self) {
        self.kernel = Tensor::zeros(self.kernel.shape().to_vec());
        self.bias = Tensor::zeros(self.bias.shape().to_vec());
    }
}

impl<T> DwConvParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DwConvParams<U> {
        DwConvParams {
            kernel: f(&join(prefix, "kernel"), &self.kernel),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl DwConvParams<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.depthwise_conv(x, self.kernel, Some(self.bias))
    }
}
