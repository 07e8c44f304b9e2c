use super::ops::{self, LayerNormCache, MatmulPlan};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Instrumentation label attached to every recorded node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Region {
    #[default]
    Other,
    /// Query and key projections and their head reshapes.
    QueryKey,
    /// Value projection.
    Value,
    /// Output projection.
    Output,
    /// Query-key score products.
    Score,
    /// Attention-weighted sum over values.
    WeightedSum,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Other,
        Region::QueryKey,
        Region::Value,
        Region::Output,
        Region::Score,
        Region::WeightedSum,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, s: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    DwConv { x: Var, k: Var, b: Option<Var> },
    GlobalAvgPool { x: Var },
    AdaptiveAvgPool { x: Var },
    Bilinear { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    ChannelScale { x: Var, w: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    macs: u64,
    region: Region,
}

/// Linear record of forward operations for reverse-mode differentiation.
///
/// Each node also carries its multiply-accumulate count and the [`Region`]
/// that was active when it was recorded, which the cost model reads back.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    region: Region,
    instrumented: bool,
    tamper: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose MAC counts may be read by the cost model.
    pub fn instrumented() -> Self {
        Tape {
            instrumented: true,
            ..Tape::default()
        }
    }

    pub fn is_instrumented(&self) -> bool {
        self.instrumented
    }

    /// Test hook: perturbs linear-weight gradients during backward so
    /// gradient checks have a negative control.
    #[doc(hidden)]
    pub fn set_tamper(&mut self, on: bool) {
        self.tamper = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Which inputs of every recorded ReLU are positive, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Runs `f` with `region` active, restoring the previous region afterwards.
    pub fn in_region<T>(&mut self, region: Region, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = std::mem::replace(&mut self.region, region);
        let out = f(self);
        self.region = prev;
        out
    }

    fn push(&mut self, value: Tensor, op: Op, macs: u64) -> Var {
        self.nodes.push(Node {
            value,
            op,
            macs,
            region: self.region,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, 0)
    }

    // ------------------------------------------------------------ recording

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let y = ops::matmul_with(&plan, self.value(a), self.value(b));
        let macs = plan.macs();
        Ok(self.push(y, Op::MatMul { a, b, plan }, macs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let macs = ops::linear_macs(self.value(x), self.value(w));
        Ok(self.push(y, Op::Linear { x, w, b }, macs))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        self.scaled_softmax_lastdim(x, 1.0)
    }

    /// `softmax(s·x)` as one node.
    pub fn scaled_softmax_lastdim(&mut self, x: Var, s: f64) -> Var {
        let y = ops::scaled_softmax_lastdim(self.value(x), s);
        self.push(y, Op::Softmax { x, s }, 0)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            ops::layernorm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            0,
        ))
    }

    pub fn depthwise_conv(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::depthwise_conv(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let macs = ops::dwconv_macs(self.value(x), self.value(k));
        Ok(self.push(y, Op::DwConv { x, k, b }, macs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }, 0))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::AdaptiveAvgPool { x }, 0))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Bilinear { x }, 0))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), axes)?;
        Ok(self.push(
            y,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            0,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("need at least 2 dims, got {:?}", self.value(x).shape()),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape { x }, 0))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            0,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }, 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }, 0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale { x, s }, 0)
    }

    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::channel_scale(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::ChannelScale { x, w }, 0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, 0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.push(y, Op::Gelu { x }, 0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, 0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, 0)
    }

    // ------------------------------------------------------------ instrumentation

    /// Multiply-accumulates recorded in `region`.
    pub fn macs_in(&self, region: Region) -> Result<u64> {
        self.require_instrumented()?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| n.region == region)
            .map(|n| n.macs)
            .sum())
    }

    pub fn total_macs(&self) -> Result<u64> {
        self.require_instrumented()?;
        Ok(self.nodes.iter().map(|n| n.macs).sum())
    }

    /// Per-region MAC totals, ordered as [`Region::ALL`].
    pub fn macs_by_region(&self) -> Result<[u64; 6]> {
        self.require_instrumented()?;
        let mut out = [0u64; 6];
        for n in &self.nodes {
            out[n.region.slot()] += n.macs;
        }
        Ok(out)
    }

    /// Largest tensor (in elements) produced inside `region`.
    pub fn peak_elems_in(&self, region: Region) -> Result<usize> {
        self.require_instrumented()?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| n.region == region && !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel())
            .max()
            .unwrap_or(0))
    }

    fn require_instrumented(&self) -> Result<()> {
        if self.instrumented {
            Ok(())
        } else {
            Err(Error::InstrumentationDisabled)
        }
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`, visiting nodes in strict reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, plan } => {
                    let (ga, gb) = ops::matmul_backward(plan, self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (gx, mut gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    if self.tamper {
                        gw = gw.map(|v| v * 1.05);
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Softmax { x, s } => {
                    accumulate(&mut grads, *x, ops::softmax_backward(&node.value, &g, *s));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, gg, gb) = ops::layernorm_backward(cache, self.value(*gamma), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::DwConv { x, k, b } => {
                    let (gx, gk, gb) =
                        ops::depthwise_conv_backward(self.value(*x), self.value(*k), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *k, gk);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let gx = ops::global_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::AdaptiveAvgPool { x } => {
                    let gx = ops::adaptive_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bilinear { x } => {
                    let gx = ops::bilinear_resize_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Permute { x, axes } => {
                    let gx = ops::permute(&g, &ops::inverse_axes(axes))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                    for (&v, gx) in xs.iter().zip(ops::concat_backward(&shapes, *axis, &g)) {
                        accumulate(&mut grads, v, gx);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = ops::mul(&g, self.value(*b))?;
                    let gb = ops::mul(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::ChannelScale { x, w } => {
                    let (gx, gw) = ops::channel_scale_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Relu { x } => {
                    let gx = self
                        .value(*x)
                        .zip_map(&g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu { x } => {
                    let gx = self.value(*x).zip_map(&g, |xv, gv| gv * ops::gelu_grad(xv))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let gx = node.value.zip_map(&g, |y, gv| gv * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum { x } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
