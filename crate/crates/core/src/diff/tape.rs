//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every forward op whose inputs require gradients.
//! Values live inside the tape and are addressed by [`Var`] handles; the
//! tape is append-only, so node order is a topological order and the
//! backward pass is a single reverse sweep.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, MatLayout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Elementwise nonlinearities available on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Silu,
    Gelu,
    Tanh,
    Sqrt,
    Square,
    /// `1/sqrt(x)` for positive `x`, `1` otherwise (zero-degree guard).
    RsqrtOrOne,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::RsqrtOrOne => {
                if x > 0.0 {
                    1.0 / x.sqrt()
                } else {
                    1.0
                }
            }
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::RsqrtOrOne => {
                if x > 0.0 {
                    -0.5 * y * y * y
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Tanh => "tanh",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::RsqrtOrOne => "rsqrt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Dropout stream for one forward pass. `None` means evaluation mode.
///
/// Masks are drawn from a counter-based stream keyed by
/// `(seed, step, pass, op id)`, so a pass can be replayed exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutStream(Option<u64>);

impl DropoutStream {
    pub fn eval() -> Self {
        DropoutStream(None)
    }

    pub fn train(seed: u64, step: u64, pass: u64) -> Self {
        DropoutStream(Some(mix(mix(mix(0x5354_5649, seed), step), pass)))
    }

    pub fn is_training(&self) -> bool {
        self.0.is_some()
    }

    fn key(&self, op_id: u64) -> Option<u64> {
        self.0.map(|s| mix(s, op_id))
    }
}

/// splitmix64 finalizer over a combined word.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(a << 6);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Shift {
        x: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    MatMul {
        a: Var,
        b: Var,
        layout: MatLayout,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Expand {
        x: Var,
    },
    TransposeLast2 {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthConv {
        x: Var,
        w: Var,
    },
    Conv {
        x: Var,
        w: Var,
        stride: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        stride: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorder for one forward/backward cycle. Single-threaded by design.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            if ta.shape() == tb.shape() {
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(ta.shape(), data)?
            } else {
                let shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                    Error::shape(
                        name,
                        format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
                    )
                })?;
                let ia = kernels::index_map(&shape, ta.shape());
                let ib = kernels::index_map(&shape, tb.shape());
                let (da, db) = (ta.data(), tb.data());
                let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
                Tensor::new(&shape, data)?
            }
        };
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Binary { kind, a, b }, rg, name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, c }, rg, "scale")
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Shift { x }, rg, "add_scalar")
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    // ----------------------------------------------------------------- unary

    pub fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.map(|v| kind.apply(v));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary { x, kind }, rg, kind.name())
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    // ------------------------------------------------------------ structural

    /// Matrix product. `b` of rank 2 multiplies the last axis of any `a`;
    /// otherwise leading axes are batch axes (equal, or absent on `a`).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, layout) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (layout, shape) = kernels::mat_layout(ta.shape(), tb.shape())?;
            let mut data = vec![0.0; shape.iter().product()];
            kernels::matmul_forward(&layout, ta.data(), tb.data(), &mut data);
            (Tensor::new(&shape, data)?, layout)
        };
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul { a, b, layout }, rg, "matmul")
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape();
            let lead = &first[..first.len().saturating_sub(1)];
            if first.is_empty() {
                return Err(Error::shape("concat", "scalar input"));
            }
            let mut widths = Vec::with_capacity(parts.len());
            for (k, p) in parts.iter().enumerate() {
                let s = nodes[p.0].value.shape();
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "input {} has shape {:?}, leading axes must match {:?}",
                            k, s, lead
                        ),
                    ));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
            "concat",
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            let w = *s
                .last()
                .ok_or_else(|| Error::shape("split", "scalar input"))?;
            if start + len > w {
                return Err(Error::shape(
                    "split",
                    format!("range {}..{} exceeds last axis {}", start, start + len, w),
                ));
            }
            let rows = t.len() / w.max(1);
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
            }
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Slice { x, start }, rg, "split")
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_last(&self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_last(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if axis >= s.len() {
                return Err(Error::shape(
                    "sum",
                    format!("axis {} out of range for {:?}", axis, s),
                ));
            }
            let outer: usize = s[..axis].iter().product();
            let n = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * inner];
            let src = t.data();
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for (d, v) in dst.iter_mut().zip(&src[base..base + inner]) {
                        *d += v;
                    }
                }
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SumAxis { x, axis }, rg, "sum")
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean", format!("axis {} out of range", axis)))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.nodes.borrow()[x.0].value.sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SumAll { x }, rg, "sum")
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reshape { x }, rg, "reshape")
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            match kernels::broadcast_shape(t.shape(), shape) {
                Some(s) if s == shape => {}
                _ => {
                    return Err(Error::shape(
                        "expand",
                        format!("cannot expand {:?} to {:?}", t.shape(), shape),
                    ))
                }
            }
            let map = kernels::index_map(shape, t.shape());
            Tensor::new(shape, map.iter().map(|&i| t.data()[i]).collect())?
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Expand { x }, rg, "expand")
    }

    pub fn transpose_last2(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
            }
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let mut data = vec![0.0; t.len()];
            for (bi, chunk) in t.data().chunks(m * n).enumerate() {
                let dst = &mut data[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = chunk[i * n + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 2, r - 1);
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::TransposeLast2 { x }, rg, "transpose")
    }

    // ------------------------------------------------------- normalizations

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let w = *t
                .shape()
                .last()
                .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(w.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(t.shape(), data)?
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x }, rg, "softmax")
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let w = *t
                .shape()
                .last()
                .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if g.shape() != [w] || b.shape() != [w] {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "scale {:?} / shift {:?} must be [{}]",
                        g.shape(),
                        b.shape(),
                        w
                    ),
                ));
            }
            let rows = t.len() / w;
            let mut xhat = vec![0.0; t.len()];
            let mut rstd = vec![0.0; rows];
            let mut data = vec![0.0; t.len()];
            for r in 0..rows {
                let row = &t.data()[r * w..(r + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..w {
                    let h = (row[j] - mean) * rs;
                    xhat[r * w + j] = h;
                    data[r * w + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(t.shape(), data)?, xhat, rstd)
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    // ------------------------------------------------------- temporal convs

    /// Depthwise convolution along the time axis (second to last) with zero
    /// "same" padding. `x`: `[..., T, D]`, `w`: `[D, K]`.
    pub fn depthwise_conv_time(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, k) = (&nodes[x.0].value, &nodes[w.0].value);
            let geo = kernels::TimeGeom::of(t.shape(), "depthwise_conv")?;
            if k.rank() != 2 || k.shape()[0] != geo.ch {
                return Err(Error::shape(
                    "depthwise_conv",
                    format!("kernel {:?} must be [{}, K]", k.shape(), geo.ch),
                ));
            }
            let mut data = vec![0.0; t.len()];
            kernels::depthwise_forward(&geo, k.shape()[1], t.data(), k.data(), &mut data);
            Tensor::new(t.shape(), data)?
        };
        let rg = self.any_grad(&[x, w]);
        self.push(out, Op::DepthConv { x, w }, rg, "depthwise_conv")
    }

    /// Strided convolution along time. `x`: `[..., T, Din]`, `w`: `[K, Din, Dout]`.
    /// Output length is `ceil(T / stride)` with `(K - stride) / 2` left padding.
    pub fn conv_time(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, k) = (&nodes[x.0].value, &nodes[w.0].value);
            let geo = kernels::TimeGeom::of(t.shape(), "conv")?;
            let (kk, dout) = kernels::check_conv_kernel(k.shape(), geo.ch, "conv")?;
            if stride == 0 {
                return Err(Error::Parameter("conv stride must be positive".into()));
            }
            let out_len = geo.len.div_ceil(stride);
            let mut data = vec![0.0; geo.lead * out_len * dout];
            kernels::conv_forward(
                &geo,
                kk,
                dout,
                stride,
                out_len,
                t.data(),
                k.data(),
                &mut data,
            );
            let mut shape = t.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = out_len;
            shape[r - 1] = dout;
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[x, w]);
        self.push(out, Op::Conv { x, w, stride }, rg, "conv")
    }

    /// Transposed convolution along time, trimmed or zero-extended at the
    /// tail to `out_len`. `x`: `[..., T, Din]`, `w`: `[K, Din, Dout]`.
    pub fn conv_transpose_time(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        out_len: usize,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, k) = (&nodes[x.0].value, &nodes[w.0].value);
            let geo = kernels::TimeGeom::of(t.shape(), "conv_transpose")?;
            let (kk, dout) = kernels::check_conv_kernel(k.shape(), geo.ch, "conv_transpose")?;
            if stride == 0 {
                return Err(Error::Parameter(
                    "conv_transpose stride must be positive".into(),
                ));
            }
            let mut data = vec![0.0; geo.lead * out_len * dout];
            kernels::conv_t_forward(
                &geo,
                kk,
                dout,
                stride,
                out_len,
                t.data(),
                k.data(),
                &mut data,
            );
            let mut shape = t.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = out_len;
            shape[r - 1] = dout;
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[x, w]);
        self.push(
            out,
            Op::ConvTranspose { x, w, stride },
            rg,
            "conv_transpose",
        )
    }

    // -------------------------------------------------------------- dropout

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&self, x: Var, rate: f64, stream: DropoutStream, op_id: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                rate
            )));
        }
        let key = match stream.key(op_id) {
            Some(k) if rate > 0.0 => k,
            _ => return Ok(x),
        };
        let (out, mask) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..t.len())
                .map(|_| {
                    if rng.random::<f64>() >= rate {
                        keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(t.shape(), data)?, mask)
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    // ---------------------------------------------------------- state space

    /// Selective diagonal state-space scan along time.
    ///
    /// Shapes: `x`, `delta`: `[..., T, D]`; `a`: `[D, S]`; `b`, `c`:
    /// `[..., T, S]`; `d`: `[D]`. With `h_0 = 0`:
    /// `h_t = exp(delta_t * a) * h_{t-1} + (delta_t * b_t) * x_t`,
    /// `y_t = <c_t, h_t> + d * x_t`.
    pub fn selective_scan(
        &self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let (out, states) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let geo = kernels::TimeGeom::of(tx.shape(), "selective_scan")?;
            let ta = &nodes[a.0].value;
            if ta.rank() != 2 || ta.shape()[0] != geo.ch {
                return Err(Error::shape(
                    "selective_scan",
                    format!("state matrix {:?} must be [{}, S]", ta.shape(), geo.ch),
                ));
            }
            let ns = ta.shape()[1];
            let mut bc_shape = tx.shape().to_vec();
            *bc_shape.last_mut().unwrap() = ns;
            for (name, v) in [("delta", delta), ("b", b), ("c", c)] {
                let want: &[usize] = if name == "delta" {
                    tx.shape()
                } else {
                    &bc_shape
                };
                if nodes[v.0].value.shape() != want {
                    return Err(Error::shape(
                        "selective_scan",
                        format!(
                            "{} has shape {:?}, expected {:?}",
                            name,
                            nodes[v.0].value.shape(),
                            want
                        ),
                    ));
                }
            }
            if nodes[d.0].value.shape() != [geo.ch] {
                return Err(Error::shape("selective_scan", "skip gain must be [D]"));
            }
            let mut y = vec![0.0; tx.len()];
            let mut states = vec![0.0; tx.len() * ns];
            kernels::scan_forward(
                &geo,
                ns,
                tx.data(),
                nodes[delta.0].value.data(),
                ta.data(),
                nodes[b.0].value.data(),
                nodes[c.0].value.data(),
                nodes[d.0].value.data(),
                &mut y,
                &mut states,
            );
            (Tensor::new(tx.shape(), y)?, states)
        };
        let rg = self.any_grad(&[x, delta, a, b, c, d]);
        self.push(
            out,
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            rg,
            "selective_scan",
        )
    }

    // ------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every leaf that requires grad.
    /// Gradients from earlier calls are replaced.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(&nodes, i, &g, &mut grads);
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = g.or_else(|| Some(Tensor::zeros(node.value.shape())));
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let map = kernels::index_map(g.shape(), target);
    let mut out = Tensor::zeros(target);
    let o = out.data_mut();
    for (&j, v) in map.iter().zip(g.data()) {
        o[j] += v;
    }
    out
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    let need = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let same = ta.shape() == tb.shape();
            let (ia, ib) = if same {
                (Vec::new(), Vec::new())
            } else {
                (
                    kernels::index_map(out.shape(), ta.shape()),
                    kernels::index_map(out.shape(), tb.shape()),
                )
            };
            let at = |k: usize| if same { ta.data()[k] } else { ta.data()[ia[k]] };
            let bt = |k: usize| if same { tb.data()[k] } else { tb.data()[ib[k]] };
            if need(*a) {
                let full = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => Tensor::from_fn(out.shape(), |k| g.data()[k] * bt(k)),
                    Binary::Div => Tensor::from_fn(out.shape(), |k| g.data()[k] / bt(k)),
                };
                accumulate(nodes, grads, *a, reduce_to(&full, ta.shape()));
            }
            if need(*b) {
                let full = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|v| -v),
                    Binary::Mul => Tensor::from_fn(out.shape(), |k| g.data()[k] * at(k)),
                    Binary::Div => Tensor::from_fn(out.shape(), |k| {
                        let bv = bt(k);
                        -g.data()[k] * at(k) / (bv * bv)
                    }),
                };
                accumulate(nodes, grads, *b, reduce_to(&full, tb.shape()));
            }
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::Shift { x } => accumulate(nodes, grads, *x, g.clone()),
        Op::Unary { x, kind } => {
            let tx = val(*x);
            let data = tx
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(tx.shape(), data).unwrap());
        }
        Op::MatMul { a, b, layout } => {
            let (ta, tb) = (val(*a), val(*b));
            if need(*a) {
                let mut ga = vec![0.0; ta.len()];
                kernels::matmul_grad_a(layout, g.data(), tb.data(), &mut ga);
                accumulate(nodes, grads, *a, Tensor::new(ta.shape(), ga).unwrap());
            }
            if need(*b) {
                let mut gb = vec![0.0; tb.len()];
                kernels::matmul_grad_b(layout, ta.data(), g.data(), &mut gb);
                accumulate(nodes, grads, *b, Tensor::new(tb.shape(), gb).unwrap());
            }
        }
        Op::Concat { parts } => {
            let total = *out.shape().last().unwrap();
            let rows = out.len() / total.max(1);
            let mut start = 0;
            for p in parts {
                let tp = val(*p);
                let w = *tp.shape().last().unwrap();
                if need(*p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    accumulate(nodes, grads, *p, Tensor::new(tp.shape(), d).unwrap());
                }
                start += w;
            }
        }
        Op::Slice { x, start } => {
            let tx = val(*x);
            let w = *tx.shape().last().unwrap();
            let len = *out.shape().last().unwrap();
            let mut d = Tensor::zeros(tx.shape());
            let rows = tx.len() / w.max(1);
            for r in 0..rows {
                d.data_mut()[r * w + start..r * w + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::SumAxis { x, axis } => {
            let tx = val(*x);
            let s = tx.shape();
            let outer: usize = s[..*axis].iter().product();
            let n = s[*axis];
            let inner: usize = s[*axis + 1..].iter().product();
            let mut d = vec![0.0; tx.len()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    d[base..base + inner].copy_from_slice(src);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(s, d).unwrap());
        }
        Op::SumAll { x } => {
            let tx = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(tx.shape(), g.item()));
        }
        Op::Reshape { x } => {
            let tx = val(*x);
            accumulate(nodes, grads, *x, g.clone().reshape(tx.shape()).unwrap());
        }
        Op::Expand { x } => {
            let tx = val(*x);
            accumulate(nodes, grads, *x, reduce_to(g, tx.shape()));
        }
        Op::TransposeLast2 { x } => {
            let tx = val(*x);
            let s = tx.shape();
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let mut d = vec![0.0; tx.len()];
            for (bi, chunk) in g.data().chunks(m * n).enumerate() {
                let dst = &mut d[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[i * n + j] = chunk[j * m + i];
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(s, d).unwrap());
        }
        Op::Softmax { x } => {
            let w = *out.shape().last().unwrap();
            let mut d = vec![0.0; out.len()];
            for ((drow, yrow), grow) in d
                .chunks_mut(w)
                .zip(out.data().chunks(w))
                .zip(g.data().chunks(w))
            {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for j in 0..w {
                    drow[j] = yrow[j] * (grow[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(out.shape(), d).unwrap());
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let w = *out.shape().last().unwrap();
            let gam = val(*gamma).data();
            if need(*gamma) || need(*beta) {
                let mut gg = vec![0.0; w];
                let mut gb = vec![0.0; w];
                for (grow, hrow) in g.data().chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::new(&[w], gg).unwrap());
                accumulate(nodes, grads, *beta, Tensor::new(&[w], gb).unwrap());
            }
            if need(*x) {
                let mut d = vec![0.0; out.len()];
                for (r, ((drow, grow), hrow)) in d
                    .chunks_mut(w)
                    .zip(g.data().chunks(w))
                    .zip(xhat.chunks(w))
                    .enumerate()
                {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..w {
                        let gh = grow[j] * gam[j];
                        m1 += gh;
                        m2 += gh * hrow[j];
                    }
                    m1 /= w as f64;
                    m2 /= w as f64;
                    for j in 0..w {
                        drow[j] = rstd[r] * (grow[j] * gam[j] - m1 - hrow[j] * m2);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(out.shape(), d).unwrap());
            }
        }
        Op::DepthConv { x, w } => {
            let (tx, tw) = (val(*x), val(*w));
            let geo = kernels::TimeGeom::of(tx.shape(), "depthwise_conv").unwrap();
            let mut gx = vec![0.0; tx.len()];
            let mut gw = vec![0.0; tw.len()];
            kernels::depthwise_backward(
                &geo,
                tw.shape()[1],
                tx.data(),
                tw.data(),
                g.data(),
                &mut gx,
                &mut gw,
            );
            accumulate(nodes, grads, *x, Tensor::new(tx.shape(), gx).unwrap());
            accumulate(nodes, grads, *w, Tensor::new(tw.shape(), gw).unwrap());
        }
        Op::Conv { x, w, stride } => {
            let (tx, tw) = (val(*x), val(*w));
            let geo = kernels::TimeGeom::of(tx.shape(), "conv").unwrap();
            let (kk, dout) = (tw.shape()[0], tw.shape()[2]);
            let out_len = out.shape()[out.rank() - 2];
            let mut gx = vec![0.0; tx.len()];
            let mut gw = vec![0.0; tw.len()];
            kernels::conv_backward(
                &geo,
                kk,
                dout,
                *stride,
                out_len,
                tx.data(),
                tw.data(),
                g.data(),
                &mut gx,
                &mut gw,
            );
            accumulate(nodes, grads, *x, Tensor::new(tx.shape(), gx).unwrap());
            accumulate(nodes, grads, *w, Tensor::new(tw.shape(), gw).unwrap());
        }
        Op::ConvTranspose { x, w, stride } => {
            let (tx, tw) = (val(*x), val(*w));
            let geo = kernels::TimeGeom::of(tx.shape(), "conv_transpose").unwrap();
            let (kk, dout) = (tw.shape()[0], tw.shape()[2]);
            let out_len = out.shape()[out.rank() - 2];
            let mut gx = vec![0.0; tx.len()];
            let mut gw = vec![0.0; tw.len()];
            kernels::conv_t_backward(
                &geo,
                kk,
                dout,
                *stride,
                out_len,
                tx.data(),
                tw.data(),
                g.data(),
                &mut gx,
                &mut gw,
            );
            accumulate(nodes, grads, *x, Tensor::new(tx.shape(), gx).unwrap());
            accumulate(nodes, grads, *w, Tensor::new(tw.shape(), gw).unwrap());
        }
        Op::Dropout { x, mask } => {
            let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(nodes, grads, *x, Tensor::new(out.shape(), d).unwrap());
        }
        Op::Scan {
            x,
            delta,
            a,
            b,
            c,
            d,
            states,
        } => {
            let tx = val(*x);
            let geo = kernels::TimeGeom::of(tx.shape(), "selective_scan").unwrap();
            let ta = val(*a);
            let ns = ta.shape()[1];
            let (tdel, tb, tc, td) = (val(*delta), val(*b), val(*c), val(*d));
            let mut gx = vec![0.0; tx.len()];
            let mut gdel = vec![0.0; tx.len()];
            let mut ga = vec![0.0; ta.len()];
            let mut gb = vec![0.0; tb.len()];
            let mut gc = vec![0.0; tc.len()];
            let mut gd = vec![0.0; td.len()];
            kernels::scan_backward(
                &geo,
                ns,
                kernels::ScanInputs {
                    x: tx.data(),
                    delta: tdel.data(),
                    a: ta.data(),
                    b: tb.data(),
                    c: tc.data(),
                    d: td.data(),
                    states,
                },
                g.data(),
                kernels::ScanGrads {
                    x: &mut gx,
                    delta: &mut gdel,
                    a: &mut ga,
                    b: &mut gb,
                    c: &mut gc,
                    d: &mut gd,
                },
            );
            accumulate(nodes, grads, *x, Tensor::new(tx.shape(), gx).unwrap());
            accumulate(
                nodes,
                grads,
                *delta,
                Tensor::new(tdel.shape(), gdel).unwrap(),
            );
            accumulate(nodes, grads, *a, Tensor::new(ta.shape(), ga).unwrap());
            accumulate(nodes, grads, *b, Tensor::new(tb.shape(), gb).unwrap());
            accumulate(nodes, grads, *c, Tensor::new(tc.shape(), gc).unwrap());
            accumulate(nodes, grads, *d, Tensor::new(td.shape(), gd).unwrap());
        }
    }
}
