//! Wengert tape: every op appends a node holding its output value and the
//! handles of its inputs. Node indices are therefore a topological order and
//! backward is a single reverse sweep.

use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{check_shape, Tensor};
use crate::Real;

/// Guard below which an L2 norm is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on one [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `scale·v` for `v ≥ 0`, `scale·slope·v` otherwise.
    LeakyRelu {
        slope: f64,
        scale: f64,
    },
    Relu,
    Sigmoid,
    Tanh,
    /// `ln(1 + eʸ)`, evaluated stably.
    Softplus,
}

impl Activation {
    /// Leaky ReLU with slope 0.2 and gain √2, as used in the perturbation generator.
    pub const FUSED_LEAKY: Activation = Activation::LeakyRelu {
        slope: 0.2,
        scale: std::f64::consts::SQRT_2,
    };

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope, scale } => {
                if v >= 0.0 {
                    scale * v
                } else {
                    scale * slope * v
                }
            }
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Softplus => v.max(0.0) + (-v.abs()).exp().ln_1p(),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalar(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Conv2d(Var, Var, ConvGeometry),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    SumSquares(Var),
    Norm(Var),
    Normalize(Var),
    Cosine(Var, Var),
    Reshape(Var),
    Transpose(Var),
    GlobalAvgPool(Var),
    Upsample2x(Var),
    ProjectBall { raw: Var, lo: Vec<T>, hi: Vec<T> },
    Clamp(Var, T, T),
    Log(Var),
    Exp(Var),
    LogSoftmaxRows(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. A tape is confined to one worker;
/// separate samples use separate tapes.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves -------------------------------------------------------

    /// Copy a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            grad: None,
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        check_shape(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "input" });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.nodes.push(Node {
            shape: vec![1],
            value: vec![v],
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a node; meant for scalar losses.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Clear gradients accumulated on leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        op: Op<T>,
        shape: Vec<usize>,
        value: Vec<T>,
        name: &'static str,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self
            .inputs_of(&op)
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddChannelBias(a, b)
            | Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Conv2d(a, b, _)
            | Op::Dot(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Act(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::Norm(a)
            | Op::Normalize(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::GlobalAvgPool(a)
            | Op::Upsample2x(a)
            | Op::Clamp(a, _, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::LogSoftmaxRows(a) => vec![*a],
            Op::ProjectBall { raw, .. } => vec![*raw],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, name)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch(
                "mul_scalar",
                format!("scale has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.item(s);
        let value = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, s), shape, value, "mul_scalar")
    }

    /// Add `bias[c]` to every element of channel `c` of `x[c×…]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(bias) != [c] {
            return Err(mismatch(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let plane = self.value(x).len() / c;
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Op::AddChannelBias(x, bias),
            shape,
            value,
            "add_channel_bias",
        )
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        self.unary(a, Op::Act(a, kind), "activation", |x| {
            T::lit(kind.apply(x.as_f64()))
        })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), "clamp", |x| x.max(lo).min(hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), "log", |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |x| x.exp())
    }

    /// `clamp(raw, max(center−eps, 0), min(center+eps, 1))`: the ℓ∞ ball around
    /// `center` intersected with the unit box. Gradient passes only where the
    /// raw value was not clipped.
    pub fn project_linf(&mut self, raw: Var, center: &[T], eps: T) -> Result<Var> {
        if self.value(raw).len() != center.len() {
            return Err(mismatch(
                "project_linf",
                format!(
                    "{} raw values vs {} centre values",
                    self.value(raw).len(),
                    center.len()
                ),
            ));
        }
        let (lo, hi): (Vec<T>, Vec<T>) = center
            .iter()
            .map(|&c| ((c - eps).max(T::zero()), (c + eps).min(T::one())))
            .unzip();
        let value = self
            .value(raw)
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(&r, (&l, &h))| r.max(l).min(h))
            .collect();
        let shape = self.shape(raw).to_vec();
        self.push(
            Op::ProjectBall { raw, lo, hi },
            shape,
            value,
            "project_linf",
        )
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} · {sb:?}")));
        }
        let value = kernels::matmul(sa[0], sa[1], sb[1], self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], value, "matmul")
    }

    /// `w[m×n] · x[n] → [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(mismatch("matvec", format!("{sw:?} · {sx:?}")));
        }
        let value = kernels::matmul(sw[0], sw[1], 1, self.value(w), self.value(x));
        self.push(Op::MatVec(w, x), vec![sw[0]], value, "matvec")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("{s:?} is not a matrix")));
        }
        let value = kernels::transpose(s[0], s[1], self.value(a));
        self.push(Op::Transpose(a), vec![s[1], s[0]], value, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape, self.value(a).len())?;
        let value = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), value, "reshape")
    }

    /// Cross-correlation of `x[cin×h×w]` with `w[cout×cin×k×k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d stride must be ≥ 1".into(),
            ));
        }
        let k = sw[2];
        let padded = sx[1].min(sx[2]) + 2 * pad;
        if k > padded {
            return Err(TensorError::KernelTooLarge { kernel: k, padded });
        }
        let g = ConvGeometry::new(sx[0], sx[1], sx[2], sw[0], k, stride, pad)
            .expect("geometry validated above");
        let value = kernels::conv2d_forward(&g, self.value(x), self.value(w));
        self.push(
            Op::Conv2d(x, w, g),
            vec![g.cout, g.ho, g.wo],
            value,
            "conv2d",
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(mismatch("global_avg_pool", format!("{s:?} is not C×H×W")));
        }
        let plane = s[1] * s[2];
        let inv = T::lit(1.0 / plane as f64);
        let value = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Op::GlobalAvgPool(x), vec![s[0]], value, "global_avg_pool")
    }

    /// Nearest-neighbour ×2 upsampling of `x[c×h×w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", format!("{s:?} is not C×H×W")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut value = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    value[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            Op::Upsample2x(x),
            vec![c, 2 * h, 2 * w],
            value,
            "upsample2x",
        )
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![v], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::lit(self.value(a).len() as f64);
        let v = self.value(a).iter().copied().sum::<T>() / n;
        self.push(Op::Mean(a), vec![1], vec![v], "mean")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = dot(self.value(a), self.value(b));
        self.push(Op::Dot(a, b), vec![1], vec![v], "dot")
    }

    /// Squared L2 norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let v = dot(self.value(a), self.value(a));
        self.push(Op::SumSquares(a), vec![1], vec![v], "sum_squares")
    }

    /// Unsquared L2 norm; the subgradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let v = dot(self.value(a), self.value(a)).sqrt();
        self.push(Op::Norm(a), vec![1], vec![v], "norm")
    }

    /// `v / ‖v‖₂`, failing with [`TensorError::DegenerateEmbedding`] when `‖v‖₂ ≤ 1e-12`.
    pub fn normalize_l2(&mut self, a: Var) -> Result<Var> {
        let n = dot(self.value(a), self.value(a)).sqrt();
        if n.as_f64() <= NORM_EPS {
            return Err(TensorError::DegenerateEmbedding {
                norm: n.as_f64(),
                eps: NORM_EPS,
            });
        }
        let value = self.value(a).iter().map(|&x| x / n).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Normalize(a), shape, value, "normalize_l2")
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (dot(va, va).sqrt(), dot(vb, vb).sqrt());
        for n in [na, nb] {
            if n.as_f64() <= NORM_EPS {
                return Err(TensorError::DegenerateEmbedding {
                    norm: n.as_f64(),
                    eps: NORM_EPS,
                });
            }
        }
        let c = dot(va, vb) / (na * nb);
        self.push(Op::Cosine(a, b), vec![1], vec![c], "cosine_similarity")
    }

    /// Row-wise `x − logsumexp(x)` of a matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(mismatch(
                "log_softmax_rows",
                format!("{s:?} is not a matrix"),
            ));
        }
        let mut value = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(a).chunks(s[1]) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            value.extend(row.iter().map(|&x| x - lse));
        }
        self.push(Op::LogSoftmaxRows(a), s, value, "log_softmax_rows")
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`]; interior gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with_seed(loss, &[T::one()])
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `out`.
    pub fn backward_with_seed(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(mismatch(
                "backward",
                format!(
                    "seed has {} elements, output has {}",
                    seed.len(),
                    self.value(out).len()
                ),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(TensorError::Detached);
        }
        for n in &mut self.nodes[..=out.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[out.0].grad, seed);
        for i in (0..=out.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (var, contrib) in contribs {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.nodes[var.0].grad, &contrib);
                }
            }
        }
        for n in &self.nodes[..=out.0] {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input that needs a gradient.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, zip_map(g, self.value(*b), |x, y| x * y)));
                }
                if self.needs(*b) {
                    out.push((*b, zip_map(g, self.value(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::MulScalar(a, s) => {
                let sv = self.item(*s);
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|&x| x * sv).collect()));
                }
                if self.needs(*s) {
                    out.push((*s, vec![dot(g, self.value(*a))]));
                }
            }
            Op::AddChannelBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    let plane = g.len() / c;
                    out.push((
                        *b,
                        g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect(),
                    ));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bt = kernels::transpose(k, n, self.value(*b));
                    out.push((*a, kernels::matmul(m, n, k, g, &bt)));
                }
                if self.needs(*b) {
                    let at = kernels::transpose(m, k, self.value(*a));
                    out.push((*b, kernels::matmul(k, m, n, &at, g)));
                }
            }
            Op::MatVec(w, x) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.needs(*w) {
                    out.push((*w, kernels::matmul(m, 1, n, g, self.value(*x))));
                }
                if self.needs(*x) {
                    out.push((*x, kernels::matmul(1, m, n, g, self.value(*w))));
                }
            }
            Op::Conv2d(x, w, geom) => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::Act(a, kind) => {
                let grad = match *kind {
                    Activation::LeakyRelu { slope, scale } => {
                        let (pos, neg) = (T::lit(scale), T::lit(scale * slope));
                        zip_map(g, self.value(*a), |gi, x| {
                            if x >= T::zero() {
                                gi * pos
                            } else {
                                gi * neg
                            }
                        })
                    }
                    Activation::Relu => zip_map(g, self.value(*a), |gi, x| {
                        if x > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                    Activation::Sigmoid => zip_map(g, &node.value, |gi, y| gi * y * (T::one() - y)),
                    Activation::Tanh => zip_map(g, &node.value, |gi, y| gi * (T::one() - y * y)),
                    Activation::Softplus => {
                        zip_map(g, self.value(*a), |gi, x| gi * T::lit(sigmoid(x.as_f64())))
                    }
                };
                out.push((*a, grad));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                out.push((*a, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::Dot(a, b) => {
                if self.needs(*a) {
                    out.push((*a, self.value(*b).iter().map(|&y| y * g[0]).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, self.value(*a).iter().map(|&x| x * g[0]).collect()));
                }
            }
            Op::SumSquares(a) => {
                let two = T::lit(2.0) * g[0];
                out.push((*a, self.value(*a).iter().map(|&x| x * two).collect()));
            }
            Op::Norm(a) => {
                let n = node.value[0];
                let grad = if n > T::zero() {
                    self.value(*a).iter().map(|&x| g[0] * x / n).collect()
                } else {
                    vec![T::zero(); self.value(*a).len()]
                };
                out.push((*a, grad));
            }
            Op::Normalize(a) => {
                let xa = self.value(*a);
                let n = dot(xa, xa).sqrt();
                let y = &node.value;
                let yg = dot(y, g);
                out.push((*a, zip_map(g, y, |gi, yi| (gi - yi * yg) / n)));
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (dot(va, va).sqrt(), dot(vb, vb).sqrt());
                let c = node.value[0];
                if self.needs(*a) {
                    let grad = zip_map(va, vb, |x, y| g[0] * (y / (na * nb) - c * x / (na * na)));
                    out.push((*a, grad));
                }
                if self.needs(*b) {
                    let grad = zip_map(vb, va, |y, x| g[0] * (x / (na * nb) - c * y / (nb * nb)));
                    out.push((*b, grad));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                out.push((*a, kernels::transpose(s[1], s[0], g)));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[1] * s[2];
                let inv = T::lit(1.0 / plane as f64);
                let mut grad = Vec::with_capacity(s[0] * plane);
                for &gc in g {
                    grad.extend(std::iter::repeat_n(gc * inv, plane));
                }
                out.push((*x, grad));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut grad = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            grad[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                out.push((*x, grad));
            }
            Op::ProjectBall { raw, lo, hi } => {
                let grad = self
                    .value(*raw)
                    .iter()
                    .zip(g)
                    .zip(lo.iter().zip(hi))
                    .map(|((&r, &gi), (&l, &h))| if r >= l && r <= h { gi } else { T::zero() })
                    .collect();
                out.push((*raw, grad));
            }
            Op::Clamp(a, lo, hi) => {
                let grad = zip_map(g, self.value(*a), |gi, x| {
                    if x >= *lo && x <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                });
                out.push((*a, grad));
            }
            Op::Log(a) => out.push((*a, zip_map(g, self.value(*a), |gi, x| gi / x))),
            Op::Exp(a) => out.push((*a, zip_map(g, &node.value, |gi, y| gi * y))),
            Op::LogSoftmaxRows(a) => {
                let cols = node.shape[1];
                let mut grad = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(cols).zip(node.value.chunks(cols)) {
                    let gs: T = grow.iter().copied().sum();
                    grad.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| gi - yi.exp() * gs));
                }
                out.push((*a, grad));
            }
        }
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
