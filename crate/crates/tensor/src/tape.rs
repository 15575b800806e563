//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to replay its adjoint. Nodes are appended in execution order, so the
//! node list is already a topological order and [`Tape::backward`] simply walks
//! it in reverse.

#![allow(clippy::needless_range_loop)]

use crate::conv::{self, ConvDims};
use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::pool;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope.
    LeakyRelu(f64),
    /// Exact (erf) form.
    Gelu,
}

impl Activation {
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu(0.01);

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        }
    }

    /// Derivative; the kink of relu-style activations takes the negative-side slope.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, the form folded into running estimates.
    pub var: Vec<f64>,
}

/// Saved state for the normalization adjoints.
#[derive(Debug)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Square(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow(Var, usize),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Activation(Var, Activation),
    Map(Var, fn(f64) -> f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    MaxPool(Var, Vec<usize>),
    AdaptiveAvgPool {
        x: Var,
        planes: usize,
        input: (usize, usize),
        output: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
        cache: NormCache,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Softmax(Var),
    NormalizeRows(Var, Vec<f64>),
    TopkSegments {
        x: Var,
        selected: Vec<usize>,
        k: usize,
    },
    SumRowsGrouped(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Narrow(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Activation(a, _)
            | Op::Map(a, _)
            | Op::MaxPool(a, _)
            | Op::Softmax(a)
            | Op::NormalizeRows(a, _)
            | Op::SumRowsGrouped(a, _) => vec![*a],
            Op::Concat(v) | Op::ConcatCols(v) => v.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::AdaptiveAvgPool { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::TopkSegments { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for later differentiation.
///
/// A tape is owned by one worker; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::dim(
                op,
                format!("expected a matrix, got {s:?}"),
            )),
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// Adds the vector `row` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&1);
        if self.shape(row) != [d] {
            return Err(TensorError::dim(
                "add_row",
                format!("{:?} vs row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.data(row).to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push("add_row", v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.matrix_dims("matmul", a)?;
        let (s2, c) = self.matrix_dims("matmul", b)?;
        if s != s2 {
            return Err(TensorError::dim(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            Mat::new(self.data(a), r, s),
            Mat::new(self.data(b), s, c),
            0.0,
            &mut out,
        );
        let v = Tensor::new(&[r, c], out)?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        self.push("transpose", v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a))
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(TensorError::dim(
                "narrow",
                format!("[{start}, {}) out of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let data = self.data(a)[start * inner..(start + len) * inner].to_vec();
        let v = Tensor::new(&out_shape, data)?;
        self.push("narrow", v, Op::Narrow(a, start))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(TensorError::dim(
                "slice_cols",
                format!("[{start}, {}) out of {c} columns", start + len),
            ));
        }
        let src = self.data(a);
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let v = Tensor::new(&[r, len], data)?;
        self.push("slice_cols", v, Op::SliceCols(a, start))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::dim(
                    "concat",
                    format!("{s:?} does not stack with trailing {tail:?}"),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(&shape, data)?;
        self.push("concat", v, Op::Concat(parts.to_vec()))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat_cols of nothing".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.matrix_dims("concat_cols", p)?);
        }
        let r = dims[0].0;
        if dims.iter().any(|d| d.0 != r) {
            return Err(TensorError::dim(
                "concat_cols",
                format!("row counts {dims:?}"),
            ));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(&[r, total], data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    /// `out.flat[i] = a.flat[index[i]]`; the adjoint scatter-adds.
    ///
    /// Covers permutations (patch flattening) and replication (tile upsampling).
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::dim(
                "gather",
                format!("index {bad} out of {n} elements"),
            ));
        }
        let src = self.data(a);
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push("gather", v, Op::Gather(a, index))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let v = self.value(a).map(|x| kind.apply(x));
        self.push("activation", v, Op::Activation(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::LEAKY_RELU)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Gelu)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push("map", v, Op::Map(a, df))
    }

    /// Same-padded, stride-1 cross-correlation.
    ///
    /// `x` is `[N, C_in, H, W]` (or `[C_in, H, W]`), `w` is
    /// `[C_out, C_in, k, k]` with odd `k`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, height, width) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(TensorError::dim("conv2d", format!("input {xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let (c_out, kernel) = match ws[..] {
            [o, i, kh, kw] if i == c_in && kh == kw && kh % 2 == 1 => (o, kh),
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("input {xs:?} vs weight {ws:?}"),
                ))
            }
        };
        if self.shape(b) != [c_out] {
            return Err(TensorError::dim(
                "conv2d",
                format!("bias {:?} for {c_out} filters", self.shape(b)),
            ));
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            height,
            width,
            kernel,
        };
        let out = conv::forward(self.data(x), self.data(w), self.data(b), &dims);
        let shape: Vec<usize> = if xs.len() == 3 {
            vec![c_out, height, width]
        } else {
            vec![batch, c_out, height, width]
        };
        let v = Tensor::new(&shape, out)?;
        self.push("conv2d", v, Op::Conv2d { x, w, b, dims })
    }

    /// Non-overlapping `window × window` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || window == 0 {
            return Err(TensorError::dim("max_pool2d", format!("input {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % window != 0 || w % window != 0 {
            return Err(TensorError::dim(
                "max_pool2d",
                format!("spatial {h}×{w} not divisible by window {window}"),
            ));
        }
        let planes = self.value(x).len() / (h * w);
        let (out, argmax) = pool::max_pool(self.data(x), planes, h, w, window);
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = h / window;
        shape[n - 1] = w / window;
        let v = Tensor::new(&shape, out)?;
        self.push("max_pool2d", v, Op::MaxPool(x, argmax))
    }

    /// Adaptive average pooling of the last two axes to `out_h × out_w`.
    /// Cell `(i, j)` averages rows `[⌊iH/out_h⌋, ⌈(i+1)H/out_h⌉)` and the
    /// analogous columns, for both down- and up-sizing.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(TensorError::dim(
                "adaptive_avg_pool2d",
                format!("input {s:?} to {out_h}×{out_w}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let out = pool::adaptive_avg_pool(self.data(x), planes, (h, w), (out_h, out_w));
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = out_h;
        shape[n - 1] = out_w;
        let v = Tensor::new(&shape, out)?;
        self.push(
            "adaptive_avg_pool2d",
            v,
            Op::AdaptiveAvgPool {
                x,
                planes,
                input: (h, w),
                output: (out_h, out_w),
            },
        )
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let (n, c, spatial) = match s[..] {
            [c, h, w] => (1, c, h * w),
            [n, c, h, w] => (n, c, h * w),
            [n, c] => (n, c, 1),
            _ => return Err(TensorError::dim("batch_norm", format!("input {s:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::dim(
                "batch_norm",
                format!(
                    "{c} channels vs gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, spatial))
    }

    fn bn_apply(
        &mut self,
        (x, gamma, beta): (Var, Var, Var),
        (n, c, spatial): (usize, usize, usize),
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let src = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                for j in off..off + spatial {
                    xhat[j] = (src[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                cache: NormCache { xhat, inv_std },
                batch_stats,
            },
        )
    }

    /// Training-mode batch norm: normalizes each channel over batch and
    /// spatial positions. Returns the batch statistics so the caller can fold
    /// them into its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, spatial) = self.bn_layout(x, gamma, beta)?;
        let count = (n * spatial) as f64;
        let src = self.data(x);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                mean[ch] += src[off..off + spatial].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                sq[ch] += src[off..off + spatial]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let unbiased: Vec<f64> = if count > 1.0 {
            sq.iter().map(|s| s / (count - 1.0)).collect()
        } else {
            biased.clone()
        };
        let out = self.bn_apply((x, gamma, beta), (n, c, spatial), &mean, &biased, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let layout = self.bn_layout(x, gamma, beta)?;
        if mean.len() != layout.1 || var.len() != layout.1 {
            return Err(TensorError::dim(
                "batch_norm",
                format!("{} channels vs stats of length {}", layout.1, mean.len()),
            ));
        }
        self.bn_apply((x, gamma, beta), layout, mean, var, false)
    }

    /// Normalizes over the last axis (biased variance, eps 1e-5), then applies
    /// the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::dim(
                "layer_norm",
                format!(
                    "input {:?} vs gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
            inv_std.push(is);
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache: NormCache { xhat, inv_std },
            },
        )
    }

    /// Softmax over the last axis, computed with the row maximum subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", v, Op::Softmax(x))
    }

    /// Scales each row (last axis) to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.len() / d);
        for row in v.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|a| *a /= norm);
            }
            norms.push(norm);
        }
        self.push("normalize_rows", v, Op::NormalizeRows(x, norms))
    }

    /// For each row of `x` (`[R, S·P]`), split the columns into `segments`
    /// contiguous blocks of `P` and sum the `k` largest values of each block.
    /// Output is `[R, segments]`. Ties go to the lower column. The selection is
    /// held constant in the adjoint.
    pub fn topk_segment_sum(&mut self, x: Var, segments: usize, k: usize) -> Result<Var> {
        let (r, cols) = self.matrix_dims("topk_segment_sum", x)?;
        if segments == 0 || cols % segments != 0 {
            return Err(TensorError::dim(
                "topk_segment_sum",
                format!("{cols} columns into {segments} segments"),
            ));
        }
        let p = cols / segments;
        if k == 0 || k > p {
            return Err(TensorError::Config(format!(
                "k = {k} must lie in 1..={p} (segment size)"
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * segments);
        let mut selected = Vec::with_capacity(r * segments * k);
        let mut scratch = Vec::with_capacity(p);
        for i in 0..r {
            for s in 0..segments {
                let base = i * cols + s * p;
                let seg = &src[base..base + p];
                top_k_indices(seg, k, &mut scratch);
                out.push(scratch.iter().map(|&j| seg[j]).sum());
                selected.extend(scratch.iter().map(|&j| base + j));
            }
        }
        let v = Tensor::new(&[r, segments], out)?;
        self.push("topk_segment_sum", v, Op::TopkSegments { x, selected, k })
    }

    /// Sums consecutive groups of `group` rows: `[R, C] -> [R / group, C]`.
    pub fn sum_rows_grouped(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("sum_rows_grouped", x)?;
        if group == 0 || r % group != 0 {
            return Err(TensorError::dim(
                "sum_rows_grouped",
                format!("{r} rows in groups of {group}"),
            ));
        }
        let src = self.data(x);
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let dst = &mut out[(i / group) * c..][..c];
            for (a, b) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *a += b;
            }
        }
        let v = Tensor::new(&[r / group, c], out)?;
        self.push("sum_rows_grouped", v, Op::SumRowsGrouped(x, group))
    }

    /// Mean softmax cross-entropy of `logits` (`[Q, C]`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (q, c) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != q {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{q} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("label {bad} out of {c} classes"),
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(f64::MIN_POSITIVE).ln();
        }
        let v = Tensor::scalar(loss / q as f64);
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `root`, accumulating adjoints into every
    /// reachable node that requires a gradient. A tape supports one sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage(
                "backward already ran on this tape".into(),
            ));
        }
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoints(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                let node = &mut self.nodes[v.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).expect("adjoint matches operand shape")
    }

    fn adjoints(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = g.data();
        let mut out: Vec<(Var, Tensor)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    out.push((*a, self.like(*a, d)));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    out.push((*b, self.like(*b, d)));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*row) {
                    let d = self.value(*row).len();
                    let mut acc = vec![0.0; d];
                    for chunk in gd.chunks(d) {
                        for (s, x) in acc.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    out.push((*row, self.like(*row, acc)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| x * c))),
            Op::Sum(a) => {
                let s = gd[0];
                out.push((*a, Tensor::full(self.shape(*a), s)));
            }
            Op::Square(a) => {
                let d = gd
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::MatMul(a, b) => {
                let (r, s) = self.matrix_dims("matmul", *a).expect("matrix");
                let c = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut d = vec![0.0; r * s];
                    gemm(
                        Mat::new(gd, r, c),
                        Mat::new(self.data(*b), s, c).t(),
                        0.0,
                        &mut d,
                    );
                    out.push((*a, self.like(*a, d)));
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; s * c];
                    gemm(
                        Mat::new(self.data(*a), r, s).t(),
                        Mat::new(gd, r, c),
                        0.0,
                        &mut d,
                    );
                    out.push((*b, self.like(*b, d)));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.matrix_dims("transpose", *a).expect("matrix");
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::Reshape(a) => out.push((*a, self.like(*a, gd.to_vec()))),
            Op::Narrow(a, start) => {
                let mut d = vec![0.0; self.value(*a).len()];
                let inner: usize = self.shape(*a)[1..].iter().product();
                d[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                out.push((*a, self.like(*a, d)));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.matrix_dims("slice_cols", *a).expect("matrix");
                let len = gd.len() / r;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        out.push((p, self.like(p, gd[off..off + n].to_vec())));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = *g.shape().last().expect("matrix");
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.matrix_dims("concat_cols", p).expect("matrix");
                    if self.needs(p) {
                        let d = (0..r)
                            .flat_map(|i| gd[i * total + off..i * total + off + c].iter().copied())
                            .collect();
                        out.push((p, self.like(p, d)));
                    }
                    off += c;
                }
            }
            Op::Gather(a, index) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (&j, &x) in index.iter().zip(gd) {
                    d[j] += x;
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::Activation(a, kind) => {
                let d = gd
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * kind.derivative(x))
                    .collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::Map(a, df) => {
                let d = gd
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * df(x))
                    .collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::Conv2d { x, w, b, dims } => {
                let grads = conv::backward(self.data(*x), self.data(*w), gd, dims, self.needs(*x));
                if let Some(dx) = grads.dx {
                    out.push((*x, self.like(*x, dx)));
                }
                if self.needs(*w) {
                    out.push((*w, self.like(*w, grads.dw)));
                }
                if self.needs(*b) {
                    out.push((*b, self.like(*b, grads.db)));
                }
            }
            Op::MaxPool(a, argmax) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (&j, &x) in argmax.iter().zip(gd) {
                    d[j] += x;
                }
                out.push((*a, self.like(*a, d)));
            }
            Op::AdaptiveAvgPool {
                x,
                planes,
                input,
                output,
            } => {
                let d = pool::adaptive_avg_pool_backward(gd, *planes, *input, *output);
                out.push((*x, self.like(*x, d)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                cache,
                batch_stats,
            } => {
                let c = self.value(*gamma).len();
                let n = self.value(*x).len() / (c * spatial);
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            dgamma[ch] += gd[j] * cache.xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let count = (n * spatial) as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * spatial;
                            let scale = gam[ch] * cache.inv_std[ch];
                            for j in off..off + spatial {
                                dx[j] = if *batch_stats {
                                    scale
                                        * (gd[j]
                                            - dbeta[ch] / count
                                            - cache.xhat[j] * dgamma[ch] / count)
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                    out.push((*x, self.like(*x, dx)));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, self.like(*gamma, dgamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, self.like(*beta, dbeta)));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for (r, &is) in cache.inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = &cache.xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dx[r * d + j] =
                            is * (dxh - sum_dxh / d as f64 - xh[j] * sum_dxh_xh / d as f64);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, self.like(*x, dx)));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, self.like(*gamma, dgamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, self.like(*beta, dbeta)));
                }
            }
            Op::Softmax(a) => {
                let d = *self.shape(*a).last().expect("non-scalar");
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, self.like(*a, dx)));
            }
            Op::NormalizeRows(a, norms) => {
                let d = *self.shape(*a).last().expect("non-scalar");
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out.push((*a, self.like(*a, dx)));
            }
            Op::TopkSegments { x, selected, k } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (cell, &gv) in gd.iter().enumerate() {
                    for &j in &selected[cell * k..(cell + 1) * k] {
                        dx[j] += gv;
                    }
                }
                out.push((*x, self.like(*x, dx)));
            }
            Op::SumRowsGrouped(a, group) => {
                let (r, c) = self.matrix_dims("sum_rows_grouped", *a).expect("matrix");
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c..(i + 1) * c].copy_from_slice(&gd[(i / group) * c..][..c]);
                }
                out.push((*a, self.like(*a, dx)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let q = labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &l) in dx.chunks_mut(c).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gd[0] / q);
                }
                out.push((*logits, self.like(*logits, dx)));
            }
        }
        out
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Indices of the `k` largest entries, ordered by value descending then index
/// ascending.
pub fn top_k_indices(values: &[f64], k: usize, out: &mut Vec<usize>) {
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    out.clear();
    out.extend(0..values.len());
    if k < out.len() {
        out.select_nth_unstable_by(k - 1, cmp);
        out.truncate(k);
    }
    out.sort_unstable_by(cmp);
}
