//! Parameter containers and composite layers built from tape primitives.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named view over a set of learnable arrays.
///
/// `bind` implementations must put vars on the tape in the same order as
/// `named_tensors` lists them; gradients are matched up by position.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Exponential moving estimates of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
    populated: bool,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.1;

    /// Mean 0, variance 1, usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum: Self::MOMENTUM,
            populated: true,
        }
    }

    /// Statistics that must be filled by a training pass (or loaded) before
    /// eval-mode use.
    pub fn unpopulated(channels: usize) -> Self {
        RunningStats {
            populated: false,
            ..Self::standard(channels)
        }
    }

    pub fn from_tensors(mean: Tensor, var: Tensor) -> Result<Self> {
        if mean.shape() != var.shape() || mean.ndim() != 1 {
            return Err(TensorError::dim(
                "RunningStats",
                format!("mean {:?} vs var {:?}", mean.shape(), var.shape()),
            ));
        }
        Ok(RunningStats {
            mean,
            var,
            momentum: Self::MOMENTUM,
            populated: true,
        })
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    pub fn update(&mut self, batch: &BatchStats) -> Result<()> {
        let c = self.mean.len();
        if batch.mean.len() != c || batch.var.len() != c {
            return Err(TensorError::dim(
                "RunningStats::update",
                format!("{c} channels vs batch stats of {}", batch.mean.len()),
            ));
        }
        let m = self.momentum;
        if self.populated {
            for (r, b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.var.data_mut().iter_mut().zip(&batch.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        } else {
            self.mean.data_mut().copy_from_slice(&batch.mean);
            self.var.data_mut().copy_from_slice(&batch.var);
            self.populated = true;
        }
        Ok(())
    }

    /// Eval-mode batch norm; fails on unpopulated statistics.
    pub fn apply(&self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        if !self.populated {
            return Err(TensorError::State(
                "batch norm in eval mode with unpopulated running statistics".into(),
            ));
        }
        tape.batch_norm_eval(x, gamma, beta, self.mean.data(), self.var.data())
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn normal<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

impl Parameters for Linear {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Multi-head self-attention projections for token width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `[N, N]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            query: Linear::normal(d, d, std, rng),
            key: Linear::normal(d, d, std, rng),
            value: Linear::normal(d, d, std, rng),
            output: Linear::normal(d, d, std, rng),
            heads,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            query: self.query.bind(tape, trainable),
            key: self.key.bind(tape, trainable),
            value: self.value.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
            heads: self.heads,
        }
    }
}

impl Parameters for AttentionParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("query", self.query.named_tensors())
            .chain(prefixed("key", self.key.named_tensors()))
            .chain(prefixed("value", self.value.named_tensors()))
            .chain(prefixed("output", self.output.named_tensors()))
            .collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("query", self.query.named_tensors_mut())
            .chain(prefixed_mut("key", self.key.named_tensors_mut()))
            .chain(prefixed_mut("value", self.value.named_tensors_mut()))
            .chain(prefixed_mut("output", self.output.named_tensors_mut()))
            .collect()
    }
}

impl AttentionVars {
    pub fn vars(&self) -> Vec<Var> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(|l| l.vars())
            .collect()
    }

    /// Scaled dot-product attention per head (scale `1/sqrt(d/h)`), heads
    /// concatenated and passed through the output projection.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<AttentionOutput> {
        let d = match *tape.shape(z) {
            [_, d] => d,
            ref s => {
                return Err(TensorError::dim(
                    "multihead_self_attention",
                    format!("tokens must be [N, d], got {s:?}"),
                ))
            }
        };
        if self.heads == 0 || d % self.heads != 0 {
            return Err(TensorError::Config(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let dh = d / self.heads;
        let q = self.query.forward(tape, z)?;
        let k = self.key.forward(tape, z)?;
        let v = self.value.forward(tape, z)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(logits)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let output = self.output.forward(tape, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Binds every tensor of `params` onto `tape` in `named_tensors` order.
pub fn bind_all<P: Parameters + ?Sized>(params: &P, tape: &mut Tape, trainable: bool) -> Vec<Var> {
    params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone(), trainable))
        .collect()
}
