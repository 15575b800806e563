//! Finite-difference checks of every tape primitive, runnable outside the
//! test harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::nn::AttentionParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Collects named grad-check reports under one configuration.
pub struct Suite {
    pub cfg: GradCheckConfig,
    pub checks: Vec<NamedCheck>,
}

impl Suite {
    pub fn new(cfg: GradCheckConfig) -> Self {
        Suite {
            cfg,
            checks: Vec::new(),
        }
    }

    pub fn check<F>(&mut self, name: &str, f: F, x: &Tensor) -> Result<()>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let report = grad_check(f, x, &self.cfg)?;
        self.checks.push(NamedCheck {
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed)
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `y` to a scalar through fixed random weights so no adjoint is
/// trivially zero.
pub fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(uniform(t.shape(y), seed ^ 0xabcd));
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Every primitive on random inputs in [-1, 1], default tolerance.
pub fn primitive_checks() -> Result<Suite> {
    let mut s = Suite::new(GradCheckConfig::default());
    // elementwise_and_linear
    {
        let a = uniform(&[3, 4], 1);
        let b = uniform(&[3, 4], 2);
        let m = uniform(&[4, 2], 3);
        let row = uniform(&[4], 4);
        s.check(
            "add",
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.add(x, c)?;
                weighted_sum(t, y, 5)
            },
            &a,
        )?;
        s.check(
            "sub",
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.sub(c, x)?;
                weighted_sum(t, y, 5)
            },
            &a,
        )?;
        s.check(
            "mul",
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.mul(x, c)?;
                weighted_sum(t, y, 5)
            },
            &a,
        )?;
        s.check(
            "square",
            |t, x| {
                let y = t.square(x)?;
                weighted_sum(t, y, 5)
            },
            &a,
        )?;
        s.check(
            "scale",
            |t, x| {
                let y = t.scale(x, -2.5)?;
                weighted_sum(t, y, 5)
            },
            &a,
        )?;
        s.check(
            "mean",
            |t, x| {
                let y = t.square(x)?;
                t.mean(y)
            },
            &a,
        )?;
        s.check(
            "add_row/a",
            |t, x| {
                let r = t.constant(row.clone());
                let y = t.add_row(x, r)?;
                weighted_sum(t, y, 6)
            },
            &a,
        )?;
        s.check(
            "add_row/row",
            |t, r| {
                let x = t.constant(a.clone());
                let y = t.add_row(x, r)?;
                weighted_sum(t, y, 6)
            },
            &row,
        )?;
        s.check(
            "matmul/a",
            |t, x| {
                let c = t.constant(m.clone());
                let y = t.matmul(x, c)?;
                weighted_sum(t, y, 7)
            },
            &a,
        )?;
        s.check(
            "matmul/b",
            |t, x| {
                let c = t.constant(a.clone());
                let y = t.matmul(c, x)?;
                weighted_sum(t, y, 7)
            },
            &m,
        )?;
        s.check(
            "transpose",
            |t, x| {
                let y = t.transpose(x)?;
                weighted_sum(t, y, 8)
            },
            &a,
        )?;
        s.check(
            "reshape",
            |t, x| {
                let y = t.reshape(x, &[2, 6])?;
                weighted_sum(t, y, 8)
            },
            &a,
        )?;
        s.check(
            "narrow",
            |t, x| {
                let y = t.narrow(x, 1, 2)?;
                weighted_sum(t, y, 9)
            },
            &a,
        )?;
        s.check(
            "slice_cols",
            |t, x| {
                let y = t.slice_cols(x, 1, 2)?;
                weighted_sum(t, y, 9)
            },
            &a,
        )?;
        s.check(
            "concat",
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.concat(&[c, x, x])?;
                weighted_sum(t, y, 10)
            },
            &a,
        )?;
        s.check(
            "concat_cols",
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.concat_cols(&[x, c, x])?;
                weighted_sum(t, y, 10)
            },
            &a,
        )?;
        s.check(
            "gather",
            |t, x| {
                let y = t.gather(x, vec![0, 5, 5, 11, 3, 0], &[2, 3])?;
                weighted_sum(t, y, 11)
            },
            &a,
        )?;
    }

    // activations
    {
        // keep clear of the relu kink at 0
        let x = uniform(&[20], 12).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        s.check(
            "relu",
            |t, x| {
                let y = t.relu(x)?;
                weighted_sum(t, y, 13)
            },
            &x,
        )?;
        s.check(
            "leaky_relu",
            |t, x| {
                let y = t.leaky_relu(x)?;
                weighted_sum(t, y, 13)
            },
            &x,
        )?;
        s.check(
            "gelu",
            |t, x| {
                let y = t.gelu(x)?;
                weighted_sum(t, y, 13)
            },
            &x,
        )?;
        s.check(
            "map",
            |t, x| {
                let y = t.map(x, f64::sin, f64::cos)?;
                weighted_sum(t, y, 13)
            },
            &x,
        )?;
    }

    // convolution_and_pooling
    {
        let x = uniform(&[2, 3, 6, 6], 20);
        let w = uniform(&[4, 3, 3, 3], 21);
        let b = uniform(&[4], 22);
        s.check(
            "conv2d/x",
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv2d(x, w, b)?;
                weighted_sum(t, y, 23)
            },
            &x,
        )?;
        s.check(
            "conv2d/w",
            |t, w| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.conv2d(x, w, b)?;
                weighted_sum(t, y, 23)
            },
            &w,
        )?;
        s.check(
            "conv2d/b",
            |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv2d(x, w, b)?;
                weighted_sum(t, y, 23)
            },
            &b,
        )?;
        s.check(
            "max_pool2d",
            |t, x| {
                let y = t.max_pool2d(x, 2)?;
                weighted_sum(t, y, 24)
            },
            &x,
        )?;
        s.check(
            "adaptive_avg_pool2d/down",
            |t, x| {
                let y = t.adaptive_avg_pool2d(x, 4, 4)?;
                weighted_sum(t, y, 25)
            },
            &x,
        )?;
        s.check(
            "adaptive_avg_pool2d/up",
            |t, x| {
                let y = t.adaptive_avg_pool2d(x, 9, 7)?;
                weighted_sum(t, y, 25)
            },
            &x,
        )?;
        // composite conv -> pool -> sum
        let single = uniform(&[3, 6, 6], 26);
        s.check(
            "conv->pool->sum",
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv2d(x, w, b)?;
                let p = t.max_pool2d(y, 2)?;
                t.sum(p)
            },
            &single,
        )?;
    }

    // normalization
    {
        let x = uniform(&[3, 2, 3, 3], 30);
        let g = uniform(&[2], 31);
        let b = uniform(&[2], 32);
        s.check(
            "batch_norm/x",
            |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let (y, _) = t.batch_norm_train(x, g, b)?;
                weighted_sum(t, y, 33)
            },
            &x,
        )?;
        s.check(
            "batch_norm/gamma",
            |t, g| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let (y, _) = t.batch_norm_train(x, g, b)?;
                weighted_sum(t, y, 33)
            },
            &g,
        )?;
        s.check(
            "batch_norm/beta",
            |t, b| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                let (y, _) = t.batch_norm_train(x, g, b)?;
                weighted_sum(t, y, 33)
            },
            &b,
        )?;
        s.check(
            "batch_norm_eval/x",
            |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.batch_norm_eval(x, g, b, &[0.1, -0.3], &[0.5, 2.0])?;
                weighted_sum(t, y, 34)
            },
            &x,
        )?;

        let z = uniform(&[4, 6], 35);
        let lg = uniform(&[6], 36);
        let lb = uniform(&[6], 37);
        s.check(
            "layer_norm/x",
            |t, x| {
                let (g, b) = (t.constant(lg.clone()), t.constant(lb.clone()));
                let y = t.layer_norm(x, g, b)?;
                weighted_sum(t, y, 38)
            },
            &z,
        )?;
        s.check(
            "layer_norm/gamma",
            |t, g| {
                let (x, b) = (t.constant(z.clone()), t.constant(lb.clone()));
                let y = t.layer_norm(x, g, b)?;
                weighted_sum(t, y, 38)
            },
            &lg,
        )?;
        s.check(
            "layer_norm/beta",
            |t, b| {
                let (x, g) = (t.constant(z.clone()), t.constant(lg.clone()));
                let y = t.layer_norm(x, g, b)?;
                weighted_sum(t, y, 38)
            },
            &lb,
        )?;
        s.check(
            "softmax",
            |t, x| {
                let y = t.softmax(x)?;
                weighted_sum(t, y, 39)
            },
            &z,
        )?;
        s.check(
            "normalize_rows",
            |t, x| {
                let y = t.normalize_rows(x)?;
                weighted_sum(t, y, 40)
            },
            &z,
        )?;
    }

    // selection_and_loss
    {
        let x = uniform(&[3, 12], 50);
        s.check(
            "topk_segment_sum",
            |t, x| {
                let y = t.topk_segment_sum(x, 3, 2)?;
                weighted_sum(t, y, 51)
            },
            &x,
        )?;
        s.check(
            "sum_rows_grouped",
            |t, x| {
                let y = t.sum_rows_grouped(x, 3)?;
                weighted_sum(t, y, 52)
            },
            &x,
        )?;
        let logits = uniform(&[4, 3], 53);
        s.check(
            "cross_entropy",
            |t, x| t.cross_entropy(x, &[0, 2, 1, 2]),
            &logits,
        )?;
    }

    // attention
    {
        let mut r = ChaCha8Rng::seed_from_u64(60);
        let p = AttentionParams::new(4, 2, 0.5, &mut r)?;
        let z = uniform(&[3, 4], 61);
        s.check(
            "msa/z",
            |t, x| {
                let o = p.bind(t, false).forward(t, x)?;
                weighted_sum(t, o.output, 62)
            },
            &z,
        )?;
        s.check(
            "msa/query.weight",
            |t, w| {
                let mut vars = p.bind(t, false);
                vars.query.weight = w;
                let zv = t.constant(z.clone());
                let o = vars.forward(t, zv)?;
                weighted_sum(t, o.output, 62)
            },
            &p.query.weight,
        )?;
    }
    Ok(s)
}
