#![allow(clippy::needless_range_loop)]

use ldca_tensor::nn::{AttentionParams, Linear, RunningStats};
use ldca_tensor::{Activation, Tape, Tensor, TensorError, NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = t.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let ai = t.matmul(a, i).unwrap();
    assert_eq!(t.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ab = t.matmul(a, b).unwrap();
    assert_eq!(t.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);

    let x = t.constant(Tensor::zeros(&[2, 3]));
    let y = t.constant(Tensor::zeros(&[4, 2]));
    match t.matmul(x, y) {
        Err(TensorError::Dimension { detail, .. }) => {
            assert!(
                detail.contains("[2, 3]") && detail.contains("[4, 2]"),
                "{detail}"
            )
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

/// Direct four-loop cross-correlation with zero padding 1.
fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let mut out = vec![0.0; c_out * h * wd];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b.data()[o];
                for c in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            s += w.data()[((o * c_in + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 5, 5], 2.5));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b).unwrap();
    let v = t.value(y);
    assert_eq!(v.shape(), &[1, 5, 5]);
    for yy in 1..4 {
        for xx in 1..4 {
            assert_eq!(v.data()[yy * 5 + xx], 9.0 * 2.5);
        }
    }
    // corner sees 4 in-bounds taps
    assert_eq!(v.data()[0], 4.0 * 2.5);

    let mut r = rng(1);
    let img = Tensor::randn(&[2, 6, 6], 1.0, &mut r);
    let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
    delta.data_mut()[4] = 1.0; // out 0 <- in 0 center
    delta.data_mut()[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 center
    let x = t.constant(img.clone());
    let w = t.constant(delta);
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.conv2d(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), img.data());

    let bad_w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b1 = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        t.conv2d(x, bad_w, b1),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn conv2d_matches_four_loop_reference() {
    let mut r = rng(7);
    for (c_in, c_out, h, w) in [(2, 3, 5, 5), (4, 4, 8, 8), (1, 2, 3, 7), (3, 1, 8, 6)] {
        let x = Tensor::rand_uniform(&[c_in, h, w], -1.0, 1.0, &mut r);
        let k = Tensor::rand_uniform(&[c_out, c_in, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[c_out], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, kv, bv) = (
            t.constant(x.clone()),
            t.constant(k.clone()),
            t.constant(b.clone()),
        );
        let y = t.conv2d(xv, kv, bv).unwrap();
        assert!(close(t.value(y).data(), &conv_reference(&x, &k, &b), 1e-12));
    }
}

#[test]
fn conv2d_batched_equals_per_image() {
    let mut r = rng(8);
    let x = Tensor::randn(&[3, 2, 6, 6], 1.0, &mut r);
    let k = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let mut t = Tape::new();
    let (xv, kv, bv) = (
        t.constant(x.clone()),
        t.constant(k.clone()),
        t.constant(b.clone()),
    );
    let y = t.conv2d(xv, kv, bv).unwrap();
    for n in 0..3 {
        let img = Tensor::new(&[2, 6, 6], x.data()[n * 72..(n + 1) * 72].to_vec()).unwrap();
        let expect = conv_reference(&img, &k, &b);
        assert!(close(
            &t.value(y).data()[n * 144..(n + 1) * 144],
            &expect,
            1e-12
        ));
    }
}

#[test]
fn max_pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.max_pool2d(x, 2).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);

    let c = t.constant(Tensor::full(&[2, 4, 4], -1.5));
    let y = t.max_pool2d(c, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == -1.5));

    let big = t.constant(Tensor::zeros(&[1, 84, 84]));
    let y = t.max_pool2d(big, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 42, 42]);

    let odd = t.constant(Tensor::zeros(&[1, 5, 4]));
    assert!(matches!(
        t.max_pool2d(odd, 2),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1, 2, 2], vec![3.0, 1.0, 3.0, 3.0]).unwrap());
    let y = t.max_pool2d(x, 2).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_avg_pool_examples() {
    let mut t = Tape::new();
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let x = t.constant(Tensor::new(&[1, 4, 4], data).unwrap());
    let y = t.adaptive_avg_pool2d(x, 2, 2).unwrap();
    // quadrant means of 0..16 laid out row-major
    assert_eq!(t.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);

    let x = t.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.adaptive_avg_pool2d(x, 4, 4).unwrap();
    #[rustfmt::skip]
    let expect = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(t.value(y).data(), &expect);

    let mut r = rng(3);
    let v = Tensor::randn(&[3, 5, 7], 1.0, &mut r);
    let x = t.constant(v.clone());
    let y = t.adaptive_avg_pool2d(x, 5, 7).unwrap();
    assert_eq!(t.value(y), &v);
}

#[test]
fn activation_examples() {
    let relu = Activation::Relu;
    assert_eq!(relu.apply(-3.0), 0.0);
    assert_eq!(relu.apply(2.0), 2.0);
    assert_eq!(relu.derivative(0.0), 0.0);
    assert_eq!(Activation::LEAKY_RELU.apply(-1.0), -0.01);
    assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    // gelu(1) = Φ(1) ≈ 0.841344746
    assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn batch_norm_train_examples() {
    let mut t = Tape::new();
    // per-channel constant input
    let mut data = vec![0.0; 2 * 3 * 2 * 2];
    for n in 0..2 {
        for c in 0..3 {
            for j in 0..4 {
                data[(n * 3 + c) * 4 + j] = c as f64 * 10.0 - 4.0;
            }
        }
    }
    let x = t.constant(Tensor::new(&[2, 3, 2, 2], data).unwrap());
    let gamma = t.constant(Tensor::new(&[3], vec![2.0, 3.0, 4.0]).unwrap());
    let beta = t.constant(Tensor::new(&[3], vec![0.5, -1.0, 7.0]).unwrap());
    let (y, _) = t.batch_norm_train(x, gamma, beta).unwrap();
    for n in 0..2 {
        for (c, b) in [0.5, -1.0, 7.0].iter().enumerate() {
            for j in 0..4 {
                assert_eq!(t.value(y).data()[(n * 3 + c) * 4 + j], *b);
            }
        }
    }

    let mut r = rng(4);
    let x = t.constant(Tensor::randn(&[4, 2, 3, 3], 5.0, &mut r));
    let gamma = t.constant(Tensor::ones(&[2]));
    let beta = t.constant(Tensor::zeros(&[2]));
    let (y, stats) = t.batch_norm_train(x, gamma, beta).unwrap();
    let v = t.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| v[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 36.0;
        assert!(m.abs() < 1e-6);
        // var_out = var/(var+eps); a wide input keeps that within 1e-6
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
    assert_eq!(stats.mean.len(), 2);
}

#[test]
fn batch_norm_eval_matches_formula() {
    let mut r = rng(5);
    let xin = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let mean = [0.3, -0.2, 1.5];
    let var = [0.5, 2.0, 0.01];
    let g = [1.5, -0.5, 2.0];
    let b = [0.1, 0.2, 0.3];
    let stats = RunningStats::from_tensors(
        Tensor::new(&[3], mean.to_vec()).unwrap(),
        Tensor::new(&[3], var.to_vec()).unwrap(),
    )
    .unwrap();
    let mut t = Tape::new();
    let x = t.constant(xin.clone());
    let gv = t.constant(Tensor::new(&[3], g.to_vec()).unwrap());
    let bv = t.constant(Tensor::new(&[3], b.to_vec()).unwrap());
    let y = stats.apply(&mut t, x, gv, bv).unwrap();
    for (i, (&xv, &yv)) in xin.data().iter().zip(t.value(y).data()).enumerate() {
        let c = (i / 4) % 3;
        let expect = (xv - mean[c]) / (var[c] + NORM_EPS).sqrt() * g[c] + b[c];
        assert!((yv - expect).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_requires_populated_stats() {
    let stats = RunningStats::unpopulated(2);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let g = t.constant(Tensor::ones(&[2]));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        stats.apply(&mut t, x, g, b),
        Err(TensorError::State(_))
    ));
}

#[test]
fn running_stats_momentum() {
    let mut s = RunningStats::standard(1);
    s.update(&ldca_tensor::BatchStats {
        mean: vec![2.0],
        var: vec![3.0],
    })
    .unwrap();
    assert!((s.mean.data()[0] - 0.2).abs() < 1e-15);
    assert!((s.var.data()[0] - (0.9 + 0.3)).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::ones(&[2]));
    let b = t.constant(Tensor::zeros(&[2]));
    let c = t.constant(Tensor::full(&[1, 2], 4.0));
    let y = t.layer_norm(c, g, b).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    let x = t.constant(Tensor::from_rows(&[&[1.0, -1.0]]));
    let y = t.layer_norm(x, g, b).unwrap();
    // variance is exactly 1, so the only deviation is eps
    let s = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!(close(t.value(y).data(), &[s, -s], 1e-15));
    assert!(close(t.value(y).data(), &[1.0, -1.0], 1e-5));

    let mut r = rng(6);
    let row = Tensor::randn(&[3, 5], 2.0, &mut r);
    let gamma = Tensor::randn(&[5], 1.0, &mut r);
    let beta = Tensor::randn(&[5], 1.0, &mut r);
    let x = t.constant(row.clone());
    let gv = t.constant(gamma.clone());
    let bv = t.constant(beta.clone());
    let y = t.layer_norm(x, gv, bv).unwrap();
    for i in 0..3 {
        let r = &row.data()[i * 5..(i + 1) * 5];
        let m = r.iter().sum::<f64>() / 5.0;
        let var = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            let expect = (r[j] - m) / (var + NORM_EPS).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((t.value(y).data()[i * 5 + j] - expect).abs() < 1e-12);
        }
    }

    let bad = t.constant(Tensor::ones(&[3]));
    assert!(matches!(
        t.layer_norm(x, bad, bv),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 0.0]]));
    let y = t.softmax(x).unwrap();
    let v = t.value(y).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!(
        (v[2] - 1.0).abs() < 1e-300 + 1e-15 && v[3] < 1e-300 && v.iter().all(|a| a.is_finite())
    );
}

#[test]
fn attention_single_token_and_zero_projections() {
    let mut r = rng(9);
    let d = 4;
    let p = AttentionParams::new(d, 2, 0.5, &mut r).unwrap();
    let z = Tensor::randn(&[1, d], 1.0, &mut r);
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let vars = p.bind(&mut t, false);
    let out = vars.forward(&mut t, zv).unwrap();
    for w in &out.weights {
        assert_eq!(t.value(*w).data(), &[1.0]);
    }
    // output = (z·Wv + bv)·Wo + bo
    let mut t2 = Tape::new();
    let zv2 = t2.constant(z);
    let v = p.value.bind(&mut t2, false).forward(&mut t2, zv2).unwrap();
    let o = p.output.bind(&mut t2, false).forward(&mut t2, v).unwrap();
    assert!(close(t.value(out.output).data(), t2.value(o).data(), 1e-14));

    let mut zeroed = p.clone();
    for l in [&mut zeroed.query, &mut zeroed.key] {
        *l = Linear {
            weight: Tensor::zeros(&[d, d]),
            bias: Tensor::zeros(&[d]),
        };
    }
    let mut t = Tape::new();
    let z = t.constant(Tensor::randn(&[3, d], 1.0, &mut r));
    let out = zeroed.bind(&mut t, false).forward(&mut t, z).unwrap();
    for w in &out.weights {
        assert!(t
            .value(*w)
            .data()
            .iter()
            .all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }

    assert!(matches!(
        AttentionParams::new(6, 4, 0.1, &mut r),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn attention_matches_hand_rolled_reference() {
    let mut r = rng(10);
    let (n, d) = (2usize, 2usize);
    let p = AttentionParams::new(d, 1, 0.7, &mut r).unwrap();
    let z = Tensor::randn(&[n, d], 1.0, &mut r);
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let out = p.bind(&mut t, false).forward(&mut t, zv).unwrap();

    let proj = |l: &Linear, row: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| {
                l.bias.data()[j]
                    + (0..d)
                        .map(|i| row[i] * l.weight.data()[i * d + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let rows: Vec<&[f64]> = z.data().chunks(d).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(&p.query, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(&p.key, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(&p.value, r)).collect();
    let mut expect = Vec::new();
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mixed: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|j| e[j] / s * v[j][c]).sum())
            .collect();
        expect.extend(proj(&p.output, &mixed));
    }
    assert!(close(t.value(out.output).data(), &expect, 1e-10));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[6.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = t.relu(x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::ones(&[2]));
    let unused = t.param(Tensor::ones(&[2]));
    let y = t.square(x).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::Usage(_))));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(unused).is_none());
    assert!(matches!(t.backward(s), Err(TensorError::Usage(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(1e200));
    let y = t.square(x);
    assert!(matches!(y, Err(TensorError::NonFinite { .. })));
}

#[test]
fn topk_segment_sum_picks_largest_per_segment() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_rows(&[&[0.1, 0.9, 0.5, -1.0, 0.2, 0.2]]));
    let y = t.topk_segment_sum(x, 2, 2).unwrap();
    assert!(close(t.value(y).data(), &[1.4, 0.4], 1e-15));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    // tie between the two 0.2 entries: both are needed for k=2 here
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[&[0.5, 0.5, 0.5]]));
    assert!(matches!(
        t.topk_segment_sum(x, 1, 4),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut t = Tape::new();
    let l = t.param(Tensor::zeros(&[2, 4]));
    let loss = t.cross_entropy(l, &[0, 3]).unwrap();
    assert!((t.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
}
