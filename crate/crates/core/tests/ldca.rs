use ldca::descriptors::DescriptorMap;
use ldca::ldca::{
    augment, augment_var, contextualize, gate_and_fuse, init_ldca, patch_index, patchify,
    transformer_block, unpatchify, LdcaConfig, TransformerBlockParams,
};
use ldca_tensor::nn::{AttentionParams, Linear};
use ldca_tensor::{Tape, Tensor, NORM_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

fn zero_block(d: usize, hidden: usize, heads: usize) -> TransformerBlockParams {
    let lin = |i, o| Linear {
        weight: Tensor::zeros(&[i, o]),
        bias: Tensor::zeros(&[o]),
    };
    TransformerBlockParams {
        ln1_gamma: Tensor::ones(&[d]),
        ln1_beta: Tensor::zeros(&[d]),
        attention: AttentionParams {
            query: lin(d, d),
            key: lin(d, d),
            value: lin(d, d),
            output: lin(d, d),
            heads,
        },
        ln2_gamma: Tensor::ones(&[d]),
        ln2_beta: Tensor::zeros(&[d]),
        mlp_in: lin(d, hidden),
        mlp_out: lin(hidden, d),
    }
}

fn random_block(d: usize, hidden: usize, heads: usize, seed: u64) -> TransformerBlockParams {
    let lin = |i, o, s| Linear {
        weight: rand_tensor(&[i, o], s),
        bias: rand_tensor(&[o], s + 1000),
    };
    TransformerBlockParams {
        ln1_gamma: rand_tensor(&[d], seed),
        ln1_beta: rand_tensor(&[d], seed + 1),
        attention: AttentionParams {
            query: lin(d, d, seed + 2),
            key: lin(d, d, seed + 3),
            value: lin(d, d, seed + 4),
            output: lin(d, d, seed + 5),
            heads,
        },
        ln2_gamma: rand_tensor(&[d], seed + 6),
        ln2_beta: rand_tensor(&[d], seed + 7),
        mlp_in: lin(d, hidden, seed + 8),
        mlp_out: lin(hidden, d, seed + 9),
    }
}

fn run_block(block: &TransformerBlockParams, z: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = block.bind(&mut tape, false);
    let z = tape.constant(z.clone());
    let out = transformer_block(&mut tape, z, &vars).unwrap();
    tape.value(out).clone()
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + NORM_EPS).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn linear(x: &Mat, l: &Linear) -> Mat {
    let (i, o) = (l.weight.shape()[0], l.weight.shape()[1]);
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| {
                    l.bias.data()[c]
                        + (0..i)
                            .map(|r| row[r] * l.weight.data()[r * o + c])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn attention(h: &Mat, a: &AttentionParams) -> Mat {
    let (q, k, v) = (linear(h, &a.query), linear(h, &a.key), linear(h, &a.value));
    let n = h.len();
    let d = h[0].len();
    let dh = d / a.heads;
    let mut merged = vec![vec![0.0; d]; n];
    for head in 0..a.heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..n).map(|j| e[j] / total * v[j][c]).sum();
            }
        }
    }
    linear(&merged, &a.output)
}

fn reference_block(b: &TransformerBlockParams, z: &Mat) -> Mat {
    let h = layer_norm(z, &b.ln1_gamma, &b.ln1_beta);
    let z1 = add(&attention(&h, &b.attention), z);
    let h = layer_norm(&z1, &b.ln2_gamma, &b.ln2_beta);
    let h: Mat = linear(&h, &b.mlp_in)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&linear(&h, &b.mlp_out), &z1)
}

#[test]
fn zeroed_block_is_identity() {
    let z = rand_tensor(&[4, 8], 1);
    let out = run_block(&zero_block(8, 16, 2), &z);
    assert_eq!(out, z);
}

#[test]
fn block_matches_hand_computation() {
    for (heads, seed) in [(1, 10), (2, 20)] {
        let block = random_block(4, 6, heads, seed);
        let z = rand_tensor(&[2, 4], seed + 50);
        let got = to_mat(&run_block(&block, &z));
        let want = reference_block(&block, &to_mat(&z));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
        }
    }
}

#[test]
fn two_blocks_compose_then_normalize() {
    let cfg = LdcaConfig::desk();
    let mut params = init_ldca(&cfg, 3).unwrap();
    params.blocks = vec![random_block(32, 64, 4, 1), random_block(32, 64, 4, 2)];
    let z0 = rand_tensor(&[cfg.tokens(), cfg.latent], 9);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let z = tape.constant(z0.clone());
    let out = contextualize(&mut tape, z, &vars).unwrap();
    let got = tape.value(out).clone();
    let manual = run_block(&params.blocks[1], &run_block(&params.blocks[0], &z0));
    let want = layer_norm(
        &to_mat(&manual),
        &params.readout_gamma,
        &params.readout_beta,
    );
    for (g, w) in got.data().iter().zip(want.iter().flatten()) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn zero_context_leaves_gated_pooled_map() {
    let cfg = LdcaConfig::desk();
    let mut params = init_ldca(&cfg, 4).unwrap();
    params.context_proj = Tensor::zeros(params.context_proj.shape());
    let desc = rand_tensor(&[64, 8, 8], 5);
    let out = augment(
        &DescriptorMap::new(desc.clone()).unwrap(),
        &params,
        &cfg,
        false,
    )
    .unwrap();
    assert!(out.augmented);
    assert_eq!(out.map.tensor(), &desc.map(|v| v.max(0.0)));
}

#[test]
fn context_is_shared_within_a_tile() {
    let (d, g, p) = (3, 4, 2);
    let mut tape = Tape::new();
    let pooled = tape.constant(Tensor::zeros(&[d, g, g]));
    let y = tape.constant(rand_tensor(&[4, 5], 6));
    let w = tape.constant(rand_tensor(&[5, d], 7));
    let out = gate_and_fuse(&mut tape, pooled, y, w, p).unwrap();
    let ctx = tape.value(y).matmul(tape.value(w)).unwrap();
    let out = tape.value(out);
    for ch in 0..d {
        for r in 0..g {
            for c in 0..g {
                let tile = (r / p) * (g / p) + c / p;
                assert_eq!(out.data()[(ch * g + r) * g + c], ctx.data()[tile * d + ch]);
            }
        }
    }
}

#[test]
fn bypass_returns_input_unchanged() {
    let cfg = LdcaConfig::desk();
    let params = init_ldca(&cfg, 0).unwrap();
    let desc = rand_tensor(&[64, 5, 5], 8);
    let out = augment(
        &DescriptorMap::new(desc.clone()).unwrap(),
        &params,
        &cfg,
        true,
    )
    .unwrap();
    assert!(!out.augmented);
    assert_eq!(out.map.tensor(), &desc);
    let mut tape = Tape::new();
    let x = tape.constant(desc.clone());
    assert_eq!(augment_var(&mut tape, x, None, &cfg, true).unwrap(), x);
}

#[test]
fn outputs_are_finite_for_large_inputs() {
    let cfg = LdcaConfig::desk();
    let params = init_ldca(&cfg, 2).unwrap();
    let desc = rand_tensor(&[64, 8, 8], 3).map(|v| v * 1e4);
    let out = augment(&DescriptorMap::new(desc).unwrap(), &params, &cfg, false).unwrap();
    assert!(out.map.tensor().is_finite());
}

#[test]
fn wrong_channel_count_is_rejected() {
    let cfg = LdcaConfig::desk();
    let params = init_ldca(&cfg, 2).unwrap();
    let desc = DescriptorMap::new(Tensor::zeros(&[32, 8, 8])).unwrap();
    assert!(augment(&desc, &params, &cfg, false).is_err());
}

proptest! {
    #[test]
    fn patchify_is_a_bijection(d in 1usize..5, tiles in 1usize..4, patch in 1usize..4, seed in 0u64..1000) {
        let g = tiles * patch;
        let idx = patch_index(d, g, patch);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..d * g * g).collect::<Vec<_>>());
        let map = rand_tensor(&[d, g, g], seed);
        let mut tape = Tape::new();
        let x = tape.constant(map.clone());
        let p = patchify(&mut tape, x, patch).unwrap();
        prop_assert_eq!(tape.shape(p), &[tiles * tiles, patch * patch * d][..]);
        let back = unpatchify(tape.value(p), d, g, patch).unwrap();
        prop_assert_eq!(back, map);
    }
}
