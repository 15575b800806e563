//! Local descriptor contextual augmentation.
//!
//! Descriptor maps are pooled to a fixed `G × G` grid, cut into `P × P`
//! patches, projected to `d`-wide tokens with a learned positional table, run
//! through `K` pre-norm transformer blocks and a readout layer norm, then mapped
//! back to `D` channels. The per-tile context is replicated over its tile and
//! added to the relu-gated pooled descriptors.

use ldca_tensor::nn::{AttentionParams, AttentionVars, Linear, LinearVars, Parameters};
use ldca_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{AugmentedDescriptorMap, DescriptorMap};
use crate::embedder::EMBED_CHANNELS;
use crate::error::{LdcaError, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdcaConfig {
    /// Side of the pooled grid `G`.
    pub grid: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Token width `d`.
    pub latent: usize,
    /// Number of transformer blocks `K`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Descriptor channels `D`.
    pub channels: usize,
}

impl LdcaConfig {
    /// 64×64 grid, 16×16 patches, width 128, eight blocks.
    pub fn full() -> Self {
        LdcaConfig {
            grid: 64,
            patch: 16,
            latent: 128,
            depth: 8,
            heads: 4,
            mlp_hidden: 256,
            channels: EMBED_CHANNELS,
        }
    }

    /// Laptop-sized profile: 8×8 grid, 4×4 patches, width 32, two blocks.
    pub fn desk() -> Self {
        LdcaConfig {
            grid: 8,
            patch: 4,
            latent: 32,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            channels: EMBED_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return Err(LdcaError::Config(format!(
                "grid {} is not divisible by patch {}",
                self.grid, self.patch
            )));
        }
        if self.heads == 0 || self.latent == 0 || !self.latent.is_multiple_of(self.heads) {
            return Err(LdcaError::Config(format!(
                "latent width {} is not divisible by {} heads",
                self.latent, self.heads
            )));
        }
        if self.channels == 0 || self.mlp_hidden == 0 {
            return Err(LdcaError::Config(
                "channels and mlp width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Tiles per side, `G / P`.
    pub fn tiles_per_side(&self) -> usize {
        self.grid / self.patch
    }

    /// Token count `N = (G/P)²`.
    pub fn tokens(&self) -> usize {
        self.tiles_per_side().pow(2)
    }

    /// Flattened patch length `P·P·D`.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attention: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerBlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attention: AttentionVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_in: LinearVars,
    pub mlp_out: LinearVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdcaParams {
    /// `E`: `[P·P·D, d]`.
    pub patch_proj: Tensor,
    /// `E_pos`: `[N, d]`.
    pub positions: Tensor,
    pub blocks: Vec<TransformerBlockParams>,
    pub readout_gamma: Tensor,
    pub readout_beta: Tensor,
    /// `W_ctx`: `[d, D]`.
    pub context_proj: Tensor,
}

#[derive(Clone, Debug)]
pub struct LdcaVars {
    pub patch_proj: Var,
    pub positions: Var,
    pub blocks: Vec<TransformerBlockVars>,
    pub readout_gamma: Var,
    pub readout_beta: Var,
    pub context_proj: Var,
}

impl TransformerBlockParams {
    pub fn new(cfg: &LdcaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.latent;
        Ok(TransformerBlockParams {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            attention: AttentionParams::new(d, cfg.heads, INIT_STD, rng)?,
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            mlp_in: Linear::normal(d, cfg.mlp_hidden, INIT_STD, rng),
            mlp_out: Linear::normal(cfg.mlp_hidden, d, INIT_STD, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TransformerBlockVars {
        TransformerBlockVars {
            ln1_gamma: tape.leaf(self.ln1_gamma.clone(), trainable),
            ln1_beta: tape.leaf(self.ln1_beta.clone(), trainable),
            attention: self.attention.bind(tape, trainable),
            ln2_gamma: tape.leaf(self.ln2_gamma.clone(), trainable),
            ln2_beta: tape.leaf(self.ln2_beta.clone(), trainable),
            mlp_in: self.mlp_in.bind(tape, trainable),
            mlp_out: self.mlp_out.bind(tape, trainable),
        }
    }
}

impl Parameters for TransformerBlockParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("ln1.gamma".into(), &self.ln1_gamma),
            ("ln1.beta".into(), &self.ln1_beta),
        ];
        v.extend(prefix("attention", self.attention.named_tensors()));
        v.push(("ln2.gamma".into(), &self.ln2_gamma));
        v.push(("ln2.beta".into(), &self.ln2_beta));
        v.extend(prefix("mlp_in", self.mlp_in.named_tensors()));
        v.extend(prefix("mlp_out", self.mlp_out.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("ln1.gamma".into(), &mut self.ln1_gamma),
            ("ln1.beta".into(), &mut self.ln1_beta),
        ];
        v.extend(prefix("attention", self.attention.named_tensors_mut()));
        v.push(("ln2.gamma".into(), &mut self.ln2_gamma));
        v.push(("ln2.beta".into(), &mut self.ln2_beta));
        v.extend(prefix("mlp_in", self.mlp_in.named_tensors_mut()));
        v.extend(prefix("mlp_out", self.mlp_out.named_tensors_mut()));
        v
    }
}

fn prefix<'a, T: 'a>(
    p: &'a str,
    items: Vec<(String, T)>,
) -> impl Iterator<Item = (String, T)> + 'a {
    items.into_iter().map(move |(n, t)| (format!("{p}.{n}"), t))
}

impl TransformerBlockVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.ln1_gamma, self.ln1_beta];
        v.extend(self.attention.vars());
        v.extend([self.ln2_gamma, self.ln2_beta]);
        v.extend(self.mlp_in.vars());
        v.extend(self.mlp_out.vars());
        v
    }
}

/// Normal(0, 0.02) projections and positional table, layer norms at (1, 0).
pub fn init_ldca(cfg: &LdcaConfig, seed: u64) -> Result<LdcaParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent;
    let patch_proj = Tensor::randn(&[cfg.patch_len(), d], INIT_STD, &mut rng);
    let positions = Tensor::randn(&[cfg.tokens(), d], INIT_STD, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| TransformerBlockParams::new(cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let context_proj = Tensor::randn(&[d, cfg.channels], INIT_STD, &mut rng);
    Ok(LdcaParams {
        patch_proj,
        positions,
        blocks,
        readout_gamma: Tensor::ones(&[d]),
        readout_beta: Tensor::zeros(&[d]),
        context_proj,
    })
}

impl Parameters for LdcaParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("positions".into(), &self.positions),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefix(&format!("block{i}"), b.named_tensors()).collect::<Vec<_>>());
        }
        v.push(("readout.gamma".into(), &self.readout_gamma));
        v.push(("readout.beta".into(), &self.readout_beta));
        v.push(("context_proj".into(), &self.context_proj));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("positions".into(), &mut self.positions),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            v.extend(prefix(&p, b.named_tensors_mut()).collect::<Vec<_>>());
        }
        v.push(("readout.gamma".into(), &mut self.readout_gamma));
        v.push(("readout.beta".into(), &mut self.readout_beta));
        v.push(("context_proj".into(), &mut self.context_proj));
        v
    }
}

impl LdcaParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LdcaVars {
        LdcaVars {
            patch_proj: tape.leaf(self.patch_proj.clone(), trainable),
            positions: tape.leaf(self.positions.clone(), trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
            readout_gamma: tape.leaf(self.readout_gamma.clone(), trainable),
            readout_beta: tape.leaf(self.readout_beta.clone(), trainable),
            context_proj: tape.leaf(self.context_proj.clone(), trainable),
        }
    }

    /// Checks every array against `cfg`.
    pub fn check(&self, cfg: &LdcaConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.latent;
        let ok = self.patch_proj.shape() == [cfg.patch_len(), d]
            && self.positions.shape() == [cfg.tokens(), d]
            && self.blocks.len() == cfg.depth
            && self.context_proj.shape() == [d, cfg.channels]
            && self.readout_gamma.shape() == [d]
            && self.blocks.iter().all(|b| {
                b.attention.heads == cfg.heads
                    && b.attention.query.weight.shape() == [d, d]
                    && b.mlp_in.weight.shape() == [d, cfg.mlp_hidden]
                    && b.mlp_out.weight.shape() == [cfg.mlp_hidden, d]
            });
        if ok {
            Ok(())
        } else {
            Err(LdcaError::Config(format!(
                "augmenter parameters do not match configuration {cfg:?}"
            )))
        }
    }
}

impl LdcaVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.patch_proj, self.positions];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.extend([self.readout_gamma, self.readout_beta, self.context_proj]);
        v
    }
}

/// Adaptive average pooling of a `D × H × W` map to `D × G × G`.
pub fn pool_to_grid(tape: &mut Tape, desc: Var, grid: usize) -> Result<Var> {
    Ok(tape.adaptive_avg_pool2d(desc, grid, grid)?)
}

/// Flat source index (into a `D × G × G` map) of every element of the
/// `[N, P·P·D]` patch sequence.
///
/// Tiles are taken in row-major tile order; inside a tile the flattened
/// order is (row, column, channel), channel fastest.
pub fn patch_index(channels: usize, grid: usize, patch: usize) -> Vec<usize> {
    let tiles = grid / patch;
    let mut idx = Vec::with_capacity(channels * grid * grid);
    for tr in 0..tiles {
        for tc in 0..tiles {
            for r in 0..patch {
                for c in 0..patch {
                    let (y, x) = (tr * patch + r, tc * patch + c);
                    for ch in 0..channels {
                        idx.push((ch * grid + y) * grid + x);
                    }
                }
            }
        }
    }
    idx
}

/// Splits a `D × G × G` map into `N` flattened `P × P` patches, `[N, P·P·D]`.
pub fn patchify(tape: &mut Tape, map: Var, patch: usize) -> Result<Var> {
    let (d, g) = match *tape.shape(map) {
        [d, h, w] if h == w => (d, h),
        ref s => {
            return Err(LdcaError::Input(format!(
                "patchify expects a square D×G×G map, got {s:?}"
            )))
        }
    };
    if patch == 0 || g % patch != 0 {
        return Err(LdcaError::Config(format!(
            "grid {g} is not divisible by patch {patch}"
        )));
    }
    let tokens = (g / patch).pow(2);
    let idx = patch_index(d, g, patch);
    Ok(tape.gather(map, idx, &[tokens, patch * patch * d])?)
}

/// Inverse of [`patchify`] on plain tensors.
pub fn unpatchify(patches: &Tensor, channels: usize, grid: usize, patch: usize) -> Result<Tensor> {
    let idx = patch_index(channels, grid, patch);
    if patches.len() != idx.len() {
        return Err(LdcaError::Input(format!(
            "{} patch values for a {channels}×{grid}×{grid} map",
            patches.len()
        )));
    }
    let mut out = vec![0.0; idx.len()];
    for (&dst, &v) in idx.iter().zip(patches.data()) {
        out[dst] = v;
    }
    Ok(Tensor::new(&[channels, grid, grid], out)?)
}

/// `z₀[i] = patch_i · E + E_pos[i]`.
pub fn embed_sequence(tape: &mut Tape, patches: Var, proj: Var, positions: Var) -> Result<Var> {
    let (n, len) = (tape.shape(patches)[0], tape.shape(patches)[1]);
    if tape.shape(proj)[0] != len || tape.shape(positions) != [n, tape.shape(proj)[1]] {
        return Err(LdcaError::Tensor(ldca_tensor::TensorError::Dimension {
            op: "embed_sequence",
            detail: format!(
                "patches {:?}, projection {:?}, positions {:?}",
                tape.shape(patches),
                tape.shape(proj),
                tape.shape(positions)
            ),
        }));
    }
    let z = tape.matmul(patches, proj)?;
    Ok(tape.add(z, positions)?)
}

/// `z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'`.
pub fn transformer_block(tape: &mut Tape, z: Var, b: &TransformerBlockVars) -> Result<Var> {
    let h = tape.layer_norm(z, b.ln1_gamma, b.ln1_beta)?;
    let a = b.attention.forward(tape, h)?;
    let z1 = tape.add(a.output, z)?;
    let h = tape.layer_norm(z1, b.ln2_gamma, b.ln2_beta)?;
    let h = b.mlp_in.forward(tape, h)?;
    let h = tape.gelu(h)?;
    let h = b.mlp_out.forward(tape, h)?;
    Ok(tape.add(h, z1)?)
}

/// Runs the blocks in order, then layer-normalizes every token.
pub fn contextualize(tape: &mut Tape, z0: Var, vars: &LdcaVars) -> Result<Var> {
    let mut z = z0;
    for b in &vars.blocks {
        z = transformer_block(tape, z, b)?;
    }
    Ok(tape.layer_norm(z, vars.readout_gamma, vars.readout_beta)?)
}

/// Flat index into the `[N, D]` context tokens for each cell of a
/// `D × G × G` map: every cell reads its tile's vector.
pub fn tile_index(channels: usize, grid: usize, patch: usize) -> Vec<usize> {
    let tiles = grid / patch;
    let mut idx = Vec::with_capacity(channels * grid * grid);
    for ch in 0..channels {
        for y in 0..grid {
            for x in 0..grid {
                let t = (y / patch) * tiles + x / patch;
                idx.push(t * channels + ch);
            }
        }
    }
    idx
}

/// `relu(pooled) + tile-replicated (y · W_ctx)`.
pub fn gate_and_fuse(
    tape: &mut Tape,
    pooled: Var,
    y: Var,
    context_proj: Var,
    patch: usize,
) -> Result<Var> {
    let (d, g) = match *tape.shape(pooled) {
        [d, h, w] if h == w => (d, h),
        ref s => {
            return Err(LdcaError::Input(format!(
                "gate_and_fuse expects D×G×G, got {s:?}"
            )))
        }
    };
    if patch == 0 || g % patch != 0 || tape.shape(y)[0] != (g / patch).pow(2) {
        return Err(LdcaError::Config(format!(
            "{} context tokens do not tile a {g}×{g} grid with patch {patch}",
            tape.shape(y)[0]
        )));
    }
    let ctx = tape.matmul(y, context_proj)?;
    let ctx = tape.gather(ctx, tile_index(d, g, patch), &[d, g, g])?;
    let gated = tape.relu(pooled)?;
    Ok(tape.add(gated, ctx)?)
}

/// Full augmentation of one `D × H × W` map on the tape.
/// With `bypass` the input is returned as is.
pub fn augment_var(
    tape: &mut Tape,
    desc: Var,
    vars: Option<&LdcaVars>,
    cfg: &LdcaConfig,
    bypass: bool,
) -> Result<Var> {
    if bypass {
        return Ok(desc);
    }
    let vars = vars.ok_or_else(|| {
        LdcaError::Usage("augmenter parameters are required unless bypassing".into())
    })?;
    cfg.validate()?;
    if tape.shape(desc).first() != Some(&cfg.channels) {
        return Err(LdcaError::Input(format!(
            "descriptor map {:?} does not have {} channels",
            tape.shape(desc),
            cfg.channels
        )));
    }
    let pooled = pool_to_grid(tape, desc, cfg.grid)?;
    let patches = patchify(tape, pooled, cfg.patch)?;
    let z0 = embed_sequence(tape, patches, vars.patch_proj, vars.positions)?;
    let y = contextualize(tape, z0, vars)?;
    gate_and_fuse(tape, pooled, y, vars.context_proj, cfg.patch)
}

/// Plain (no-gradient) augmentation of one descriptor map.
pub fn augment(
    desc: &DescriptorMap,
    params: &LdcaParams,
    cfg: &LdcaConfig,
    bypass: bool,
) -> Result<AugmentedDescriptorMap> {
    if bypass {
        return Ok(AugmentedDescriptorMap {
            map: desc.clone(),
            augmented: false,
        });
    }
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(desc.tensor().clone());
    let out = augment_var(&mut tape, x, Some(&vars), cfg, false)?;
    Ok(AugmentedDescriptorMap {
        map: DescriptorMap::new(tape.value(out).clone())?,
        augmented: true,
    })
}
