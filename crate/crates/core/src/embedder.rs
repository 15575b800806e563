//! Conv4-64 embedder: four blocks of 3×3 conv (64 filters, padding 1) →
//! batch norm → leaky relu, with 2×2 max pooling after the first two blocks.
//! An `S × S` RGB image becomes a `64 × S/4 × S/4` descriptor map.

use ldca_tensor::nn::{Parameters, RunningStats};
use ldca_tensor::{BatchStats, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::DescriptorMap;
use crate::error::{LdcaError, Result};

pub const EMBED_CHANNELS: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const BLOCKS: usize = 4;
const POOLED_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, folded into the running estimates by the caller.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[64, C_in, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct EmbedderVars {
    pub blocks: Vec<ConvBlockVars>,
}

impl EmbedderVars {
    pub fn vars(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [b.weight, b.bias, b.gamma, b.beta])
            .collect()
    }
}

/// He-normal conv weights (std `sqrt(2 / fan_in)`), zero biases, unit gamma,
/// zero beta, standard running statistics. Deterministic in `seed`.
pub fn init_embedder(seed: u64) -> EmbedderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..BLOCKS)
        .map(|i| {
            let c_in = if i == 0 {
                IMAGE_CHANNELS
            } else {
                EMBED_CHANNELS
            };
            let fan_in = (c_in * 9) as f64;
            ConvBlock {
                weight: Tensor::randn(
                    &[EMBED_CHANNELS, c_in, 3, 3],
                    (2.0 / fan_in).sqrt(),
                    &mut rng,
                ),
                bias: Tensor::zeros(&[EMBED_CHANNELS]),
                gamma: Tensor::ones(&[EMBED_CHANNELS]),
                beta: Tensor::zeros(&[EMBED_CHANNELS]),
                running: RunningStats::standard(EMBED_CHANNELS),
            }
        })
        .collect();
    EmbedderParams { blocks }
}

impl Parameters for EmbedderParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("block{i}.weight"), &b.weight),
                    (format!("block{i}.bias"), &b.bias),
                    (format!("block{i}.gamma"), &b.gamma),
                    (format!("block{i}.beta"), &b.beta),
                ]
            })
            .collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("block{i}.weight"), &mut b.weight),
                    (format!("block{i}.bias"), &mut b.bias),
                    (format!("block{i}.gamma"), &mut b.gamma),
                    (format!("block{i}.beta"), &mut b.beta),
                ]
            })
            .collect()
    }
}

impl EmbedderParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EmbedderVars {
        EmbedderVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockVars {
                    weight: tape.leaf(b.weight.clone(), trainable),
                    bias: tape.leaf(b.bias.clone(), trainable),
                    gamma: tape.leaf(b.gamma.clone(), trainable),
                    beta: tape.leaf(b.beta.clone(), trainable),
                })
                .collect(),
        }
    }

    /// Folds one training pass's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(LdcaError::Usage(format!(
                "{} batch-stat sets for {} blocks",
                stats.len(),
                self.blocks.len()
            )));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.running.update(s)?;
        }
        Ok(())
    }

    /// Embeds a batch `[N, 3, S, S]` into `[N, 64, S/4, S/4]`.
    ///
    /// In train mode the returned batch statistics (one per block) should be
    /// passed to [`EmbedderParams::update_running_stats`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EmbedderVars,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        match *tape.shape(images) {
            [_, c, h, w] if c == IMAGE_CHANNELS && h == w && h % 4 == 0 => {}
            ref s => {
                return Err(LdcaError::Input(format!(
                    "expected [N, 3, S, S] images with S divisible by 4, got {s:?}"
                )))
            }
        }
        let mut x = images;
        let mut stats = Vec::with_capacity(BLOCKS);
        for (i, (block, v)) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let y = tape.conv2d(x, v.weight, v.bias)?;
            let y = match mode {
                Mode::Train => {
                    let (y, s) = tape.batch_norm_train(y, v.gamma, v.beta)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => block.running.apply(tape, y, v.gamma, v.beta)?,
            };
            x = tape.leaky_relu(y)?;
            if i < POOLED_BLOCKS {
                x = tape.max_pool2d(x, 2)?;
            }
        }
        Ok((x, stats))
    }
}

/// Stacks `3 × S × S` images into one `[N, 3, S, S]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| LdcaError::Usage("no images to stack".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(LdcaError::Input(format!(
                "image shapes differ: {shape:?} vs {:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

/// Embeds one `3 × S × S` image. Train mode normalizes with the image's own
/// statistics and does not touch the running estimates.
pub fn embed_image(image: &Tensor, params: &EmbedderParams, mode: Mode) -> Result<DescriptorMap> {
    if image.ndim() != 3 {
        return Err(LdcaError::Input(format!(
            "expected a 3×S×S image, got {:?}",
            image.shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(stack_images(&[image])?);
    let (y, _) = params.forward(&mut tape, &vars, x, mode)?;
    let s = tape.shape(y).to_vec();
    DescriptorMap::new(tape.value(y).clone().reshape(&s[1..])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_embedder(3);
        assert_eq!(a, init_embedder(3));
        assert_ne!(a.blocks[0].weight, init_embedder(4).blocks[0].weight);
        assert_eq!(a.blocks[0].weight.shape(), &[64, 3, 3, 3]);
        for b in &a.blocks[1..] {
            assert_eq!(b.weight.shape(), &[64, 64, 3, 3]);
        }
    }

    #[test]
    fn he_init_scale() {
        // ≥ 10⁴ draws pooled over seeds
        let draws: Vec<f64> = (0..6)
            .flat_map(|s| init_embedder(s).blocks[0].weight.data().to_vec())
            .collect();
        assert!(draws.len() >= 10_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0f64 / 27.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} vs {target}");
    }

    #[test]
    fn output_shapes() {
        let params = init_embedder(0);
        for side in [16usize, 32, 84] {
            let img = Tensor::full(&[3, side, side], 0.1);
            let map = embed_image(&img, &params, Mode::Eval).unwrap();
            assert_eq!(map.tensor().shape(), &[64, side / 4, side / 4]);
        }
        let map = embed_image(&Tensor::zeros(&[3, 84, 84]), &params, Mode::Eval).unwrap();
        assert_eq!(map.count(), 441);
    }

    #[test]
    fn zero_image_gives_zero_descriptors() {
        let params = init_embedder(1);
        let map = embed_image(&Tensor::zeros(&[3, 32, 32]), &params, Mode::Eval).unwrap();
        assert_eq!(map.count(), 64);
        assert!(map.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = init_embedder(1);
        assert!(matches!(
            embed_image(&Tensor::zeros(&[1, 16, 16]), &params, Mode::Eval),
            Err(LdcaError::Input(_))
        ));
        assert!(matches!(
            embed_image(&Tensor::zeros(&[3, 18, 18]), &params, Mode::Eval),
            Err(LdcaError::Input(_))
        ));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let params = init_embedder(2);
        let img = Tensor::full(&[3, 16, 16], 0.3);
        let a = embed_image(&img, &params, Mode::Eval).unwrap();
        let b = embed_image(&img, &params, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }
}
