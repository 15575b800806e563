//! The full pipeline: embedder, optional augmenter, image-to-class logits.

use ldca_tensor::nn::Parameters;
use ldca_tensor::{BatchStats, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{episode_logits, unit_rows};
use crate::dataset::ChannelStats;
use crate::embedder::{
    init_embedder, stack_images, EmbedderParams, EmbedderVars, Mode, EMBED_CHANNELS,
};
use crate::episode::hex;
use crate::error::{LdcaError, Result};
use crate::ldca::{augment_var, init_ldca, LdcaConfig, LdcaParams, LdcaVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_side: usize,
    pub ldca: LdcaConfig,
    /// Skip the augmenter and classify raw descriptors.
    pub bypass: bool,
}

impl ModelConfig {
    /// 84-pixel inputs with the full-size augmenter.
    pub fn full() -> Self {
        ModelConfig {
            image_side: 84,
            ldca: LdcaConfig::full(),
            bypass: false,
        }
    }

    /// 32-pixel inputs with the small augmenter.
    pub fn desk() -> Self {
        ModelConfig {
            image_side: 32,
            ldca: LdcaConfig::desk(),
            bypass: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || !self.image_side.is_multiple_of(4) {
            return Err(LdcaError::Config(format!(
                "image side {} is not a positive multiple of 4",
                self.image_side
            )));
        }
        if self.ldca.channels != EMBED_CHANNELS {
            return Err(LdcaError::Config(format!(
                "augmenter expects {} channels, embedder produces {EMBED_CHANNELS}",
                self.ldca.channels
            )));
        }
        self.ldca.validate()
    }

    /// Descriptors per image as seen by the classifier.
    pub fn descriptor_count(&self, bypass: bool) -> usize {
        if bypass {
            (self.image_side / 4).pow(2)
        } else {
            self.ldca.grid.pow(2)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedder: EmbedderParams,
    pub ldca: LdcaParams,
    /// Input normalization the model was trained with.
    pub normalization: ChannelStats,
    /// Digest of the training dataset, once trained.
    pub train_dataset: Option<String>,
}

pub struct ModelVars {
    pub embedder: EmbedderVars,
    pub ldca: Option<LdcaVars>,
}

impl ModelVars {
    /// Trainable variables, in the order of [`Model::trainable_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.embedder.vars();
        if let Some(l) = &self.ldca {
            v.extend(l.vars());
        }
        v
    }
}

/// Forward products of one training episode.
pub struct EpisodeForward {
    pub loss: Var,
    pub logits: Var,
    pub batch_stats: Vec<BatchStats>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            embedder: init_embedder(seed),
            ldca: init_ldca(&config.ldca, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?,
            config,
            normalization: ChannelStats::identity(),
            train_dataset: None,
        })
    }

    /// Hash of the configuration, normalization and every stored array.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let head = serde_json::json!({
            "config": self.config,
            "normalization": self.normalization,
            "train_dataset": self.train_dataset,
        });
        h.update(head.to_string().as_bytes());
        for (name, t) in self.arrays() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize()[..16])
    }

    /// Learnable arrays plus batch-norm running statistics, by name.
    pub fn arrays(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (i, b) in self.embedder.blocks.iter().enumerate() {
            v.push((
                format!("embedder.block{i}.running_mean"),
                b.running.mean.clone(),
            ));
            v.push((
                format!("embedder.block{i}.running_var"),
                b.running.var.clone(),
            ));
        }
        v
    }

    /// Every learnable array, `embedder.*` then `ldca.*`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .embedder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("embedder.{n}"), t))
            .collect();
        v.extend(
            self.ldca
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("ldca.{n}"), t)),
        );
        v
    }

    /// Arrays updated by training; the augmenter is frozen in bypass mode.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .embedder
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        if !self.config.bypass {
            v.extend(self.ldca.named_tensors_mut().into_iter().map(|(_, t)| t));
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, bypass: bool) -> ModelVars {
        ModelVars {
            embedder: self.embedder.bind(tape, trainable),
            ldca: (!bypass).then(|| self.ldca.bind(tape, trainable)),
        }
    }

    /// Embeds and augments a batch; returns one `[M, D]` descriptor-row
    /// variable per image.
    pub fn descriptor_rows(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<BatchStats>)> {
        let (maps, stats) = self.embedder.forward(tape, &vars.embedder, images, mode)?;
        let shape = tape.shape(maps).to_vec();
        let (n, d) = (shape[0], shape[1]);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let one = tape.narrow(maps, i, 1)?;
            let one = tape.reshape(one, &shape[1..])?;
            let aug = augment_var(
                tape,
                one,
                vars.ldca.as_ref(),
                &self.config.ldca,
                vars.ldca.is_none(),
            )?;
            let m = tape.value(aug).len() / d;
            let flat = tape.reshape(aug, &[d, m])?;
            rows.push(tape.transpose(flat)?);
        }
        Ok((rows, stats))
    }

    /// Loss of one episode batch.
    ///
    /// `images` holds the support images (class-major, `shots` per class)
    /// followed by the queries. Batch norm uses the statistics of the whole
    /// batch.
    #[allow(clippy::too_many_arguments)]
    pub fn episode_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: Var,
        ways: usize,
        shots: usize,
        query_labels: &[usize],
        k: usize,
        temperature: Option<f64>,
    ) -> Result<EpisodeForward> {
        let n_support = ways * shots;
        if tape.shape(images)[0] != n_support + query_labels.len() {
            return Err(LdcaError::Input(format!(
                "{} images for {n_support} support and {} queries",
                tape.shape(images)[0],
                query_labels.len()
            )));
        }
        let (rows, batch_stats) = self.descriptor_rows(tape, vars, images, Mode::Train)?;
        let m = tape.shape(rows[0])[0];
        let support = tape.concat(&rows[..n_support])?;
        let queries = tape.concat(&rows[n_support..])?;
        let logits = episode_logits(tape, queries, support, ways, m, k, temperature)?;
        let loss = tape.cross_entropy(logits, query_labels)?;
        Ok(EpisodeForward {
            loss,
            logits,
            batch_stats,
        })
    }

    /// Eval-mode unit-norm descriptor rows (`[M, D]`) of each image.
    pub fn describe(&self, images: &[&Tensor], bypass: bool) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, bypass || self.config.bypass);
        let x = tape.constant(stack_images(images)?);
        let (rows, _) = self.descriptor_rows(&mut tape, &vars, x, Mode::Eval)?;
        rows.into_iter()
            .map(|r| {
                let t = tape.value(r);
                let d = t.shape()[1];
                Ok(Tensor::new(t.shape(), unit_rows(t.data(), d))?)
            })
            .collect()
    }
}
