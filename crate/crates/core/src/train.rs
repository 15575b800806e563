//! Episodic training: one sampled episode per Adam step.

use ldca_tensor::{Adam, Tape, TensorError};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embedder::stack_images;
use crate::episode::{episode_rng, sample_episode, EpisodeSpec};
use crate::error::{LdcaError, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::Model;

/// Repetition tags keeping training and validation episode streams apart
/// from evaluation repetitions.
const TRAIN_STREAM: u64 = 1 << 20;
const VALIDATION_STREAM: u64 = 2 << 20;

/// Step-halving learning rate: `initial · 2^-floor(episode / halve_every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: u64,
}

impl LrSchedule {
    /// 0.001, halved every 100 000 episodes.
    pub fn full() -> Self {
        LrSchedule {
            initial: 0.001,
            halve_every: 100_000,
        }
    }

    pub fn lr(&self, episode: u64) -> f64 {
        let halvings = episode / self.halve_every.max(1);
        self.initial * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Episodes between validations; 0 means every 10% of training.
    pub every: u64,
    pub episodes: usize,
    pub queries: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            every: 0,
            episodes: 100,
            queries: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: u64,
    pub schedule: LrSchedule,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Neighbors per query descriptor in the training logits.
    pub k: usize,
    /// Logit temperature; `None` divides by the descriptor count.
    pub temperature: Option<f64>,
    pub validation: Option<ValidationConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// 300 000 episodes of 5-way 1-shot with 15 queries per class.
    pub fn full(seed: u64) -> Self {
        TrainConfig {
            episodes: 300_000,
            schedule: LrSchedule::full(),
            ways: 5,
            shots: 1,
            queries: 15,
            k: 1,
            temperature: None,
            validation: Some(ValidationConfig::default()),
            seed,
        }
    }

    /// 2000 episodes, halving every 667, 5 queries per class.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            episodes: 2000,
            schedule: LrSchedule {
                initial: 0.001,
                halve_every: 667,
            },
            queries: 5,
            ..Self::full(seed)
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            split: "train".into(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode_spec().validate()?;
        if self.k == 0 {
            return Err(LdcaError::Config("k must be positive".into()));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.initial.is_finite())
            || self.schedule.halve_every == 0
        {
            return Err(LdcaError::Config(format!(
                "learning rate schedule {:?} is invalid",
                self.schedule
            )));
        }
        if let Some(v) = &self.validation {
            if v.episodes == 0 || v.queries == 0 {
                return Err(LdcaError::Config(
                    "validation needs positive episode and query counts".into(),
                ));
            }
        }
        Ok(())
    }

    fn validation_interval(&self, v: &ValidationConfig) -> u64 {
        if v.every > 0 {
            v.every
        } else {
            (self.episodes / 10).max(1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub lr: f64,
    pub loss: f64,
    /// Training-batch query accuracy.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Episodes completed when validating.
    pub episode: u64,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best model by validation accuracy, or the final one without validation.
    pub model: Model,
    /// Episodes behind `model`.
    pub model_episodes: u64,
    pub history: Vec<EpisodeRecord>,
    pub validations: Vec<ValidationRecord>,
}

pub enum Progress<'a> {
    Episode(&'a EpisodeRecord),
    Validation(&'a ValidationRecord),
}

/// Trains `model` on the `train` split of `dataset`, validating on its `val`
/// split when configured and present.
///
/// The dataset's normalization is adopted by the model.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.normalization = dataset.normalization;
    model.train_dataset = Some(dataset.digest.clone());
    let train_split = dataset.split("train")?;
    let spec = cfg.episode_spec();
    spec.check_split(train_split)?;
    let m = model.config.descriptor_count(model.config.bypass);
    if cfg.k > cfg.shots * m {
        return Err(LdcaError::Config(format!(
            "training k = {} exceeds the class pool size {}",
            cfg.k,
            cfg.shots * m
        )));
    }
    let validation = cfg
        .validation
        .as_ref()
        .filter(|_| dataset.split("val").is_ok());

    let mut adam = Adam::new(cfg.schedule.initial);
    let mut history = Vec::with_capacity(cfg.episodes as usize);
    let mut validations = Vec::new();
    let mut best: Option<(f64, Model, u64)> = None;

    for ep in 0..cfg.episodes {
        let lr = cfg.schedule.lr(ep);
        let diverged = |e: LdcaError| match e {
            LdcaError::Tensor(TensorError::NonFinite { .. }) => {
                LdcaError::Diverged { episode: ep, lr }
            }
            e => e,
        };
        let episode = sample_episode(
            train_split,
            &spec,
            &mut episode_rng(cfg.seed, TRAIN_STREAM, ep),
        )?;
        let images = episode
            .support
            .iter()
            .chain(&episode.query)
            .map(|&r| train_split.image(r, &model.normalization))
            .collect::<Result<Vec<_>>>()?;
        let batch = stack_images(&images.iter().collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true, model.config.bypass);
        let x = tape.constant(batch);
        let fwd = model
            .episode_forward(
                &mut tape,
                &vars,
                x,
                cfg.ways,
                cfg.shots,
                &episode.query_labels,
                cfg.k,
                cfg.temperature,
            )
            .map_err(diverged)?;
        let loss = tape.value(fwd.loss).item()?;
        if !loss.is_finite() {
            return Err(LdcaError::Diverged { episode: ep, lr });
        }
        let logits = tape.value(fwd.logits).clone();
        let c = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(c)
            .zip(&episode.query_labels)
            .filter(|(row, &l)| crate::classifier::argmax(row) == l)
            .count();
        tape.backward(fwd.loss)?;

        let grads: Vec<_> = vars
            .vars()
            .into_iter()
            .map(|v| tape.grad(v).cloned())
            .collect();
        drop(tape);
        adam.lr = lr;
        let grad_refs: Vec<_> = grads.iter().map(Option::as_ref).collect();
        adam.step(&mut model.trainable_mut(), &grad_refs)?;
        model.embedder.update_running_stats(&fwd.batch_stats)?;

        let record = EpisodeRecord {
            episode: ep,
            lr,
            loss,
            accuracy: correct as f64 / episode.query_labels.len() as f64,
        };
        progress(Progress::Episode(&record));
        history.push(record);

        let done = ep + 1;
        if let Some(v) = validation {
            if done % cfg.validation_interval(v) == 0 || done == cfg.episodes {
                let opts = EvalOptions {
                    spec: EpisodeSpec {
                        ways: cfg.ways,
                        shots: cfg.shots,
                        queries: v.queries,
                        split: "val".into(),
                        seed: cfg.seed,
                    },
                    episodes: v.episodes,
                    k: cfg.k,
                    bypass: false,
                    repeat: VALIDATION_STREAM,
                };
                let report = evaluate(&model, dataset, &opts).map_err(diverged)?;
                let record = ValidationRecord {
                    episode: done,
                    accuracy: report.mean,
                    ci95: report.ci95,
                };
                progress(Progress::Validation(&record));
                if best
                    .as_ref()
                    .is_none_or(|(acc, _, _)| record.accuracy > *acc)
                {
                    best = Some((record.accuracy, model.clone(), done));
                }
                validations.push(record);
            }
        }
    }

    let (model, model_episodes) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, cfg.episodes),
    };
    Ok(TrainOutcome {
        model,
        model_episodes,
        history,
        validations,
    })
}
