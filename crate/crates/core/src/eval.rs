//! Episodic evaluation, k sweeps and metrics output.
//!
//! In eval mode an image's descriptors do not depend on the rest of its
//! batch, so every distinct image drawn by any episode is described once and
//! the episodes are then classified from that cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ldca_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{argmax, batch_scores};
use crate::dataset::{Dataset, Split};
use crate::episode::{episode_rng, hex, sample_episode, Episode, EpisodeSpec, ImageRef};
use crate::error::{LdcaError, Result};
use crate::model::Model;

/// Images described per forward pass.
const DESCRIBE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub k: usize,
    /// Classify raw descriptors even if the model has an augmenter.
    pub bypass: bool,
    /// Repetition index; repetitions draw independent episode sequences.
    pub repeat: u64,
}

impl EvalOptions {
    /// 600 episodes on the test split, k = 1.
    pub fn new(spec: EpisodeSpec) -> Self {
        EvalOptions {
            spec,
            episodes: 600,
            k: 1,
            bypass: false,
            repeat: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// 95% confidence half-width, `1.96 · s / √n` with the sample std `s`.
    pub ci95: f64,
    pub n: usize,
    pub k: usize,
    pub fingerprint: String,
    pub model: String,
    pub dataset: String,
    pub train_dataset: Option<String>,
    pub split: String,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub repeat: u64,
    pub bypass: bool,
    pub episode_hashes: Vec<String>,
}

/// The JSON-facing part of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    pub k: usize,
    pub fingerprint: String,
    pub model: String,
    pub dataset: String,
    pub train_dataset: Option<String>,
    pub split: String,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub repeat: u64,
    pub bypass: bool,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        Summary {
            mean: self.mean,
            ci95: self.ci95,
            n: self.n,
            k: self.k,
            fingerprint: self.fingerprint.clone(),
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            train_dataset: self.train_dataset.clone(),
            split: self.split.clone(),
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            seed: self.seed,
            repeat: self.repeat,
            bypass: self.bypass,
        }
    }
}

/// Mean and 95% half-width of a list of accuracies. The half-width is 0 for
/// fewer than two values and for constant lists.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

fn fingerprint(
    model: &str,
    dataset: &str,
    train: Option<&str>,
    opts: &EvalOptions,
    bypass: bool,
) -> String {
    let mut h = Sha256::new();
    let fields = serde_json::json!({
        "model": model,
        "dataset": dataset,
        "train_dataset": train,
        "spec": opts.spec,
        "episodes": opts.episodes,
        "k": opts.k,
        "bypass": bypass,
        "repeat": opts.repeat,
    });
    h.update(fields.to_string().as_bytes());
    hex(&h.finalize()[..16])
}

/// Samples the episode sequence of `opts`.
pub fn sample_episodes(split: &Split, opts: &EvalOptions) -> Result<Vec<Episode>> {
    (0..opts.episodes)
        .map(|i| {
            let mut rng = episode_rng(opts.spec.seed, opts.repeat, i as u64);
            sample_episode(split, &opts.spec, &mut rng)
        })
        .collect()
}

/// Unit descriptor rows of every image used by `episodes`.
pub fn describe_images(
    model: &Model,
    split: &Split,
    episodes: &[Episode],
    bypass: bool,
) -> Result<BTreeMap<ImageRef, Tensor>> {
    let used: Vec<ImageRef> = episodes
        .iter()
        .flat_map(|e| e.support.iter().chain(&e.query).copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let chunks: Vec<Vec<(ImageRef, Tensor)>> = used
        .par_chunks(DESCRIBE_BATCH)
        .map(|refs| {
            let images = refs
                .iter()
                .map(|&r| split.image(r, &model.normalization))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<&Tensor> = images.iter().collect();
            let rows = model.describe(&views, bypass)?;
            Ok(refs.iter().copied().zip(rows).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows[0].shape()[1];
    let data: Vec<f64> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Ok(Tensor::new(&[data.len() / d, d], data)?)
}

/// Fraction of queries of `episode` classified correctly with each `k`.
pub fn episode_accuracy(
    episode: &Episode,
    cache: &BTreeMap<ImageRef, Tensor>,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let get = |r: &ImageRef| {
        cache
            .get(r)
            .ok_or_else(|| LdcaError::Usage(format!("image {r:?} was not described")))
    };
    let ways = episode.ways();
    let mut support = Vec::with_capacity(episode.support.len());
    for label in 0..ways {
        for (r, _) in episode
            .support
            .iter()
            .zip(&episode.support_labels)
            .filter(|(_, &l)| l == label)
        {
            support.push(get(r)?);
        }
    }
    let queries = episode.query.iter().map(get).collect::<Result<Vec<_>>>()?;
    let m = queries[0].shape()[0];
    let tables = batch_scores(&stack_rows(&queries)?, &stack_rows(&support)?, ways, m, ks)?;
    Ok(tables
        .iter()
        .map(|table| {
            let correct = table
                .chunks(ways)
                .zip(&episode.query_labels)
                .filter(|(scores, &l)| argmax(scores) == l)
                .count();
            correct as f64 / episode.query.len() as f64
        })
        .collect())
}

fn check_k(model: &Model, opts: &EvalOptions, ks: &[usize], bypass: bool) -> Result<()> {
    let pool = opts.spec.shots * model.config.descriptor_count(bypass);
    match ks.iter().find(|&&k| k == 0 || k > pool) {
        Some(k) => Err(LdcaError::Config(format!(
            "k = {k} is outside 1..={pool} (class pool size)"
        ))),
        None if ks.is_empty() => Err(LdcaError::Config("no k values given".into())),
        None => Ok(()),
    }
}

/// One report per `k`, all over the same episodes.
pub fn sweep_k(
    model: &Model,
    dataset: &Dataset,
    opts: &EvalOptions,
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let bypass = opts.bypass || model.config.bypass;
    check_k(model, opts, ks, bypass)?;
    if opts.episodes == 0 {
        return Err(LdcaError::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let split = dataset.split(&opts.spec.split)?;
    let episodes = sample_episodes(split, opts)?;
    let cache = describe_images(model, split, &episodes, bypass)?;
    let per_episode: Vec<Vec<f64>> = episodes
        .par_iter()
        .map(|e| episode_accuracy(e, &cache, ks))
        .collect::<Result<Vec<_>>>()?;
    let hashes: Vec<String> = episodes.iter().map(Episode::hash).collect();
    let model_fp = model.fingerprint();
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let accuracies: Vec<f64> = per_episode.iter().map(|a| a[j]).collect();
            let (mean, ci95) = mean_ci95(&accuracies);
            let o = EvalOptions { k, ..opts.clone() };
            EvalReport {
                n: accuracies.len(),
                accuracies,
                mean,
                ci95,
                k,
                fingerprint: fingerprint(
                    &model_fp,
                    &dataset.digest,
                    model.train_dataset.as_deref(),
                    &o,
                    bypass,
                ),
                model: model_fp.clone(),
                dataset: dataset.digest.clone(),
                train_dataset: model.train_dataset.clone(),
                split: opts.spec.split.clone(),
                ways: opts.spec.ways,
                shots: opts.spec.shots,
                queries: opts.spec.queries,
                seed: opts.spec.seed,
                repeat: opts.repeat,
                bypass,
                episode_hashes: hashes.clone(),
            }
        })
        .collect())
}

/// Mean accuracy over sampled episodes with eval-mode batch norm.
pub fn evaluate(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    Ok(sweep_k(model, dataset, opts, &[opts.k])?.remove(0))
}

/// [`evaluate`] on a dataset other than the one the model was trained on.
/// The report records both dataset identities.
pub fn cross_domain_eval(model: &Model, other: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if model.train_dataset.is_none() {
        return Err(LdcaError::Usage(
            "the model does not record its training dataset".into(),
        ));
    }
    evaluate(model, other, opts)
}

/// Largest minus smallest mean accuracy across rows.
pub fn spread(rows: &[EvalReport]) -> f64 {
    let means = rows.iter().map(|r| r.mean);
    means.clone().fold(f64::NEG_INFINITY, f64::max) - means.fold(f64::INFINITY, f64::min)
}

/// `episode_index,accuracy,k,repeat` rows for every report.
pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("episode_index,accuracy,k,repeat\n");
    for r in reports {
        for (i, a) in r.accuracies.iter().enumerate() {
            let _ = writeln!(out, "{i},{a},{},{}", r.k, r.repeat);
        }
    }
    out
}

pub fn write_metrics_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::write(path, metrics_csv(reports)).map_err(|e| LdcaError::io(path, e))
}
