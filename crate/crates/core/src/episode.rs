//! M-way K-shot episode sampling.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Split;
use crate::error::{LdcaError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    /// Query images per class.
    pub queries: usize,
    pub split: String,
    pub seed: u64,
}

impl EpisodeSpec {
    /// 5-way 1-shot with 15 queries per class.
    pub fn one_shot(split: &str, seed: u64) -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 1,
            queries: 15,
            split: split.to_string(),
            seed,
        }
    }

    /// 5-way 5-shot with 10 queries per class.
    pub fn five_shot(split: &str, seed: u64) -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 5,
            queries: 10,
            split: split.to_string(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(LdcaError::Config(format!(
                "an episode needs at least 2 ways, got {}",
                self.ways
            )));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(LdcaError::Config(format!(
                "shots ({}) and queries ({}) must be positive",
                self.shots, self.queries
            )));
        }
        Ok(())
    }

    /// Checks that `split` can host this spec.
    pub fn check_split(&self, split: &Split) -> Result<()> {
        self.validate()?;
        let need = self.shots + self.queries;
        let eligible = split
            .classes
            .iter()
            .filter(|c| c.images.len() >= need)
            .count();
        if eligible >= self.ways {
            return Ok(());
        }
        if split.classes.len() < self.ways {
            return Err(LdcaError::Data(format!(
                "split '{}' has {} classes, {} ways requested",
                split.name,
                split.classes.len(),
                self.ways
            )));
        }
        let short: Vec<String> = split
            .classes
            .iter()
            .filter(|c| c.images.len() < need)
            .map(|c| format!("{} ({} images)", c.name, c.images.len()))
            .collect();
        Err(LdcaError::Data(format!(
            "split '{}' needs {} images per class for {}-shot/{}-query episodes; short: {}",
            split.name,
            need,
            self.shots,
            self.queries,
            short.join(", ")
        )))
    }
}

/// One image of a split: class index within the split and image index
/// within the class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub class: usize,
    pub image: usize,
}

/// Support and query sets over `ways` classes, class-major. Episode-local
/// label `l` refers to split class `classes[l]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<ImageRef>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageRef>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    /// Stable content hash, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.support, &self.query] {
            h.update((part.len() as u64).to_le_bytes());
            for r in part {
                h.update((r.class as u64).to_le_bytes());
                h.update((r.image as u64).to_le_bytes());
            }
        }
        hex(&h.finalize()[..16])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic generator for episode `index` of repetition `repeat`.
pub fn episode_rng(seed: u64, repeat: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((repeat << 40) ^ index);
    rng
}

/// Draws `ways` classes without replacement, then `shots + queries` distinct
/// images per class; the first `shots` of each class are support.
pub fn sample_episode(split: &Split, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    spec.check_split(split)?;
    let need = spec.shots + spec.queries;
    let eligible: Vec<usize> = (0..split.classes.len())
        .filter(|&c| split.classes[c].images.len() >= need)
        .collect();
    let picked = sample(rng, eligible.len(), spec.ways);
    let classes: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::with_capacity(spec.ways * spec.shots),
        support_labels: Vec::with_capacity(spec.ways * spec.shots),
        query: Vec::with_capacity(spec.ways * spec.queries),
        query_labels: Vec::with_capacity(spec.ways * spec.queries),
    };
    for (label, &class) in classes.iter().enumerate() {
        let images = sample(rng, split.classes[class].images.len(), need);
        for (j, image) in images.iter().enumerate() {
            let r = ImageRef { class, image };
            if j < spec.shots {
                ep.support.push(r);
                ep.support_labels.push(label);
            } else {
                ep.query.push(r);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}
