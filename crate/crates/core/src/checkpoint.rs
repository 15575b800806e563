//! Checkpoint container.
//!
//! Layout: the 8-byte magic `LDCACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every array
//! listed in the manifest as little-endian `f64` values, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ldca_tensor::nn::RunningStats;
use ldca_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::ChannelStats;
use crate::error::{LdcaError, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"LDCACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// [`Model::fingerprint`] of the stored model.
    pub fingerprint: String,
    /// Hash of the run configuration that produced the model, if any.
    pub config_fingerprint: Option<String>,
    /// Training episodes behind the stored parameters.
    pub episodes: u64,
    pub model: ModelConfig,
    pub normalization: ChannelStats,
    pub train_dataset: Option<String>,
    pub arrays: Vec<ArrayEntry>,
}

/// A model plus its manifest metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub episodes: u64,
    pub config_fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model, episodes: u64, config_fingerprint: Option<String>) -> Self {
        Checkpoint {
            model,
            episodes,
            config_fingerprint,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            fingerprint: self.model.fingerprint(),
            config_fingerprint: self.config_fingerprint.clone(),
            episodes: self.episodes,
            model: self.model.config.clone(),
            normalization: self.model.normalization,
            train_dataset: self.model.train_dataset.clone(),
            arrays: self
                .model
                .arrays()
                .into_iter()
                .map(|(name, t)| ArrayEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())
            .map_err(|e| LdcaError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.model.arrays() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(LdcaError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(LdcaError::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| LdcaError::Checkpoint(format!("manifest: {e}")))?;
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                LdcaError::Checkpoint(format!("array {} is too large", entry.name))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&entry.shape, data)
                .map_err(|e| LdcaError::Checkpoint(format!("array {}: {e}", entry.name)))?;
            if arrays.insert(entry.name.clone(), t).is_some() {
                return Err(LdcaError::Checkpoint(format!(
                    "duplicate array {}",
                    entry.name
                )));
            }
        }
        if r.pos != bytes.len() {
            return Err(LdcaError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut model = Model::init(manifest.model.clone(), 0)?;
        model.normalization = manifest.normalization;
        model.train_dataset = manifest.train_dataset.clone();
        restore(&mut model, arrays)?;
        if model.fingerprint() != manifest.fingerprint {
            return Err(LdcaError::Checkpoint(
                "fingerprint does not match the stored arrays".into(),
            ));
        }
        Ok(Checkpoint {
            model,
            episodes: manifest.episodes,
            config_fingerprint: manifest.config_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LdcaError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| LdcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LdcaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LdcaError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn restore(model: &mut Model, mut arrays: BTreeMap<String, Tensor>) -> Result<()> {
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = arrays
            .remove(name)
            .ok_or_else(|| LdcaError::Checkpoint(format!("missing array {name}")))?;
        if t.shape() != shape {
            return Err(LdcaError::Checkpoint(format!(
                "array {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut targets: Vec<&mut Tensor> = Vec::new();
    {
        use ldca_tensor::nn::Parameters;
        targets.extend(
            model
                .embedder
                .named_tensors_mut()
                .into_iter()
                .map(|(_, t)| t),
        );
        targets.extend(model.ldca.named_tensors_mut().into_iter().map(|(_, t)| t));
    }
    for (name, target) in names.iter().zip(targets) {
        let shape = target.shape().to_vec();
        *target = take(name, &shape)?;
    }
    for (i, b) in model.embedder.blocks.iter_mut().enumerate() {
        let c = [b.running.mean.len()];
        let mean = take(&format!("embedder.block{i}.running_mean"), &c)?;
        let var = take(&format!("embedder.block{i}.running_var"), &c)?;
        b.running = RunningStats::from_tensors(mean, var)?;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(LdcaError::Checkpoint(format!("unexpected array {extra}")));
    }
    Ok(())
}
