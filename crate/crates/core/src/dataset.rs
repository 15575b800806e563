//! Image dataset layout, loading and normalization.
//!
//! Two layouts are accepted:
//!
//! * `root/{train,val,test}/<class>/<image>`: split subdirectories;
//! * `root/<class>/<image>` plus `root/manifest.json` of the form
//!   `{"train": ["a", ...], "val": [...], "test": [...]}`.
//!
//! PNG and JPEG files are decoded to RGB, resized to `S × S`, scaled to
//! `[0, 1]` and normalized per channel with statistics of the train split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ldca_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::{hex, ImageRef};
use crate::error::{LdcaError, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST: &str = "manifest.json";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resize {
    #[default]
    Bilinear,
    Nearest,
}

/// Per-channel mean and standard deviation of `[0, 1]` pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Population statistics over every pixel of every image in `split`.
    /// A channel with zero spread gets std 1.
    pub fn of_split(split: &Split) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for class in &split.classes {
            for img in &class.images {
                for px in img.pixels.chunks_exact(3) {
                    for c in 0..3 {
                        let v = px[c] as f64 / 255.0;
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                n += img.pixels.len() / 3;
            }
        }
        if n == 0 {
            return Err(LdcaError::Data(format!(
                "split '{}' has no images to compute normalization from",
                split.name
            )));
        }
        let mut stats = ChannelStats::identity();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            stats.mean[c] = mean;
            stats.std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(stats)
    }
}

/// One resized image, `S × S × 3` RGB bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub name: String,
    pub side: usize,
    pub classes: Vec<ClassImages>,
}

impl Split {
    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    fn record(&self, r: ImageRef) -> Result<&ImageRecord> {
        self.classes
            .get(r.class)
            .and_then(|c| c.images.get(r.image))
            .ok_or_else(|| {
                LdcaError::Usage(format!(
                    "image {}:{} is not in split '{}'",
                    r.class, r.image, self.name
                ))
            })
    }

    /// Normalized `3 × S × S` tensor for one image.
    pub fn image(&self, r: ImageRef, stats: &ChannelStats) -> Result<Tensor> {
        let rec = self.record(r)?;
        let plane = self.side * self.side;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rec.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (px[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c];
            }
        }
        Ok(Tensor::new(&[3, self.side, self.side], data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub side: usize,
    pub splits: Vec<Split>,
    pub normalization: ChannelStats,
    /// Content hash over class names and resized pixels.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub side: usize,
    pub resize: Resize,
    /// Use these statistics instead of computing them from the train split.
    pub normalization: Option<ChannelStats>,
}

impl LoadOptions {
    pub fn new(side: usize) -> Self {
        LoadOptions {
            side,
            resize: Resize::Bilinear,
            normalization: None,
        }
    }
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits.iter().find(|s| s.name == name).ok_or_else(|| {
            LdcaError::Data(format!(
                "dataset {} has no '{name}' split",
                self.root.display()
            ))
        })
    }

    /// Builds a dataset from in-memory splits, computing normalization from
    /// the train split unless `normalization` is given.
    pub fn from_splits(
        root: impl Into<PathBuf>,
        splits: Vec<Split>,
        normalization: Option<ChannelStats>,
    ) -> Result<Self> {
        let side = splits.first().map_or(0, |s| s.side);
        if splits.iter().any(|s| s.side != side) {
            return Err(LdcaError::Data("splits disagree on image side".into()));
        }
        check_disjoint(
            &splits
                .iter()
                .map(|s| {
                    (
                        s.name.clone(),
                        s.classes.iter().map(|c| c.name.clone()).collect(),
                    )
                })
                .collect::<Vec<_>>(),
        )?;
        let normalization = match normalization {
            Some(n) => n,
            None => {
                let train = splits.iter().find(|s| s.name == "train").ok_or_else(|| {
                    LdcaError::Data(
                        "no train split to compute normalization from and none supplied".into(),
                    )
                })?;
                ChannelStats::of_split(train)?
            }
        };
        let digest = digest(&splits);
        Ok(Dataset {
            root: root.into(),
            side,
            splits,
            normalization,
            digest,
        })
    }
}

fn digest(splits: &[Split]) -> String {
    let mut h = Sha256::new();
    h.update((splits.first().map_or(0, |s| s.side) as u64).to_le_bytes());
    for s in splits {
        h.update(s.name.as_bytes());
        h.update([0]);
        for c in &s.classes {
            h.update(c.name.as_bytes());
            h.update([0]);
            h.update((c.images.len() as u64).to_le_bytes());
            for img in &c.images {
                h.update(&img.pixels);
            }
        }
    }
    hex(&h.finalize()[..16])
}

/// Rejects any class name that appears in more than one split.
pub fn check_disjoint(splits: &[(String, Vec<String>)]) -> Result<()> {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut clashes = Vec::new();
    for (split, classes) in splits {
        for c in classes {
            if let Some(prev) = owner.insert(c, split) {
                if prev != split {
                    clashes.push(format!("{c} ({prev}, {split})"));
                }
            }
        }
    }
    if clashes.is_empty() {
        Ok(())
    } else {
        Err(LdcaError::Data(format!(
            "classes appear in more than one split: {}",
            clashes.join(", ")
        )))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    val: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| LdcaError::io(dir, e))? {
        let entry = entry.map_err(|e| LdcaError::io(dir, e))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .is_some_and(|e| EXTENSIONS.contains(&e.as_str()))
}

/// Decodes one file to `side × side` RGB bytes.
pub fn load_image(path: &Path, side: usize, resize: Resize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| LdcaError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let s = side as u32;
    let rgb = if rgb.dimensions() == (s, s) {
        rgb
    } else {
        let filter = match resize {
            Resize::Bilinear => FilterType::Triangle,
            Resize::Nearest => FilterType::Nearest,
        };
        image::imageops::resize(&rgb, s, s, filter)
    };
    Ok(rgb.into_raw())
}

fn load_class(dir: &Path, name: &str, opts: &LoadOptions) -> Result<ClassImages> {
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| is_image(p))
        .collect();
    if files.is_empty() {
        return Err(LdcaError::Data(format!(
            "class directory {} has no images",
            dir.display()
        )));
    }
    let images = files
        .into_iter()
        .map(|path| {
            let pixels = load_image(&path, opts.side, opts.resize)?;
            Ok(ImageRecord { path, pixels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassImages {
        name: name.to_string(),
        images,
    })
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scans the class names of every split without decoding images.
pub fn scan_layout(root: &Path) -> Result<Vec<(String, Vec<String>)>> {
    if !root.is_dir() {
        return Err(LdcaError::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let manifest = root.join(MANIFEST);
    let layout = if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| LdcaError::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| LdcaError::Data(format!("{}: {e}", manifest.display())))?;
        vec![
            ("train".to_string(), m.train),
            ("val".to_string(), m.val),
            ("test".to_string(), m.test),
        ]
    } else {
        let mut layout = Vec::new();
        for split in SPLITS {
            let dir = root.join(split);
            if !dir.is_dir() {
                continue;
            }
            let classes = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.is_dir())
                .map(|p| dir_name(&p))
                .collect();
            layout.push((split.to_string(), classes));
        }
        layout
    };
    let layout: Vec<_> = layout.into_iter().filter(|(_, c)| !c.is_empty()).collect();
    if layout.is_empty() {
        return Err(LdcaError::Data(format!(
            "{} has neither split directories nor a {MANIFEST}",
            root.display()
        )));
    }
    check_disjoint(&layout)?;
    Ok(layout)
}

/// Loads every split under `root`.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if opts.side == 0 {
        return Err(LdcaError::Config("image side must be positive".into()));
    }
    let layout = scan_layout(root)?;
    let with_manifest = root.join(MANIFEST).is_file();
    let splits = layout
        .into_iter()
        .map(|(name, classes)| {
            let classes = classes
                .iter()
                .map(|c| {
                    let dir = if with_manifest {
                        root.join(c)
                    } else {
                        root.join(&name).join(c)
                    };
                    load_class(&dir, c, opts)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Split {
                name,
                side: opts.side,
                classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_splits(root, splits, opts.normalization)
}
