//! Procedural datasets with class-discriminative color and pattern.
//!
//! Every class gets its own hue, pattern frequency and orientation (or ring
//! center). Hues are stratified over all classes of all splits so no two
//! classes share one. Per-image variation (hue, angle, frequency,
//! brightness, phase and pixel noise) is scaled by `noise`; at zero noise all
//! images of a class are identical.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassImages, ImageRecord, Split, SPLITS};
use crate::error::{LdcaError, Result};

pub const SPEC_FILE: &str = "synthetic.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Oriented sinusoidal gratings.
    Stripes,
    /// Concentric rings around a class-specific center.
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub side: usize,
    pub family: Family,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 10/5/5 classes of 30 images, 32 pixels square.
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            train_classes: 10,
            val_classes: 5,
            test_classes: 5,
            images_per_class: 30,
            side: 32,
            family: Family::Stripes,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_classes + self.val_classes + self.test_classes == 0 {
            return Err(LdcaError::Config("synthetic spec has no classes".into()));
        }
        if self.images_per_class == 0 || self.side < 4 {
            return Err(LdcaError::Config(format!(
                "need ≥ 1 image per class and side ≥ 4, got {} and {}",
                self.images_per_class, self.side
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(LdcaError::Config(format!(
                "noise must be a finite non-negative number, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    fn counts(&self) -> [usize; 3] {
        [self.train_classes, self.val_classes, self.test_classes]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPattern {
    pub hue: f64,
    /// Cycles across the image side.
    pub frequency: f64,
    /// Grating angle (stripes) or ring center offset angle (rings).
    pub angle: f64,
}

/// Generative parameters of every class, in split order.
pub fn class_patterns(spec: &SyntheticSpec) -> Vec<ClassPattern> {
    let total: usize = spec.counts().iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(&mut rng);
    slots
        .into_iter()
        .map(|slot| ClassPattern {
            hue: (slot as f64 + rng.random_range(0.2..0.8)) / total as f64,
            frequency: rng.random_range(1.5..5.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one `side × side` RGB image.
///
/// With noise level `a > 0`, each image draws a uniformly random pattern
/// phase, a brightness factor (std `0.5·a`), small shifts of hue (std
/// `0.02·a`), angle (std `0.15·a` rad) and relative frequency (std `0.1·a`),
/// then gets per-pixel Gaussian noise of std `a`.
pub fn render(
    pattern: &ClassPattern,
    family: Family,
    side: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    use std::f64::consts::TAU;
    let a = noise;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut jitter = |scale: f64| {
        if a > 0.0 {
            scale * a * std_normal.sample(rng)
        } else {
            0.0
        }
    };
    let hue = pattern.hue + jitter(0.02);
    let angle = pattern.angle + jitter(0.15);
    let frequency = pattern.frequency * (1.0 + jitter(0.1)).max(0.2);
    let brightness = (1.0 + jitter(0.5)).clamp(0.3, 1.7);
    let phase = if a > 0.0 {
        rng.random_range(0.0..TAU)
    } else {
        0.0
    };
    let fg = hsv(hue, 0.85, 0.95);
    let bg = hsv(hue + 0.5, 0.35, 0.25);
    let s = side as f64;
    let (cx, cy) = (0.5 + 0.2 * angle.cos(), 0.5 + 0.2 * angle.sin());
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let t = match family {
                Family::Stripes => u * angle.cos() + v * angle.sin(),
                Family::Rings => ((u - cx).powi(2) + (v - cy).powi(2)).sqrt(),
            };
            let w = 0.5 + 0.5 * (TAU * frequency * t + phase).sin();
            for c in 0..3 {
                let mut val = brightness * (bg[c] + (fg[c] - bg[c]) * w);
                if a > 0.0 {
                    val += a * std_normal.sample(rng);
                }
                out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn class_name(i: usize) -> String {
    format!("class_{i:03}")
}

fn image_name(j: usize) -> String {
    format!("img_{j:03}.png")
}

/// The whole dataset in memory. Paths are those [`generate_synthetic`]
/// writes relative to its output directory.
pub fn generate_splits(spec: &SyntheticSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let patterns = class_patterns(spec);
    let mut next = 0;
    let mut splits = Vec::new();
    for (split, count) in SPLITS.iter().zip(spec.counts()) {
        if count == 0 {
            continue;
        }
        let mut classes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(next as u64 + 1);
            let images = (0..spec.images_per_class)
                .map(|j| ImageRecord {
                    path: PathBuf::from(split)
                        .join(class_name(next))
                        .join(image_name(j)),
                    pixels: render(
                        &patterns[next],
                        spec.family,
                        spec.side,
                        spec.noise,
                        &mut rng,
                    ),
                })
                .collect();
            classes.push(ClassImages {
                name: class_name(next),
                images,
            });
            next += 1;
        }
        splits.push(Split {
            name: split.to_string(),
            side: spec.side,
            classes,
        });
    }
    Ok(splits)
}

/// Writes the dataset as `out/<split>/<class>/<image>.png` plus a copy of
/// the spec. A non-empty `out` is refused unless `overwrite` is set, in which
/// case previously generated split directories are replaced.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path, overwrite: bool) -> Result<usize> {
    spec.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| LdcaError::io(out, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(LdcaError::Usage(format!(
                "{} exists and is not empty; pass the overwrite flag to replace it",
                out.display()
            )));
        }
        for split in SPLITS {
            let dir = out.join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| LdcaError::io(&dir, e))?;
            }
        }
    }
    let splits = generate_splits(spec)?;
    let mut written = 0;
    for split in &splits {
        for class in &split.classes {
            let dir = out.join(&split.name).join(&class.name);
            fs::create_dir_all(&dir).map_err(|e| LdcaError::io(&dir, e))?;
            for img in &class.images {
                let path = out.join(&img.path);
                let side = spec.side as u32;
                image::save_buffer(&path, &img.pixels, side, side, image::ColorType::Rgb8)
                    .map_err(|e| LdcaError::Image {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                written += 1;
            }
        }
    }
    let spec_path = out.join(SPEC_FILE);
    let text = toml::to_string(spec).map_err(|e| LdcaError::Config(e.to_string()))?;
    fs::write(&spec_path, text).map_err(|e| LdcaError::io(&spec_path, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hues_are_distinct() {
        let spec = SyntheticSpec::desk(3);
        let mut hues: Vec<f64> = class_patterns(&spec).iter().map(|p| p.hue).collect();
        hues.sort_by(f64::total_cmp);
        assert!(hues.windows(2).all(|w| w[1] - w[0] > 0.1 / 20.0));
    }

    #[test]
    fn zero_noise_images_repeat_within_class() {
        let mut spec = SyntheticSpec::desk(1);
        spec.noise = 0.0;
        spec.images_per_class = 3;
        let splits = generate_splits(&spec).unwrap();
        for s in &splits {
            for c in &s.classes {
                assert!(c.images.iter().all(|i| i.pixels == c.images[0].pixels));
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
