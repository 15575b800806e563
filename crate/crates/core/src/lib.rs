//! Few-shot image classification with context-augmented local descriptors.
//!
//! A Conv4 embedder turns each image into a grid of local descriptors. The
//! augmenter pools that grid, runs transformer blocks over patch tokens and
//! adds the resulting context back onto relu-gated descriptors. Queries are
//! classified by summing, over their descriptors, the top-k cosine
//! similarities within each class's pooled support descriptors.
//!
//! ```
//! use ldca::ldca::{augment, init_ldca, LdcaConfig};
//! use ldca::embedder::{embed_image, init_embedder, Mode};
//! use ldca_tensor::Tensor;
//!
//! let image = Tensor::full(&[3, 32, 32], 0.5);
//! let map = embed_image(&image, &init_embedder(0), Mode::Eval).unwrap();
//! assert_eq!(map.tensor().shape(), &[64, 8, 8]);
//!
//! let cfg = LdcaConfig::desk();
//! let out = augment(&map, &init_ldca(&cfg, 0).unwrap(), &cfg, false).unwrap();
//! assert!(out.augmented);
//! assert_eq!(out.map.tensor().shape(), &[64, 8, 8]);
//! ```

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod descriptors;
pub mod embedder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ldca;
pub mod model;
pub mod synthetic;
pub mod train;

pub use error::{LdcaError, Result};
