use ldca_tensor::Tensor;

use crate::error::{LdcaError, Result};

/// Per-image local descriptors laid out as a `D × H × W` feature map.
///
/// Descriptor `i` (of `M = H·W`) is the `D`-vector at spatial cell
/// `(i / W, i % W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap {
    data: Tensor,
}

impl DescriptorMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(LdcaError::Input(format!(
                "descriptor map must be D×H×W, got {:?}",
                data.shape()
            )));
        }
        Ok(DescriptorMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Number of descriptors `M = H·W`.
    pub fn count(&self) -> usize {
        self.height() * self.width()
    }

    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.width(), i % self.width())
    }

    pub fn index_of(&self, row: usize, col: usize) -> usize {
        row * self.width() + col
    }

    pub fn descriptor(&self, i: usize) -> Vec<f64> {
        let m = self.count();
        (0..self.channels())
            .map(|c| self.data.data()[c * m + i])
            .collect()
    }

    /// All descriptors as an `M × D` row-major matrix.
    pub fn rows(&self) -> Vec<f64> {
        let (d, m) = (self.channels(), self.count());
        let src = self.data.data();
        let mut out = vec![0.0; m * d];
        for c in 0..d {
            for i in 0..m {
                out[i * d + c] = src[c * m + i];
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Output of the augmenter: a descriptor map plus whether contextual
/// augmentation actually ran (`false` in bypass mode).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDescriptorMap {
    pub map: DescriptorMap,
    pub augmented: bool,
}
