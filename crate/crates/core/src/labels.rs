use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Marks pixels whose warped source fell outside the image.
pub const INVALID_LABEL: u32 = u32::MAX;

/// `H×W` cluster assignment, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map with {} labels",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    /// Per-pixel argmax over the channels of a `1×K×H×W` score tensor; ties
    /// go to the lowest channel.
    pub fn argmax<T: Scalar>(scores: &Tensor<T>) -> Result<Self> {
        let (n, k, h, w) = scores.dims4()?;
        if n != 1 {
            return Err(Error::Shape(format!("argmax expects batch 1, got {n}")));
        }
        let hw = h * w;
        let data = scores.data();
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if data[c * hw + p] > data[best * hw + p] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        Ok(Self { height: h, width: w, labels })
    }

    /// Number of distinct labels, ignoring [`INVALID_LABEL`].
    pub fn unique_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != INVALID_LABEL).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}
