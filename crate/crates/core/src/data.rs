//! Image batches for classification training.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Images of identical `[C, H, W]` shape with integer class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::invalid("images must share one shape"));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected images into an NCHW batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (stack(&refs), labels)
    }
}

/// `[C, H, W]` tensors to one `[N, C, H, W]` tensor.
pub fn stack(images: &[&Tensor]) -> Tensor {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for t in images {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("stacked shape matches")
}
