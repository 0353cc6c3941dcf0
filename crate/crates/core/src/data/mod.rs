//! Labeled image data, incremental task streams and input-space transforms.

mod corrupt;
mod glyphs;
mod idx;
mod rotate;
mod sst;
mod stream;

pub use corrupt::{corrupt, Corruption};
pub use glyphs::{generate_glyphs, glyph_alphabet_size};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use rotate::{rotate90, Rotation};
pub use sst::{apply_sst, SstDataset};
pub use stream::{make_task_stream, StreamMode, Task, TaskStream};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// `N×C×H×W` images with values in `[0, 1]` and class indices in `[0, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    channels: usize,
    size: usize,
}

impl LabeledDataset {
    /// Checks square images, payload length and label range. Use
    /// [`LabeledDataset::check_all_classes_present`] for full datasets.
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height != width {
            return Err(dim_err!("images must be square, got {height}x{width}"));
        }
        if channels == 0 || height == 0 {
            return Err(dim_err!("empty image geometry {channels}x{height}x{width}"));
        }
        let per = channels * height * width;
        if images.len() != labels.len() * per {
            return Err(dim_err!(
                "{} pixel values for {} images of {per}",
                images.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            channels,
            size: height,
        })
    }

    pub fn check_all_classes_present(&self) -> Result<()> {
        let hist = self.class_histogram();
        if let Some(k) = hist.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {k} has no samples")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Side length of the square images.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// `(N, C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.len(), self.channels, self.size, self.size)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            channels: self.channels,
            size: self.size,
        }
    }

    /// Replaces labels through `map`, declaring `num_classes` new classes.
    pub fn relabel(&self, num_classes: usize, map: impl Fn(usize) -> usize) -> Result<Self> {
        LabeledDataset::new(
            self.images.clone(),
            self.labels.iter().map(|&y| map(y)).collect(),
            num_classes,
            self.channels,
            self.size,
            self.size,
        )
    }

    /// Stacks the given samples into a `B×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data)
    }

    /// Concatenates datasets with identical geometry and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let Some(first) = parts.first() else {
            return Err(Error::Argument("concat of no datasets".into()));
        };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if (p.channels, p.size, p.num_classes) != (first.channels, first.size, first.num_classes)
            {
                return Err(dim_err!("datasets with different geometry"));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
        }
        LabeledDataset::new(
            images,
            labels,
            first.num_classes,
            first.channels,
            first.size,
            first.size,
        )
    }

    pub(crate) fn map_images(&self, images: Vec<f64>) -> LabeledDataset {
        debug_assert_eq!(images.len(), self.images.len());
        LabeledDataset {
            images,
            ..self.clone()
        }
    }
}
