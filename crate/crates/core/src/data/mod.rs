//! Labeled and partially labeled image domains.

mod export;
mod glyph;
mod idx;
mod pair;
mod sampling;

pub use export::{encode_pgm, export_pgm};
pub use glyph::{gen_glyph_domain, render_glyph, AffineJitter, GlyphStyle, CANVAS, FONT};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use pair::{DataConfig, DomainPair, GlyphPairConfig, IdxPairConfig};
pub use sampling::{batch_iter, split_per_class, strip_labels, subsample_per_class, BatchIter};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("class {class} has {have} labeled items, need {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Equally shaped images in `[-1, 1]` with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain_id: String,
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<Option<usize>>,
    class_count: usize,
    split: Split,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        image_shape: [usize; 3],
        pixels: Vec<f64>,
        labels: Vec<Option<usize>>,
        class_count: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let per: usize = image_shape.iter().product();
        if per == 0 {
            return Err(DataError::Invalid(format!("image shape {image_shape:?}")));
        }
        if pixels.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} pixels for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel {v} outside [-1, 1]")));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!(
                "label {l} outside 0..{class_count}"
            )));
        }
        Ok(DomainDataset {
            domain_id: domain_id.into(),
            image_shape,
            pixels,
            labels,
            class_count,
            split,
        })
    }

    /// SHA-256 over shape, class count, pixel bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.pixels.len() + self.labels.len() + 4));
        for d in self.image_shape.iter().chain([&self.class_count]) {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &self.pixels {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            bytes.extend_from_slice(&l.map_or(u64::MAX, |l| l as u64).to_le_bytes());
        }
        crate::sha256_hex(&bytes)
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Count of labeled items per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for l in self.labels.iter().flatten() {
            h[*l] += 1;
        }
        h
    }

    /// Gathers images into a `[B,C,H,W]` tensor with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<Option<usize>>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        (
            Tensor::from_raw(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// New dataset holding `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        DomainDataset {
            domain_id: self.domain_id.clone(),
            image_shape: self.image_shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub(crate) fn with_labels(&self, labels: Vec<Option<usize>>) -> DomainDataset {
        debug_assert_eq!(labels.len(), self.labels.len());
        DomainDataset {
            labels,
            ..self.clone()
        }
    }

    /// Same images and labels, relabeled every item with `f(label)`.
    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> DomainDataset {
        self.with_labels(self.labels.iter().map(|l| l.map(&f)).collect())
    }

    /// Replaces every label with `poison(label)`; used to prove a code path
    /// never reads target labels.
    pub fn poison_labels(&self, poison: impl Fn(Option<usize>) -> Option<usize>) -> DomainDataset {
        self.with_labels(self.labels.iter().map(|&l| poison(l)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        assert!(DomainDataset::new("d", [1, 1, 2], vec![0.0, 1.5], vec![Some(0)], 2, Split::Train).is_err());
        assert!(DomainDataset::new("d", [1, 1, 2], vec![0.0, 1.0], vec![Some(2)], 2, Split::Train).is_err());
        assert!(DomainDataset::new("d", [1, 1, 2], vec![0.0], vec![Some(0)], 2, Split::Train).is_err());
    }

    #[test]
    fn batch_gathers_in_order() {
        let ds = DomainDataset::new(
            "d",
            [1, 1, 2],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![Some(1), None],
            2,
            Split::Train,
        )
        .unwrap();
        let (x, y) = ds.batch(&[1, 0]);
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[0.3, 0.4, 0.1, 0.2]);
        assert_eq!(y, vec![None, Some(1)]);
        assert_eq!(ds.labeled_indices(), vec![0]);
        assert_eq!(ds.class_histogram(), vec![0, 1]);
    }
}
