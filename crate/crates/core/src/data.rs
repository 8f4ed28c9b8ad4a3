//! Datasets: synthetic two-domain scenarios, IDX image files, batch
//! sampling and scenario assembly.

mod idx;
mod sampler;
mod scenario;
mod synthetic;


use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use idx::{
    decode_images, decode_labels, encode_images, encode_labels, load_idx, to_idx, IdxImages, IMAGE_MAGIC, LABEL_MAGIC,
};
pub use sampler::{sample_batch, BatchSampler};
pub use scenario::{build_scenario, resolve_data_path, Scenario, ScenarioKind, ScenarioSpec, DATA_DIR_ENV};
pub use synthetic::{gen_blobs, gen_two_moons, upscale};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: expected magic 0x{expected:08x}, found 0x{found:08x}")]
    Format { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated, {missing} more bytes expected")]
    Truncated { path: String, missing: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("batch of {size} requested from {available} samples")]
    BatchTooLarge { size: usize, available: usize },
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

static LABEL_READS: [AtomicUsize; 6] = [const { AtomicUsize::new(0) }; 6];

fn slot(domain: Domain, split: Split) -> usize {
    (domain as usize) * 3 + split as usize
}

/// Number of times labels of `(domain, split)` were read through
/// [`DomainDataset::labels`] in this process.
pub fn label_reads(domain: Domain, split: Split) -> usize {
    LABEL_READS[slot(domain, split)].load(Ordering::Relaxed)
}

/// Labeled samples from one domain and split. Pixel and feature values are
/// already scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub x: Tensor,
    labels: Vec<usize>,
    pub domain: Domain,
    pub split: Split,
    pub classes: usize,
    /// `(rows, cols)` for image data.
    pub image_shape: Option<(usize, usize)>,
}

impl DomainDataset {
    pub fn new(x: Tensor, labels: Vec<usize>, domain: Domain, split: Split, classes: usize) -> Self {
        assert_eq!(x.rows(), labels.len(), "one label per row");
        assert!(labels.iter().all(|&l| l < classes), "label outside class range");
        Self { x, labels, domain, split, classes, image_shape: None }
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Self {
        self.image_shape = Some((rows, cols));
        self
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        LABEL_READS[slot(self.domain, self.split)].fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: rows_of(&self.x, idx), labels: idx.iter().map(|&i| self.labels[i]).collect(), ..self.clone() }
    }

    pub fn relabel(mut self, domain: Domain, split: Split) -> Self {
        self.domain = domain;
        self.split = split;
        self
    }

    /// Drops the labels, keeping only inputs.
    pub fn into_unlabeled(self) -> UnlabeledSet {
        UnlabeledSet { x: self.x, domain: self.domain, image_shape: self.image_shape }
    }
}

/// Inputs without labels. Target training data only ever exists in this
/// form.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub x: Tensor,
    pub domain: Domain,
    pub image_shape: Option<(usize, usize)>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn rows_of(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}
