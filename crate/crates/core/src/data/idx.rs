//! Big-endian IDX files: `u8` images (`0x00000803`) and labels
//! (`0x00000801`).

use std::path::Path;

use super::{DataError, Domain, DomainDataset, Split};
use crate::autodiff::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated { path: self.path.into(), missing: self.pos + n - self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let found = self.u32()?;
        if found != expected {
            return Err(DataError::Format { path: self.path.into(), expected, found });
        }
        Ok(())
    }
}

/// `path` only labels errors.
pub fn decode_images(bytes: &[u8], path: &str) -> Result<IdxImages, DataError> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.take(count * rows * cols)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn decode_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>, DataError> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.to_vec())
}

pub fn encode_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IMAGE_MAGIC, img.count as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Loads an image/label file pair; pixels are divided by 255. The class
/// count is one more than the largest label, and at least 2.
pub fn load_idx(images: &Path, labels: &Path, domain: Domain, split: Split) -> Result<DomainDataset, DataError> {
    let img = decode_images(&read(images)?, &images.display().to_string())?;
    let lab = decode_labels(&read(labels)?, &labels.display().to_string())?;
    if img.count != lab.len() {
        return Err(DataError::CountMismatch { images: img.count, labels: lab.len() });
    }
    let x = Tensor::matrix(img.count, img.rows * img.cols, img.pixels.iter().map(|&p| p as f64 / 255.0).collect());
    let classes = lab.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let y = lab.iter().map(|&l| l as usize).collect();
    Ok(DomainDataset::new(x, y, domain, split, classes).with_image_shape(img.rows, img.cols))
}

/// Inverse of [`load_idx`] for byte-valued data: `(images, labels)` file
/// contents.
pub fn to_idx(ds: &DomainDataset) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = ds.image_shape.unwrap_or((1, ds.x.cols()));
    let pixels = ds.x.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = IdxImages { count: ds.len(), rows, cols, pixels };
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    (encode_images(&img), encode_labels(&labels))
}
