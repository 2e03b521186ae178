//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixels (row-major 32x32 planes).

use std::fs;
use std::path::Path;

use super::BenchError;
use crate::tensor::{Tensor, TensorShape};

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_SHAPE: TensorShape = TensorShape {
    n: 1,
    c: 3,
    h: 32,
    w: 32,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Cifar10Batch {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl Cifar10Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Concatenates several batches, e.g. the five training files.
    pub fn concat(batches: Vec<Cifar10Batch>) -> Self {
        let mut out = Cifar10Batch {
            images: Vec::new(),
            labels: Vec::new(),
        };
        for b in batches {
            out.images.extend(b.images);
            out.labels.extend(b.labels);
        }
        out
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Cifar10Batch, BenchError> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(BenchError::CifarSize(bytes.len()));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(BenchError::CifarLabel {
                record: i,
                label: rec[0],
            });
        }
        labels.push(rec[0]);
        let pixels = rec[1..].iter().map(|&p| p as f32 / 255.0).collect();
        images.push(Tensor::from_f32(IMAGE_SHAPE, pixels).expect("record holds one image"));
    }
    Ok(Cifar10Batch { images, labels })
}

pub fn load_cifar10(path: &Path) -> Result<Cifar10Batch, BenchError> {
    let bytes = fs::read(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cifar10(&bytes)
}

/// Encodes images in `[0, 1]` back to records (pixels rounded to the nearest step of 1/255).
pub fn encode_cifar10(images: &[Tensor], labels: &[u8]) -> Result<Vec<u8>, BenchError> {
    if images.len() != labels.len() {
        return Err(BenchError::Invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(images.len() * RECORD_BYTES);
    for (img, &label) in images.iter().zip(labels) {
        if img.shape() != IMAGE_SHAPE {
            return Err(BenchError::Invalid(format!(
                "image shape {} is not 1x3x32x32",
                img.shape()
            )));
        }
        if label > 9 {
            return Err(BenchError::Invalid(format!("label {label} outside 0..=9")));
        }
        out.push(label);
        let px = img.as_f32().map_err(|e| BenchError::Invalid(e.to_string()))?;
        out.extend(px.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Loads every `*.bin` batch of a directory in name order, or a single file.
pub fn load_cifar10_path(path: &Path) -> Result<Cifar10Batch, BenchError> {
    if !path.is_dir() {
        return load_cifar10(path);
    }
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(BenchError::Invalid(format!("no .bin batches in {}", path.display())));
    }
    Ok(Cifar10Batch::concat(
        files.iter().map(|f| load_cifar10(f)).collect::<Result<_, _>>()?,
    ))
}
