//! Dense NCHW tensors shared by every stage of the flow.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor dimensions must all be >= 1, got {0}")]
    ZeroDimension(TensorShape),
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: TensorShape,
        len: usize,
        expected: usize,
    },
    #[error("expected {expected} tensor, found {found}")]
    DType { expected: DType, found: DType },
}

/// Row-major `(n, c, h, w)` shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Shape of a length-`len` vector, stored as `1 x len x 1 x 1`.
    pub const fn vector(len: usize) -> Self {
        Self::new(1, len, 1, 1)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(TensorError::ZeroDimension(*self));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per image (`c * h * w`).
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<TensorShape> for [usize; 4] {
    fn from(s: TensorShape) -> Self {
        s.dims()
    }
}

impl From<[usize; 4]> for TensorShape {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp32,
    Int8,
    Int32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::Fp32 | DType::Int32 => 4,
            DType::Int8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::Fp32 => "fp32",
            DType::Int8 => "int8",
            DType::Int32 => "int32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Fp32(Vec<f32>),
    Int8(Vec<i8>),
    Int32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Fp32(v) => v.len(),
            TensorData::Int8(v) => v.len(),
            TensorData::Int32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Fp32(_) => DType::Fp32,
            TensorData::Int8(_) => DType::Int8,
            TensorData::Int32(_) => DType::Int32,
        }
    }

    /// Little-endian byte encoding.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::Fp32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Int8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::Int32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Decodes little-endian bytes. `bytes.len()` must be a multiple of the element size.
    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(dtype.size_bytes()) {
            return None;
        }
        Some(match dtype {
            DType::Fp32 => TensorData::Fp32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::Int8 => TensorData::Int8(bytes.iter().map(|&b| b as i8).collect()),
            DType::Int32 => TensorData::Int32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: TensorShape,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: TensorData) -> Result<Self, TensorError> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected: shape.numel(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: TensorShape, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Fp32(data))
    }

    pub fn from_i8(shape: TensorShape, data: Vec<i8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Int8(data))
    }

    pub fn from_i32(shape: TensorShape, data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Int32(data))
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: TensorData::Fp32(vec![0.0; shape.numel()]),
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::Fp32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::Fp32,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8], TensorError> {
        match &self.data {
            TensorData::Int8(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::Int8,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], TensorError> {
        match &self.data {
            TensorData::Int32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::Int32,
                found: other.dtype(),
            }),
        }
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(self, shape: TensorShape) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
