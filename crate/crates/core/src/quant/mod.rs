//! Post-training INT8 quantization with symmetric, per-tensor, power-of-two scales.
//!
//! A tensor with `f` fraction bits stores `q = clamp(round_half_even(x * 2^f), -128, 127)`
//! and represents `q * 2^-f`. Requantization between layers is a pure shift, which
//! keeps the integer pipeline (and the simulator) exact.

mod io;
mod model;

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::graph::{LayerSpec, ModelGraph};
use crate::refexec::{self, ExecError};
use crate::tensor::{Tensor, TensorError, TensorShape};

pub use crate::compiler::fold_batchnorm;
pub(crate) use io::{check_chain, decode_layers, encode_layers};
pub use io::{load_qmodel, save_qmodel, QLayerEntry, QModelManifest, QMODEL_FORMAT, QMODEL_FORMAT_VERSION};
pub use model::{
    accuracy, accuracy_eval, host_softmax_int8, qforward, qforward_with, quantize_model, CalibrationMeta, Classifier,
    QForward, QLayer, QLayerKind, QuantizedModel,
};
pub(crate) use model::{conv_accumulate, dot_i8, finish_acc};

/// Key of the graph input in a [`QuantTable`].
pub const INPUT_TENSOR: &str = "input";

/// Fraction bits used for tensors whose calibrated max-abs is zero.
pub const ZERO_TENSOR_FRAC_BITS: i32 = 7;

/// Fraction bits are clamped to this magnitude so shifts stay well inside 64-bit arithmetic.
pub const MAX_FRAC_BITS: i32 = 24;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("image {index} has shape {found}, model expects {expected}")]
    ImageShape {
        index: usize,
        expected: TensorShape,
        found: TensorShape,
    },
    #[error("no quantization parameters for tensor `{0}`")]
    MissingParams(String),
    #[error("layer `{0}` is an unfolded batchnorm; fold it into the preceding convolution first")]
    UnfoldedBatchNorm(String),
    #[error("layer `{layer}`: bias {value} does not fit INT32 at 2^-{frac_bits}")]
    BiasOverflow { layer: String, value: f32, frac_bits: i32 },
    #[error("layer `{layer}`: INT32 accumulator overflow")]
    AccumulatorOverflow { layer: String },
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("label {0} is outside 0..=9")]
    Label(u8),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("quantized models export with batch size 1, got {0}")]
    BatchSize(usize),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    pub frac_bits: i32,
    pub bit_width: u8,
    pub signed: bool,
}

impl QuantParams {
    pub const fn new(frac_bits: i32) -> Self {
        Self {
            frac_bits,
            bit_width: 8,
            signed: true,
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bit_width != 8 || !self.signed {
            return Err(QuantError::InvalidParams(format!(
                "only signed 8-bit tensors are supported, got {}-bit signed={}",
                self.bit_width, self.signed
            )));
        }
        if self.frac_bits.abs() > MAX_FRAC_BITS {
            return Err(QuantError::InvalidParams(format!(
                "fraction bits {} outside +-{MAX_FRAC_BITS}",
                self.frac_bits
            )));
        }
        Ok(())
    }

    /// `2^f`
    pub fn scale(&self) -> f32 {
        pow2(self.frac_bits)
    }

    /// Smallest and largest representable reals.
    pub fn range(&self) -> (f32, f32) {
        let step = pow2(-self.frac_bits);
        (-128.0 * step, 127.0 * step)
    }

    /// Largest `f` with `max_abs * 2^f <= 127`; zero tensors get [`ZERO_TENSOR_FRAC_BITS`].
    pub fn for_max_abs(max_abs: f32) -> Self {
        if !(max_abs > 0.0) || !max_abs.is_finite() {
            return Self::new(ZERO_TENSOR_FRAC_BITS);
        }
        let m = max_abs as f64;
        let mut f = (127.0 / m).log2().floor() as i32;
        while m * 2f64.powi(f + 1) <= 127.0 {
            f += 1;
        }
        while m * 2f64.powi(f) > 127.0 {
            f -= 1;
        }
        Self::new(f.clamp(-MAX_FRAC_BITS, MAX_FRAC_BITS))
    }
}

pub(crate) fn pow2(e: i32) -> f32 {
    2f32.powi(e)
}

/// Rounds `num / den` to the nearest integer, ties to even. `den` must be positive.
pub fn round_div_half_even(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let twice_rem = 2 * num.rem_euclid(den);
    if twice_rem > den || (twice_rem == den && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// `acc * 2^-shift` rounded half-to-even. Negative shifts scale up, saturating
/// far outside the INT8 range.
pub fn shift_round(acc: i64, shift: i32) -> i64 {
    if shift > 0 {
        if shift >= 62 {
            return 0;
        }
        round_div_half_even(acc, 1i64 << shift)
    } else if shift < 0 {
        let up = -shift;
        if acc == 0 {
            0
        } else if up >= 32 {
            if acc > 0 {
                i64::MAX / 2
            } else {
                i64::MIN / 2
            }
        } else {
            acc << up
        }
    } else {
        acc
    }
}

/// Saturates to INT8; the flag reports whether clipping occurred.
pub fn saturate_i8(v: i64) -> (i8, bool) {
    if v > 127 {
        (127, true)
    } else if v < -128 {
        (-128, true)
    } else {
        (v as i8, false)
    }
}

/// Requantizes an INT32 accumulator to INT8 with right shift `shift`.
pub fn requantize(acc: i32, shift: i32) -> (i8, bool) {
    saturate_i8(shift_round(acc as i64, shift))
}

/// Quantizes one value; the flag reports saturation.
pub fn quantize_value(x: f32, p: QuantParams) -> (i8, bool) {
    let scaled = (x * p.scale()).round_ties_even();
    if scaled.is_nan() {
        return (0, false);
    }
    if scaled > 127.0 {
        (127, true)
    } else if scaled < -128.0 {
        (-128, true)
    } else {
        (scaled as i8, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub tensor: Tensor,
    pub clipped: usize,
}

pub fn quantize_tensor(x: &Tensor, p: QuantParams) -> Result<Quantized, QuantError> {
    let mut clipped = 0;
    let q = x
        .as_f32()?
        .iter()
        .map(|&v| {
            let (q, c) = quantize_value(v, p);
            clipped += c as usize;
            q
        })
        .collect();
    Ok(Quantized {
        tensor: Tensor::from_i8(x.shape(), q)?,
        clipped,
    })
}

pub fn dequantize_tensor(q: &Tensor, p: QuantParams) -> Result<Tensor, QuantError> {
    let step = pow2(-p.frac_bits);
    let x = q.as_i8()?.iter().map(|&v| v as f32 * step).collect();
    Ok(Tensor::from_f32(q.shape(), x)?)
}

/// Unlabelled images used to collect activation ranges.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub dataset: String,
    pub images: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn new(dataset: impl Into<String>, images: Vec<Tensor>) -> Self {
        Self {
            dataset: dataset.into(),
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Quantization parameters for every tensor of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    /// Graph input under [`INPUT_TENSOR`], then each layer output keyed by layer id.
    pub activations: BTreeMap<String, QuantParams>,
    /// Weight tensor of each conv / dense layer, keyed by layer id.
    pub weights: BTreeMap<String, QuantParams>,
    /// Calibrated max-abs of every tensor above (activations and `<id>.weight`).
    pub max_abs: BTreeMap<String, f32>,
    pub dataset: String,
    pub images: usize,
}

impl QuantTable {
    pub fn input(&self) -> Result<QuantParams, QuantError> {
        self.activation(INPUT_TENSOR)
    }

    pub fn activation(&self, id: &str) -> Result<QuantParams, QuantError> {
        self.activations
            .get(id)
            .copied()
            .ok_or_else(|| QuantError::MissingParams(id.to_string()))
    }

    pub fn weight(&self, id: &str) -> Result<QuantParams, QuantError> {
        self.weights
            .get(id)
            .copied()
            .ok_or_else(|| QuantError::MissingParams(format!("{id}.weight")))
    }
}

fn merge_max(into: &mut [f32], from: &[f32]) {
    for (a, &b) in into.iter_mut().zip(from) {
        if b > *a {
            *a = b;
        }
    }
}

fn max_abs(t: &Tensor) -> f32 {
    t.as_f32()
        .map(|v| v.iter().fold(0.0f32, |m, &x| m.max(x.abs())))
        .unwrap_or(0.0)
}

/// Collects max-abs statistics for the input and every layer output over the
/// calibration set and turns them into power-of-two parameters.
///
/// Images are processed `batch` at a time, in parallel within a batch. Max is
/// associative, so the result does not depend on `batch`.
pub fn calibrate(graph: &ModelGraph, cal: &CalibrationSet, batch: usize) -> Result<QuantTable, QuantError> {
    if cal.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    if batch == 0 {
        return Err(QuantError::ZeroBatch);
    }
    for (index, img) in cal.images.iter().enumerate() {
        if img.shape() != graph.input_shape() {
            return Err(QuantError::ImageShape {
                index,
                expected: graph.input_shape(),
                found: img.shape(),
            });
        }
    }

    let n_layers = graph.layers().len();
    // slot 0: graph input, slot i + 1: output of layer i
    let mut maxima = vec![0.0f32; n_layers + 1];
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    for group in cal.images.chunks(batch) {
        let per_worker = group.len().div_ceil(workers).max(1);
        let partials: Vec<Result<Vec<f32>, ExecError>> = thread::scope(|s| {
            let handles: Vec<_> = group
                .chunks(per_worker)
                .map(|imgs| {
                    s.spawn(move || {
                        let mut local = vec![0.0f32; n_layers + 1];
                        for img in imgs {
                            local[0] = local[0].max(max_abs(img));
                            let mut i = 1;
                            refexec::forward_with(graph, img, |_, out| {
                                local[i] = local[i].max(max_abs(out));
                                i += 1;
                            })?;
                        }
                        Ok(local)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("calibration worker panicked"))
                .collect()
        });
        for p in partials {
            merge_max(&mut maxima, &p?);
        }
    }

    let mut activations = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut maxes = BTreeMap::new();
    let input = QuantParams::for_max_abs(maxima[0]);
    activations.insert(INPUT_TENSOR.to_string(), input);
    maxes.insert(INPUT_TENSOR.to_string(), maxima[0]);
    let mut current = input;
    for (i, layer) in graph.layers().iter().enumerate() {
        let m = maxima[i + 1];
        maxes.insert(layer.id.clone(), m);
        // relu and maxpool run directly on INT8 data, so their outputs share the producer's scale
        let out = match layer.spec {
            LayerSpec::Relu | LayerSpec::MaxPool(_) => current,
            _ => QuantParams::for_max_abs(m),
        };
        activations.insert(layer.id.clone(), out);
        current = out;
        let w = match &layer.spec {
            LayerSpec::Conv2d(c) => Some(&c.weights),
            LayerSpec::Dense(d) => Some(&d.weights),
            _ => None,
        };
        if let Some(w) = w {
            let wm = w.iter().fold(0.0f32, |a, &x| a.max(x.abs()));
            weights.insert(layer.id.clone(), QuantParams::for_max_abs(wm));
            maxes.insert(format!("{}.weight", layer.id), wm);
        }
    }
    Ok(QuantTable {
        activations,
        weights,
        max_abs: maxes,
        dataset: cal.dataset.clone(),
        images: cal.len(),
    })
}
