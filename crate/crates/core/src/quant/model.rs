use serde::{Deserialize, Serialize};

use super::{
    pow2, quantize_tensor, quantize_value, requantize, round_div_half_even, saturate_i8, shift_round, QuantError,
    QuantParams, QuantTable,
};
use crate::graph::{ConvGeometry, LayerSpec, ModelGraph, OpKind, PoolSpec};
use crate::refexec::{self, tap_range, ExecError};
use crate::tensor::{argmax, Tensor, TensorShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub dataset: String,
    pub images: usize,
    /// Batch size the model is exported with; always 1.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QLayerKind {
    Conv {
        geometry: ConvGeometry,
        weights: Vec<i8>,
        /// Bias at the accumulator scale `2^-(f_in + f_w)`.
        bias: Vec<i32>,
        weight_params: QuantParams,
        /// Right shift `f_in + f_w - f_out` from accumulator to output.
        shift: i32,
        /// Id of the relu absorbed by the fusion pass, if any.
        fused_relu: Option<String>,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        weights: Vec<i8>,
        bias: Vec<i32>,
        weight_params: QuantParams,
        shift: i32,
    },
    Relu,
    MaxPool(PoolSpec),
    GlobalAvgPool,
    /// Host-side softmax: dequantize, FP32 softmax, requantize at the output scale.
    Softmax,
}

impl QLayerKind {
    pub fn op_kind(&self) -> OpKind {
        match self {
            QLayerKind::Conv { geometry, .. } => OpKind::Conv2d(*geometry),
            QLayerKind::Dense {
                in_features,
                out_features,
                ..
            } => OpKind::Dense {
                in_features: *in_features,
                out_features: *out_features,
            },
            QLayerKind::Relu => OpKind::Relu,
            QLayerKind::MaxPool(p) => OpKind::MaxPool(*p),
            QLayerKind::GlobalAvgPool => OpKind::GlobalAvgPool,
            QLayerKind::Softmax => OpKind::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLayer {
    pub id: String,
    pub kind: QLayerKind,
    pub input: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub input_shape: TensorShape,
    pub input_params: QuantParams,
    pub layers: Vec<QLayer>,
    pub calibration: CalibrationMeta,
}

impl QuantizedModel {
    /// Output shape of each layer.
    pub fn shapes(&self) -> Vec<TensorShape> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape;
        for l in &self.layers {
            cur = l
                .kind
                .op_kind()
                .output_shape(cur)
                .expect("quantized models are built from validated graphs");
            shapes.push(cur);
        }
        shapes
    }

    pub fn op_kinds(&self) -> Vec<(String, OpKind)> {
        self.layers.iter().map(|l| (l.id.clone(), l.kind.op_kind())).collect()
    }

    pub fn output_params(&self) -> QuantParams {
        self.layers.last().map(|l| l.output).unwrap_or(self.input_params)
    }
}

/// Converts a batchnorm-free graph to INT8 using `table`.
pub fn quantize_model(graph: &ModelGraph, table: &QuantTable) -> Result<QuantizedModel, QuantError> {
    let input_params = table.input()?;
    input_params.validate()?;
    let mut current = input_params;
    let mut layers = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let id = layer.id.as_str();
        let (kind, output) = match &layer.spec {
            LayerSpec::BatchNorm(_) => return Err(QuantError::UnfoldedBatchNorm(layer.id.clone())),
            LayerSpec::Conv2d(c) => {
                let wp = table.weight(id)?;
                let out = table.activation(id)?;
                wp.validate()?;
                out.validate()?;
                let acc_bits = current.frac_bits + wp.frac_bits;
                let kind = QLayerKind::Conv {
                    geometry: c.geometry(),
                    weights: quantize_weights(&c.weights, wp),
                    bias: quantize_bias(id, &c.bias, acc_bits)?,
                    weight_params: wp,
                    shift: acc_bits - out.frac_bits,
                    fused_relu: None,
                };
                (kind, out)
            }
            LayerSpec::Dense(d) => {
                let wp = table.weight(id)?;
                let out = table.activation(id)?;
                wp.validate()?;
                out.validate()?;
                let acc_bits = current.frac_bits + wp.frac_bits;
                let kind = QLayerKind::Dense {
                    in_features: d.in_features,
                    out_features: d.out_features,
                    weights: quantize_weights(&d.weights, wp),
                    bias: quantize_bias(id, &d.bias, acc_bits)?,
                    weight_params: wp,
                    shift: acc_bits - out.frac_bits,
                };
                (kind, out)
            }
            LayerSpec::Relu => (QLayerKind::Relu, current),
            LayerSpec::MaxPool(p) => (QLayerKind::MaxPool(*p), current),
            LayerSpec::GlobalAvgPool => {
                let out = table.activation(id)?;
                out.validate()?;
                (QLayerKind::GlobalAvgPool, out)
            }
            LayerSpec::Softmax => {
                let out = table.activation(id)?;
                out.validate()?;
                (QLayerKind::Softmax, out)
            }
        };
        layers.push(QLayer {
            id: layer.id.clone(),
            kind,
            input: current,
            output,
        });
        current = output;
    }
    Ok(QuantizedModel {
        input_shape: graph.input_shape(),
        input_params,
        layers,
        calibration: CalibrationMeta {
            dataset: table.dataset.clone(),
            images: table.images,
            batch_size: 1,
        },
    })
}

fn quantize_weights(w: &[f32], p: QuantParams) -> Vec<i8> {
    w.iter().map(|&v| quantize_value(v, p).0).collect()
}

fn quantize_bias(layer: &str, bias: &[f32], frac_bits: i32) -> Result<Vec<i32>, QuantError> {
    let scale = (frac_bits as f64).exp2();
    bias.iter()
        .map(|&b| {
            let v = (b as f64 * scale).round_ties_even();
            if v > i32::MAX as f64 || v < i32::MIN as f64 || v.is_nan() {
                Err(QuantError::BiasOverflow {
                    layer: layer.to_string(),
                    value: b,
                    frac_bits,
                })
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

/// Result of an INT8 forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QForward {
    pub class: usize,
    pub logits: Tensor,
    /// Elements saturated while requantizing (input quantization included).
    pub clipped: usize,
    /// Elements produced by quantizing / requantizing steps.
    pub elements: usize,
}

/// Runs the model in INT8, calling `visit` with every layer output.
pub fn qforward_with<F>(qmodel: &QuantizedModel, image: &Tensor, mut visit: F) -> Result<QForward, QuantError>
where
    F: FnMut(&str, &Tensor),
{
    if image.shape() != qmodel.input_shape {
        return Err(ExecError::InputShape {
            expected: qmodel.input_shape,
            found: image.shape(),
        }
        .into());
    }
    let q = quantize_tensor(image, qmodel.input_params)?;
    let mut clipped = q.clipped;
    let mut elements = image.shape().numel();
    let mut current = q.tensor;
    for layer in &qmodel.layers {
        let (next, c, e) = apply_qlayer(layer, &current)?;
        clipped += c;
        elements += e;
        visit(&layer.id, &next);
        current = next;
    }
    let s = current.shape();
    if s.n != 1 || s.h != 1 || s.w != 1 {
        return Err(ExecError::NonVector(s).into());
    }
    let class = argmax(current.as_i8()?).expect("non-empty output");
    Ok(QForward {
        class,
        logits: current,
        clipped,
        elements,
    })
}

pub fn qforward(qmodel: &QuantizedModel, image: &Tensor) -> Result<QForward, QuantError> {
    qforward_with(qmodel, image, |_, _| {})
}

/// Accumulates one output channel of an INT8 convolution over output rows
/// `rows` into `acc` (`rows.len() * ow` entries, zeroed first). `input` holds
/// all input channels for input rows starting at `in_y0`, each `in_w` wide;
/// `in_h` is the full input height, used for padding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_accumulate(
    acc: &mut [i64],
    g: &ConvGeometry,
    w_co: &[i8],
    input: &[i8],
    in_h: usize,
    in_w: usize,
    in_y0: usize,
    rows: std::ops::Range<usize>,
    ow: usize,
) {
    acc.fill(0);
    let band = input.len() / g.c_in;
    for ci in 0..g.c_in {
        let plane = &input[ci * band..(ci + 1) * band];
        for ky in 0..g.k {
            let ys = tap_range(rows.end, in_h, g.stride, g.pad, ky);
            let ys = ys.start.max(rows.start)..ys.end;
            for kx in 0..g.k {
                let w = w_co[(ci * g.k + ky) * g.k + kx] as i64;
                if w == 0 {
                    continue;
                }
                let xs = tap_range(ow, in_w, g.stride, g.pad, kx);
                for y in ys.clone() {
                    let src = &plane[(y * g.stride + ky - g.pad - in_y0) * in_w..];
                    let dst = &mut acc[(y - rows.start) * ow..(y - rows.start + 1) * ow];
                    for xo in xs.clone() {
                        dst[xo] += w * src[xo * g.stride + kx - g.pad] as i64;
                    }
                }
            }
        }
    }
}

pub(crate) fn dot_i8(a: &[i8], b: &[i8]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

/// Adds the bias and checks the sum fits the INT32 accumulator. Partial sums
/// may wrap in two's complement without changing the result, so only the
/// final value is checked.
pub(crate) fn finish_acc(acc: i64, bias: i32) -> Option<i32> {
    i32::try_from(acc + bias as i64).ok()
}

/// Applies one INT8 layer; returns the output, clip count and requantized element count.
fn apply_qlayer(layer: &QLayer, input: &Tensor) -> Result<(Tensor, usize, usize), QuantError> {
    let s = input.shape();
    let x = input.as_i8()?;
    let overflow = || QuantError::AccumulatorOverflow {
        layer: layer.id.clone(),
    };
    match &layer.kind {
        QLayerKind::Conv {
            geometry: g,
            weights,
            bias,
            shift,
            fused_relu,
            ..
        } => {
            let out_shape = OpKind::Conv2d(*g).output_shape(s).map_err(ExecError::Shape)?;
            let kk = g.k * g.k;
            let mut out = Vec::with_capacity(out_shape.numel());
            let mut clipped = 0;
            let mut acc = vec![0i64; out_shape.h * out_shape.w];
            for n in 0..s.n {
                let img = &x[s.index(n, 0, 0, 0)..s.index(n, 0, 0, 0) + s.image_len()];
                for co in 0..g.c_out {
                    let w_co = &weights[co * g.c_in * kk..(co + 1) * g.c_in * kk];
                    conv_accumulate(&mut acc, g, w_co, img, s.h, s.w, 0, 0..out_shape.h, out_shape.w);
                    for &a in &acc {
                        let a = finish_acc(a, bias[co]).ok_or_else(overflow)?;
                        let (mut q, c) = requantize(a, *shift);
                        clipped += c as usize;
                        if fused_relu.is_some() && q < 0 {
                            q = 0;
                        }
                        out.push(q);
                    }
                }
            }
            let n = out.len();
            Ok((Tensor::from_i8(out_shape, out)?, clipped, n))
        }
        QLayerKind::Dense {
            in_features,
            out_features,
            weights,
            bias,
            shift,
            ..
        } => {
            if s.image_len() != *in_features {
                return Err(ExecError::Shape(format!(
                    "dense expects {in_features} features, input has {}",
                    s.image_len()
                ))
                .into());
            }
            let mut out = Vec::with_capacity(s.n * out_features);
            let mut clipped = 0;
            for img in x.chunks(*in_features) {
                for o in 0..*out_features {
                    let row = &weights[o * in_features..(o + 1) * in_features];
                    let acc = dot_i8(row, img);
                    let (q, c) = requantize(finish_acc(acc, bias[o]).ok_or_else(overflow)?, *shift);
                    clipped += c as usize;
                    out.push(q);
                }
            }
            let n = out.len();
            Ok((
                Tensor::from_i8(TensorShape::new(s.n, *out_features, 1, 1), out)?,
                clipped,
                n,
            ))
        }
        QLayerKind::Relu => {
            let out = x.iter().map(|&v| v.max(0)).collect();
            Ok((Tensor::from_i8(s, out)?, 0, 0))
        }
        QLayerKind::MaxPool(p) => {
            let out_shape = OpKind::MaxPool(*p).output_shape(s).map_err(ExecError::Shape)?;
            let mut out = Vec::with_capacity(out_shape.numel());
            for n in 0..s.n {
                for c in 0..s.c {
                    for oy in 0..out_shape.h {
                        for ox in 0..out_shape.w {
                            let mut m = i8::MIN;
                            for ky in 0..p.k {
                                for kx in 0..p.k {
                                    m = m.max(x[s.index(n, c, oy * p.stride + ky, ox * p.stride + kx)]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
            }
            Ok((Tensor::from_i8(out_shape, out)?, 0, 0))
        }
        QLayerKind::GlobalAvgPool => {
            let out = gap_int8(x, s, layer.input.frac_bits, layer.output.frac_bits);
            let clipped = out.iter().filter(|(_, c)| *c).count();
            let data: Vec<i8> = out.into_iter().map(|(q, _)| q).collect();
            let n = data.len();
            Ok((Tensor::from_i8(TensorShape::new(s.n, s.c, 1, 1), data)?, clipped, n))
        }
        QLayerKind::Softmax => {
            let (t, clipped) = host_softmax_int8(input, layer.input, layer.output)?;
            let n = t.shape().numel();
            Ok((t, clipped, n))
        }
    }
}

/// Global average pool on INT8 data: `round_half_even(sum * 2^(f_out - f_in) / (h * w))`.
pub(crate) fn gap_int8(x: &[i8], s: TensorShape, f_in: i32, f_out: i32) -> Vec<(i8, bool)> {
    let plane = (s.h * s.w) as i64;
    let d = f_out - f_in;
    x.chunks(s.h * s.w)
        .map(|chunk| {
            let sum: i64 = chunk.iter().map(|&v| v as i64).sum();
            let v = if d >= 0 {
                round_div_half_even(shift_round(sum, -d), plane)
            } else if -d >= 40 {
                0
            } else {
                round_div_half_even(sum, plane << -d)
            };
            saturate_i8(v)
        })
        .collect()
}

/// Softmax executed on the host for INT8 tensors.
pub fn host_softmax_int8(
    input: &Tensor,
    in_params: QuantParams,
    out_params: QuantParams,
) -> Result<(Tensor, usize), QuantError> {
    let step = pow2(-in_params.frac_bits);
    let x = Tensor::from_f32(input.shape(), input.as_i8()?.iter().map(|&v| v as f32 * step).collect())?;
    let p = refexec::softmax_fp32(&x)?;
    let q = quantize_tensor(&p, out_params)?;
    Ok((q.tensor, q.clipped))
}

/// Anything that assigns a class to an image.
pub trait Classifier {
    fn classify(&self, image: &Tensor) -> Result<usize, QuantError>;
}

impl Classifier for ModelGraph {
    fn classify(&self, image: &Tensor) -> Result<usize, QuantError> {
        Ok(refexec::predict(self, image)?)
    }
}

impl Classifier for QuantizedModel {
    fn classify(&self, image: &Tensor) -> Result<usize, QuantError> {
        Ok(qforward(self, image)?.class)
    }
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[u8]) -> Result<f64, QuantError> {
    if predictions.len() != labels.len() {
        return Err(QuantError::LengthMismatch {
            images: predictions.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(QuantError::Label(bad));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Top-1 accuracy of `model` on labelled images.
pub fn accuracy_eval<C: Classifier + ?Sized>(model: &C, images: &[Tensor], labels: &[u8]) -> Result<f64, QuantError> {
    if images.len() != labels.len() {
        return Err(QuantError::LengthMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let predictions = images
        .iter()
        .map(|img| model.classify(img))
        .collect::<Result<Vec<_>, _>>()?;
    accuracy(&predictions, labels)
}
