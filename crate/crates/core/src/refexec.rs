//! FP32 reference executor.
//!
//! This is the numerical oracle for the quantizer and compiler, so it favours a
//! fixed, documented evaluation order over speed. Convolution accumulates over
//! input channels, then kernel rows, then kernel columns, and adds the bias last.

use thiserror::Error;

use crate::graph::{BatchNormSpec, ConvSpec, DenseSpec, LayerSpec, ModelGraph, PoolSpec};
use crate::tensor::{argmax, Tensor, TensorError, TensorShape};

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("input has {found} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("input shape {found} does not match the graph input {expected}")]
    InputShape { expected: TensorShape, found: TensorShape },
    #[error("{0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("expected a vector output, got shape {0}")]
    NonVector(TensorShape),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<ExecError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn conv2d_fp32(input: &Tensor, spec: &ConvSpec) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    if s.c != spec.c_in {
        return Err(ExecError::ChannelMismatch {
            expected: spec.c_in,
            found: s.c,
        });
    }
    let geom = spec.geometry();
    let (Some(oh), Some(ow)) = (geom.output_len(s.h), geom.output_len(s.w)) else {
        return Err(ExecError::Shape(format!(
            "kernel {} with pad {} leaves no output for a {}x{} input",
            spec.k, spec.pad, s.h, s.w
        )));
    };
    let out_shape = TensorShape::new(s.n, spec.c_out, oh, ow);
    let k = spec.k;
    let mut out = Vec::with_capacity(out_shape.numel());
    // Each output still sums its taps in (ci, ky, kx) order from 0.0, bias last;
    // only the loop nesting is changed so inner loops run over contiguous rows.
    let mut acc = vec![0.0f32; oh * ow];
    for n in 0..s.n {
        for co in 0..spec.c_out {
            acc.fill(0.0);
            let w_co = &spec.weights[co * spec.c_in * k * k..(co + 1) * spec.c_in * k * k];
            for ci in 0..spec.c_in {
                let plane = &x[s.index(n, ci, 0, 0)..s.index(n, ci, 0, 0) + s.h * s.w];
                for ky in 0..k {
                    let ys = tap_range(oh, s.h, spec.stride, spec.pad, ky);
                    for kx in 0..k {
                        let w = w_co[(ci * k + ky) * k + kx];
                        let xs = tap_range(ow, s.w, spec.stride, spec.pad, kx);
                        for y in ys.clone() {
                            let row = &plane[(y * spec.stride + ky - spec.pad) * s.w..];
                            let dst = &mut acc[y * ow..(y + 1) * ow];
                            for xo in xs.clone() {
                                dst[xo] += w * row[xo * spec.stride + kx - spec.pad];
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| a + spec.bias[co]));
        }
    }
    Ok(Tensor::from_f32(out_shape, out)?)
}

/// Output positions along one axis whose tap `tap` lands inside the input
/// (`0 <= o * stride + tap - pad < in_len`).
pub(crate) fn tap_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    tap: usize,
) -> std::ops::Range<usize> {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if in_len + pad > tap {
        ((in_len + pad - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_fp32(input: &Tensor, bn: &BatchNormSpec) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    if bn.channels() != s.c || bn.beta.len() != s.c || bn.mean.len() != s.c || bn.var.len() != s.c {
        return Err(ExecError::ChannelMismatch {
            expected: bn.channels(),
            found: s.c,
        });
    }
    if !(bn.eps >= 0.0) {
        return Err(ExecError::Parameter(format!("eps must be >= 0, got {}", bn.eps)));
    }
    if let Some(v) = bn.var.iter().find(|&&v| !(v >= 0.0) || v + bn.eps <= 0.0) {
        return Err(ExecError::Parameter(format!(
            "variance {v} with eps {} does not give a positive denominator",
            bn.eps
        )));
    }
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(x.len());
    for (i, chunk) in x.chunks(plane).enumerate() {
        let c = i % s.c;
        let denom = (bn.var[c] + bn.eps).sqrt();
        out.extend(
            chunk
                .iter()
                .map(|&v| bn.gamma[c] * (v - bn.mean[c]) / denom + bn.beta[c]),
        );
    }
    Ok(Tensor::from_f32(s, out)?)
}

pub fn relu_fp32(input: &Tensor) -> Result<Tensor, ExecError> {
    let out = input.as_f32()?.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Ok(Tensor::from_f32(input.shape(), out)?)
}

pub fn maxpool_fp32(input: &Tensor, pool: PoolSpec) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    let out_shape = crate::graph::OpKind::MaxPool(pool)
        .output_shape(s)
        .map_err(ExecError::Shape)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for xo in 0..out_shape.w {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..pool.k {
                        for kx in 0..pool.k {
                            let v = x[s.index(n, c, y * pool.stride + ky, xo * pool.stride + kx)];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Ok(Tensor::from_f32(out_shape, out)?)
}

pub fn globalavgpool_fp32(input: &Tensor) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    let plane = s.h * s.w;
    let out = x
        .chunks(plane)
        .map(|chunk| chunk.iter().fold(0.0f32, |acc, &v| acc + v) / plane as f32)
        .collect();
    Ok(Tensor::from_f32(TensorShape::new(s.n, s.c, 1, 1), out)?)
}

pub fn dense_fp32(input: &Tensor, spec: &DenseSpec) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    if s.image_len() != spec.in_features {
        return Err(ExecError::Shape(format!(
            "dense expects {} features, input has {}",
            spec.in_features,
            s.image_len()
        )));
    }
    let mut out = Vec::with_capacity(s.n * spec.out_features);
    for img in x.chunks(spec.in_features) {
        for o in 0..spec.out_features {
            let row = &spec.weights[o * spec.in_features..(o + 1) * spec.in_features];
            let acc = row.iter().zip(img).fold(0.0f32, |acc, (&w, &v)| acc + w * v);
            out.push(acc + spec.bias[o]);
        }
    }
    Ok(Tensor::from_f32(TensorShape::new(s.n, spec.out_features, 1, 1), out)?)
}

/// Softmax across channels at every spatial position, stabilised by subtracting the max.
pub fn softmax_fp32(input: &Tensor) -> Result<Tensor, ExecError> {
    let s = input.shape();
    let x = input.as_f32()?;
    let mut out = vec![0.0f32; x.len()];
    for n in 0..s.n {
        for y in 0..s.h {
            for xo in 0..s.w {
                let idx = |c| s.index(n, c, y, xo);
                let max = (0..s.c).map(|c| x[idx(c)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for c in 0..s.c {
                    let e = (x[idx(c)] - max).exp();
                    out[idx(c)] = e;
                    sum += e;
                }
                for c in 0..s.c {
                    out[idx(c)] /= sum;
                }
            }
        }
    }
    Ok(Tensor::from_f32(s, out)?)
}

pub fn apply_layer(spec: &LayerSpec, input: &Tensor) -> Result<Tensor, ExecError> {
    match spec {
        LayerSpec::Conv2d(c) => conv2d_fp32(input, c),
        LayerSpec::BatchNorm(b) => batchnorm_fp32(input, b),
        LayerSpec::Relu => relu_fp32(input),
        LayerSpec::MaxPool(p) => maxpool_fp32(input, *p),
        LayerSpec::GlobalAvgPool => globalavgpool_fp32(input),
        LayerSpec::Dense(d) => dense_fp32(input, d),
        LayerSpec::Softmax => softmax_fp32(input),
    }
}

/// Per-layer outputs of one forward pass, in layer order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionTrace {
    pub outputs: Vec<(String, Tensor)>,
}

/// Runs the graph, calling `visit` with each layer's id and output.
pub fn forward_with<F>(graph: &ModelGraph, input: &Tensor, mut visit: F) -> Result<Tensor, ExecError>
where
    F: FnMut(&str, &Tensor),
{
    if input.shape() != graph.input_shape() {
        return Err(ExecError::InputShape {
            expected: graph.input_shape(),
            found: input.shape(),
        });
    }
    let mut current = input.clone();
    for layer in graph.layers() {
        current = apply_layer(&layer.spec, &current).map_err(|e| ExecError::Layer {
            layer: layer.id.clone(),
            source: Box::new(e),
        })?;
        visit(&layer.id, &current);
    }
    Ok(current)
}

pub fn forward(graph: &ModelGraph, input: &Tensor) -> Result<Tensor, ExecError> {
    forward_with(graph, input, |_, _| {})
}

pub fn forward_trace(graph: &ModelGraph, input: &Tensor) -> Result<(Tensor, ExecutionTrace), ExecError> {
    let mut trace = ExecutionTrace::default();
    let out = forward_with(graph, input, |id, t| trace.outputs.push((id.to_string(), t.clone())))?;
    Ok((out, trace))
}

/// Top-1 class of a vector output; ties go to the lowest index.
pub fn predict(graph: &ModelGraph, image: &Tensor) -> Result<usize, ExecError> {
    let out = forward(graph, image)?;
    vector_argmax(&out)
}

pub(crate) fn vector_argmax(out: &Tensor) -> Result<usize, ExecError> {
    let s = out.shape();
    if s.n != 1 || s.h != 1 || s.w != 1 {
        return Err(ExecError::NonVector(s));
    }
    Ok(argmax(out.as_f32()?).expect("vector has at least one element"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Layer, LayerSpec};

    fn t(shape: TensorShape, v: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape, v).unwrap()
    }

    fn conv_spec(k: usize, c_in: usize, c_out: usize, w: f32) -> ConvSpec {
        ConvSpec {
            k,
            stride: 1,
            pad: 0,
            c_in,
            c_out,
            weights: vec![w; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    #[test]
    fn identity_conv() {
        let x = t(TensorShape::new(1, 1, 3, 3), (0..9).map(|i| i as f32 - 4.5).collect());
        assert_eq!(conv2d_fp32(&x, &conv_spec(1, 1, 1, 1.0)).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_nine() {
        let x = t(TensorShape::new(1, 1, 3, 3), vec![1.0; 9]);
        let y = conv2d_fp32(&x, &conv_spec(3, 1, 1, 1.0)).unwrap();
        assert_eq!(y.shape(), TensorShape::new(1, 1, 1, 1));
        assert_eq!(y.as_f32().unwrap(), &[9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(TensorShape::new(1, 2, 3, 3), vec![1.0; 18]);
        assert!(matches!(
            conv2d_fp32(&x, &conv_spec(1, 3, 1, 1.0)),
            Err(ExecError::ChannelMismatch { expected: 3, found: 2 })
        ));
        let x = t(TensorShape::new(1, 1, 2, 2), vec![1.0; 4]);
        assert!(matches!(
            conv2d_fp32(&x, &conv_spec(3, 1, 1, 1.0)),
            Err(ExecError::Shape(_))
        ));
    }

    fn bn(gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> BatchNormSpec {
        BatchNormSpec {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps,
        }
    }

    #[test]
    fn batchnorm_identity_and_affine() {
        let x = t(TensorShape::new(1, 1, 1, 3), vec![-1.0, 0.25, 7.0]);
        assert_eq!(batchnorm_fp32(&x, &bn(1.0, 0.0, 0.0, 1.0, 0.0)).unwrap(), x);
        let one = t(TensorShape::new(1, 1, 1, 1), vec![1.0]);
        assert_eq!(
            batchnorm_fp32(&one, &bn(2.0, 3.0, 0.0, 1.0, 0.0))
                .unwrap()
                .as_f32()
                .unwrap(),
            &[5.0]
        );
        assert!(matches!(
            batchnorm_fp32(&one, &bn(1.0, 0.0, 0.0, -1.0, 1e-5)),
            Err(ExecError::Parameter(_))
        ));
        assert!(matches!(
            batchnorm_fp32(&one, &bn(1.0, 0.0, 0.0, 1.0, -1.0)),
            Err(ExecError::Parameter(_))
        ));
    }

    #[test]
    fn small_activations() {
        let x = t(TensorShape::new(1, 3, 1, 1), vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_fp32(&x).unwrap().as_f32().unwrap(), &[0.0, 0.0, 2.0]);

        let p = t(TensorShape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            maxpool_fp32(&p, PoolSpec { k: 2, stride: 2 })
                .unwrap()
                .as_f32()
                .unwrap(),
            &[4.0]
        );
        assert!(maxpool_fp32(&p, PoolSpec { k: 3, stride: 1 }).is_err());

        let u = t(TensorShape::vector(10), vec![0.3; 10]);
        for &v in softmax_fp32(&u).unwrap().as_f32().unwrap() {
            assert!((v - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn predict_tie_breaks_low() {
        let g = ModelGraph::chain(TensorShape::vector(10), vec![Layer::new("r", LayerSpec::Relu)]).unwrap();
        assert_eq!(predict(&g, &t(TensorShape::vector(10), vec![0.0; 10])).unwrap(), 0);
        let mut v = vec![0.0; 10];
        v[9] = 1.0;
        assert_eq!(predict(&g, &t(TensorShape::vector(10), v)).unwrap(), 9);

        let img = TensorShape::new(1, 1, 2, 2);
        let g = ModelGraph::chain(img, vec![Layer::new("r", LayerSpec::Relu)]).unwrap();
        assert!(matches!(
            predict(&g, &t(img, vec![0.0; 4])),
            Err(ExecError::NonVector(_))
        ));
    }

    #[test]
    fn relu_only_graph_is_identity_on_nonnegative_input() {
        let s = TensorShape::new(1, 2, 3, 3);
        let g = ModelGraph::chain(s, vec![Layer::new("r", LayerSpec::Relu)]).unwrap();
        let x = t(s, (0..18).map(|i| i as f32 * 0.5).collect());
        assert_eq!(forward(&g, &x).unwrap(), x);
        assert!(matches!(
            forward(&g, &t(TensorShape::new(1, 2, 3, 2), vec![0.0; 12])),
            Err(ExecError::InputShape { .. })
        ));
    }
}
