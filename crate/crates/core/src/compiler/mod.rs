//! Lowering of quantized models to tiled DPU instruction streams.

mod fingerprint;
mod io;
mod tile;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::graph::{ConvSpec, GraphError, Layer, LayerSpec, ModelGraph, OpCounts, OpKind};
use crate::quant::{CalibrationMeta, QLayer, QLayerKind, QuantError, QuantParams, QuantizedModel};
use crate::sim::TargetConfig;
use crate::tensor::{DType, TensorShape};

pub use fingerprint::{compute_fingerprint, fnv1a64, Fingerprint};
pub use io::{artifact_paths, load_compiled, save_compiled, CMODEL_FORMAT, CMODEL_FORMAT_VERSION};
pub use tile::{Instruction, LayerTotals, Opcode, Region, TensorInfo, TensorRole, Tile};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("batchnorm `{layer}` is not directly preceded by a convolution")]
    OrphanBatchNorm { layer: String },
    #[error("model does not map to a single accelerator subgraph ({subgraphs} subgraphs); unsupported layers: {}", offenders.join(", "))]
    SubgraphGateViolation { subgraphs: usize, offenders: Vec<String> },
    #[error("layer `{layer}`: smallest tile needs {needed} bytes, on-chip buffer holds {buffer}")]
    TileExceedsBuffer {
        layer: String,
        needed: usize,
        buffer: usize,
    },
    #[error("fingerprint mismatch: model compiled for {compiled}, target is {target}")]
    FingerprintMismatch {
        compiled: Box<Fingerprint>,
        target: Box<Fingerprint>,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Folds every batchnorm into the convolution right before it.
pub fn fold_batchnorm(graph: &ModelGraph) -> Result<ModelGraph, CompileError> {
    let mut layers: Vec<Layer> = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let LayerSpec::BatchNorm(bn) = &layer.spec else {
            layers.push(layer.clone());
            continue;
        };
        let Some(Layer {
            spec: LayerSpec::Conv2d(conv),
            ..
        }) = layers.last_mut()
        else {
            return Err(CompileError::OrphanBatchNorm {
                layer: layer.id.clone(),
            });
        };
        fold_into(conv, bn);
    }
    Ok(ModelGraph::chain(graph.input_shape(), layers)?)
}

fn fold_into(conv: &mut ConvSpec, bn: &crate::graph::BatchNormSpec) {
    let per_out = conv.c_in * conv.k * conv.k;
    for co in 0..conv.c_out {
        let scale = bn.gamma[co] as f64 / (bn.var[co] as f64 + bn.eps as f64).sqrt();
        for w in &mut conv.weights[co * per_out..(co + 1) * per_out] {
            *w = (*w as f64 * scale) as f32;
        }
        conv.bias[co] = ((conv.bias[co] as f64 - bn.mean[co] as f64) * scale + bn.beta[co] as f64) as f32;
    }
}

/// Absorbs each relu that directly follows a convolution.
pub fn fuse_relu(qmodel: &QuantizedModel) -> QuantizedModel {
    let mut layers: Vec<QLayer> = Vec::with_capacity(qmodel.layers.len());
    for layer in &qmodel.layers {
        if matches!(layer.kind, QLayerKind::Relu) {
            if let Some(QLayer {
                kind: QLayerKind::Conv { fused_relu, .. },
                output,
                ..
            }) = layers.last_mut()
            {
                if fused_relu.is_none() && *output == layer.input {
                    *fused_relu = Some(layer.id.clone());
                    *output = layer.output;
                    continue;
                }
            }
        }
        layers.push(layer.clone());
    }
    QuantizedModel {
        layers,
        ..qmodel.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Accelerator,
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub device: Device,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Maximal runs in chain order; concatenated they give back the input sequence.
    pub segments: Vec<Segment>,
    pub offenders: Vec<String>,
}

impl Partition {
    /// Number of accelerator-side subgraphs.
    pub fn subgraph_count(&self) -> usize {
        self.segments.iter().filter(|s| s.device == Device::Accelerator).count()
    }

    pub fn layer_sequence(&self) -> Vec<String> {
        self.segments.iter().flat_map(|s| s.layers.iter().cloned()).collect()
    }
}

/// Splits a chain into maximal runs of supported and unsupported layers.
pub fn partition(layers: &[(String, OpKind)], supported: &BTreeSet<String>) -> Partition {
    let mut segments: Vec<Segment> = Vec::new();
    let mut offenders = Vec::new();
    for (id, kind) in layers {
        let device = if supported.contains(kind.name()) {
            Device::Accelerator
        } else {
            offenders.push(id.clone());
            Device::Host
        };
        match segments.last_mut() {
            Some(s) if s.device == device => s.layers.push(id.clone()),
            _ => segments.push(Segment {
                device,
                layers: vec![id.clone()],
            }),
        }
    }
    Partition { segments, offenders }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub device: Device,
    /// Indices into [`CompiledModel::layers`].
    pub layers: Vec<usize>,
    pub instructions: Vec<Instruction>,
}

/// A model lowered for one target. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub fingerprint: Fingerprint,
    pub input_shape: TensorShape,
    pub input_params: QuantParams,
    /// Accelerator layers (after fusion) followed by the host tail.
    pub layers: Vec<QLayer>,
    pub tensors: Vec<TensorInfo>,
    pub subgraphs: Vec<Subgraph>,
    /// Per accelerator layer, aligned with `layers`.
    pub layer_totals: Vec<LayerTotals>,
    /// Layers executed on the host after the accelerator subgraph.
    pub host_tail: Vec<usize>,
    pub calibration: CalibrationMeta,
}

/// Id of the network input in the tensor table.
pub const INPUT_TENSOR_ID: usize = 0;

impl CompiledModel {
    pub fn accelerator(&self) -> &Subgraph {
        &self.subgraphs[0]
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.subgraphs.iter().flat_map(|s| s.instructions.iter())
    }

    /// Tensor id holding the accelerator subgraph's result.
    pub fn accelerator_output(&self) -> usize {
        self.accelerator()
            .layers
            .last()
            .map(|&i| activation_tensor(i))
            .unwrap_or(INPUT_TENSOR_ID)
    }

    pub fn op_totals(&self) -> OpCounts {
        self.layer_totals.iter().fold(OpCounts::default(), |a, l| a + l.ops)
    }

    /// Operation counts of the host tail layers.
    pub fn host_ops(&self) -> OpCounts {
        let shapes = self.shapes();
        let mut total = OpCounts::default();
        for &i in &self.host_tail {
            let input = if i == 0 { self.input_shape } else { shapes[i - 1] };
            total += self.layers[i].kind.op_kind().ops(input, shapes[i]);
        }
        total
    }

    pub fn bytes_per_frame(&self) -> u64 {
        self.layer_totals.iter().map(|l| l.bytes).sum()
    }

    pub fn shapes(&self) -> Vec<TensorShape> {
        self.as_quantized().shapes()
    }

    /// The quantized model this stream computes (with relu fused into convs).
    pub fn as_quantized(&self) -> QuantizedModel {
        QuantizedModel {
            input_shape: self.input_shape,
            input_params: self.input_params,
            layers: self.layers.clone(),
            calibration: self.calibration.clone(),
        }
    }

    /// Instruction listing, one instruction per line.
    pub fn listing(&self) -> String {
        let mut s = format!("; target {}\n", self.fingerprint);
        for (n, sg) in self.subgraphs.iter().enumerate() {
            s.push_str(&format!(
                "; subgraph {n} ({:?}, {} instructions)\n",
                sg.device,
                sg.instructions.len()
            ));
            for ins in &sg.instructions {
                s.push_str(&ins.listing(&self.layers[ins.layer].id, &self.tensors));
                s.push('\n');
            }
        }
        for &i in &self.host_tail {
            s.push_str(&format!(
                "; host {} {}\n",
                self.layers[i].kind.op_kind().name(),
                self.layers[i].id
            ));
        }
        s
    }
}

/// Activation tensor written by layer `i` (tensor 0 is the input).
fn activation_tensor(i: usize) -> usize {
    i + 1
}

/// Lowers `qmodel` for `target`. Fails unless the accelerator part is exactly one subgraph.
pub fn compile(qmodel: &QuantizedModel, target: &TargetConfig) -> Result<CompiledModel, CompileError> {
    crate::quant::check_chain(qmodel)?;
    let fused = fuse_relu(qmodel);

    let mut accel_len = fused.layers.len();
    while accel_len > 0 && matches!(fused.layers[accel_len - 1].kind, QLayerKind::Softmax) {
        accel_len -= 1;
    }
    let kinds: Vec<(String, OpKind)> = fused.layers[..accel_len]
        .iter()
        .map(|l| (l.id.clone(), l.kind.op_kind()))
        .collect();
    let part = partition(&kinds, &target.supported_ops);
    // Only a trailing softmax may leave the device; any other unsupported layer
    // would need a host round trip mid-frame.
    if part.subgraph_count() != 1 || !part.offenders.is_empty() {
        return Err(CompileError::SubgraphGateViolation {
            subgraphs: part.subgraph_count(),
            offenders: part.offenders,
        });
    }

    let shapes = fused.shapes();
    let mut tensors = vec![TensorInfo {
        name: "input".into(),
        role: TensorRole::Input,
        dtype: DType::Int8,
        shape: fused.input_shape,
    }];
    for (l, s) in fused.layers.iter().zip(&shapes) {
        tensors.push(TensorInfo {
            name: l.id.clone(),
            role: TensorRole::Activation,
            dtype: DType::Int8,
            shape: *s,
        });
    }

    let mut instructions = Vec::new();
    let mut layer_totals = Vec::with_capacity(accel_len);
    for (i, layer) in fused.layers[..accel_len].iter().enumerate() {
        let params = match &layer.kind {
            QLayerKind::Conv { geometry: g, .. } => Some((TensorShape::new(g.c_out, g.c_in, g.k, g.k), g.c_out)),
            QLayerKind::Dense {
                in_features,
                out_features,
                ..
            } => Some((TensorShape::new(*out_features, *in_features, 1, 1), *out_features)),
            _ => None,
        };
        let (weight, bias) = match params {
            Some((wshape, nbias)) => {
                tensors.push(TensorInfo {
                    name: format!("{}.weight", layer.id),
                    role: TensorRole::Weight,
                    dtype: DType::Int8,
                    shape: wshape,
                });
                tensors.push(TensorInfo {
                    name: format!("{}.bias", layer.id),
                    role: TensorRole::Bias,
                    dtype: DType::Int32,
                    shape: TensorShape::vector(nbias),
                });
                (Some(tensors.len() - 2), Some(tensors.len() - 1))
            }
            None => (None, None),
        };
        let in_shape = if i == 0 { fused.input_shape } else { shapes[i - 1] };
        let ids = tile::LayerTensors {
            input: if i == 0 {
                INPUT_TENSOR_ID
            } else {
                activation_tensor(i - 1)
            },
            output: activation_tensor(i),
            weight,
            bias,
        };
        let stream = tile::lower_layer(i, layer, in_shape, shapes[i], ids, target.buffer_bytes)?;
        layer_totals.push(LayerTotals {
            layer: layer.id.clone(),
            ops: stream.iter().fold(OpCounts::default(), |a, ins| a + ins.ops),
            bytes: stream.iter().map(|ins| ins.bytes).sum(),
            tiles: stream
                .iter()
                .filter(|ins| !matches!(ins.opcode, Opcode::Load | Opcode::Save))
                .count(),
        });
        instructions.extend(stream);
    }

    Ok(CompiledModel {
        fingerprint: compute_fingerprint(target),
        input_shape: fused.input_shape,
        input_params: fused.input_params,
        subgraphs: vec![Subgraph {
            device: Device::Accelerator,
            layers: (0..accel_len).collect(),
            instructions,
        }],
        host_tail: (accel_len..fused.layers.len()).collect(),
        layers: fused.layers,
        tensors,
        layer_totals,
        calibration: fused.calibration,
    })
}

/// Checks that `compiled` was built for `target`.
pub fn verify_fingerprint(compiled: &CompiledModel, target: &TargetConfig) -> Result<(), CompileError> {
    let expected = compute_fingerprint(target);
    if compiled.fingerprint.digest == expected.digest && compiled.fingerprint == expected {
        Ok(())
    } else {
        Err(CompileError::FingerprintMismatch {
            compiled: Box::new(compiled.fingerprint.clone()),
            target: Box::new(expected),
        })
    }
}

/// Stream well-formedness: each SAVE follows a compute op of the same layer.
pub fn check_stream(instructions: &[Instruction]) -> Result<(), String> {
    let mut pending: Option<usize> = None;
    for (n, ins) in instructions.iter().enumerate() {
        match ins.opcode {
            Opcode::Conv | Opcode::Pool | Opcode::Eltwise => pending = Some(ins.layer),
            Opcode::Save => {
                if pending != Some(ins.layer) {
                    return Err(format!("instruction {n}: SAVE without a producing compute op"));
                }
                pending = None;
            }
            Opcode::Load => {}
        }
    }
    Ok(())
}
