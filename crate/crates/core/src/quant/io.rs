use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{CalibrationMeta, QLayer, QLayerKind, QuantizedModel};
use super::{QuantError, QuantParams};
use crate::container::{self, BlobWriter, TensorRecord};
use crate::graph::{ConvGeometry, PoolSpec};
use crate::tensor::{TensorData, TensorShape};

pub const QMODEL_FORMAT: &str = "dpuflow.qmodel";
pub const QMODEL_FORMAT_VERSION: u32 = 1;

/// One quantized layer in a manifest. Integer payloads live in the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLayerEntry {
    pub id: String,
    pub kind: String,
    pub input: QuantParams,
    pub output: QuantParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_params: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_relu: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModelManifest {
    pub format: String,
    pub format_version: u32,
    pub input_shape: TensorShape,
    pub input_params: QuantParams,
    pub calibration: CalibrationMeta,
    pub layers: Vec<QLayerEntry>,
    pub tensors: Vec<TensorRecord>,
}

pub(crate) fn encode_layers(layers: &[QLayer], blob: &mut BlobWriter) -> Vec<QLayerEntry> {
    layers
        .iter()
        .map(|l| {
            let mut e = QLayerEntry {
                id: l.id.clone(),
                kind: l.kind.op_kind().name().to_string(),
                input: l.input,
                output: l.output,
                conv: None,
                pool: None,
                in_features: None,
                out_features: None,
                weight_params: None,
                shift: None,
                fused_relu: None,
                params: BTreeMap::new(),
            };
            let mut push = |e: &mut QLayerEntry, role: &str, shape: &[usize], data: TensorData| {
                let idx = blob.push(format!("{}.{role}", l.id), shape, &data);
                e.params.insert(role.to_string(), idx);
            };
            match &l.kind {
                QLayerKind::Conv {
                    geometry: g,
                    weights,
                    bias,
                    weight_params,
                    shift,
                    fused_relu,
                } => {
                    e.conv = Some(*g);
                    e.weight_params = Some(*weight_params);
                    e.shift = Some(*shift);
                    e.fused_relu = fused_relu.clone();
                    push(
                        &mut e,
                        "weight",
                        &[g.c_out, g.c_in, g.k, g.k],
                        TensorData::Int8(weights.clone()),
                    );
                    push(&mut e, "bias", &[g.c_out], TensorData::Int32(bias.clone()));
                }
                QLayerKind::Dense {
                    in_features,
                    out_features,
                    weights,
                    bias,
                    weight_params,
                    shift,
                } => {
                    e.in_features = Some(*in_features);
                    e.out_features = Some(*out_features);
                    e.weight_params = Some(*weight_params);
                    e.shift = Some(*shift);
                    push(
                        &mut e,
                        "weight",
                        &[*out_features, *in_features],
                        TensorData::Int8(weights.clone()),
                    );
                    push(&mut e, "bias", &[*out_features], TensorData::Int32(bias.clone()));
                }
                QLayerKind::MaxPool(p) => e.pool = Some(*p),
                QLayerKind::Relu | QLayerKind::GlobalAvgPool | QLayerKind::Softmax => {}
            }
            e
        })
        .collect()
}

fn invalid(id: &str, what: &str) -> QuantError {
    QuantError::InvalidParams(format!("layer `{id}`: {what}"))
}

fn payload(e: &QLayerEntry, role: &str, tensors: &[TensorRecord], blob: &[u8]) -> Result<TensorData, QuantError> {
    let record = e
        .params
        .get(role)
        .and_then(|&i| tensors.get(i))
        .ok_or_else(|| invalid(&e.id, &format!("no `{role}` tensor")))?;
    Ok(container::read_tensor(record, blob)?)
}

fn int8(e: &QLayerEntry, tensors: &[TensorRecord], blob: &[u8]) -> Result<Vec<i8>, QuantError> {
    match payload(e, "weight", tensors, blob)? {
        TensorData::Int8(v) => Ok(v),
        other => Err(invalid(&e.id, &format!("weights are {}, expected int8", other.dtype()))),
    }
}

fn int32(e: &QLayerEntry, tensors: &[TensorRecord], blob: &[u8]) -> Result<Vec<i32>, QuantError> {
    match payload(e, "bias", tensors, blob)? {
        TensorData::Int32(v) => Ok(v),
        other => Err(invalid(&e.id, &format!("bias is {}, expected int32", other.dtype()))),
    }
}

pub(crate) fn decode_layers(
    entries: &[QLayerEntry],
    tensors: &[TensorRecord],
    blob: &[u8],
) -> Result<Vec<QLayer>, QuantError> {
    let mut layers = Vec::with_capacity(entries.len());
    for e in entries {
        e.input.validate()?;
        e.output.validate()?;
        let missing = |f: &str| invalid(&e.id, &format!("missing `{f}`"));
        let kind = match e.kind.as_str() {
            "conv2d" => {
                let g = e.conv.ok_or_else(|| missing("conv"))?;
                let weights = int8(e, tensors, blob)?;
                let bias = int32(e, tensors, blob)?;
                if weights.len() != g.weight_len() || bias.len() != g.c_out {
                    return Err(invalid(&e.id, "payload size does not match geometry"));
                }
                QLayerKind::Conv {
                    geometry: g,
                    weights,
                    bias,
                    weight_params: e.weight_params.ok_or_else(|| missing("weight_params"))?,
                    shift: e.shift.ok_or_else(|| missing("shift"))?,
                    fused_relu: e.fused_relu.clone(),
                }
            }
            "dense" => {
                let in_features = e.in_features.ok_or_else(|| missing("in_features"))?;
                let out_features = e.out_features.ok_or_else(|| missing("out_features"))?;
                let weights = int8(e, tensors, blob)?;
                let bias = int32(e, tensors, blob)?;
                if weights.len() != in_features * out_features || bias.len() != out_features {
                    return Err(invalid(&e.id, "payload size does not match geometry"));
                }
                QLayerKind::Dense {
                    in_features,
                    out_features,
                    weights,
                    bias,
                    weight_params: e.weight_params.ok_or_else(|| missing("weight_params"))?,
                    shift: e.shift.ok_or_else(|| missing("shift"))?,
                }
            }
            "relu" => QLayerKind::Relu,
            "maxpool" => QLayerKind::MaxPool(e.pool.ok_or_else(|| missing("pool"))?),
            "globalavgpool" => QLayerKind::GlobalAvgPool,
            "softmax" => QLayerKind::Softmax,
            other => return Err(invalid(&e.id, &format!("unknown kind `{other}`"))),
        };
        layers.push(QLayer {
            id: e.id.clone(),
            kind,
            input: e.input,
            output: e.output,
        });
    }
    Ok(layers)
}

/// Writes a quantized model. Only batch size 1 is exported.
pub fn save_qmodel(path: &Path, qmodel: &QuantizedModel) -> Result<(), QuantError> {
    if qmodel.calibration.batch_size != 1 {
        return Err(QuantError::BatchSize(qmodel.calibration.batch_size));
    }
    if qmodel.input_shape.n != 1 {
        return Err(QuantError::BatchSize(qmodel.input_shape.n));
    }
    let mut blob = BlobWriter::new();
    let layers = encode_layers(&qmodel.layers, &mut blob);
    let (tensors, blob) = blob.finish();
    let manifest = QModelManifest {
        format: QMODEL_FORMAT.to_string(),
        format_version: QMODEL_FORMAT_VERSION,
        input_shape: qmodel.input_shape,
        input_params: qmodel.input_params,
        calibration: qmodel.calibration.clone(),
        layers,
        tensors,
    };
    Ok(container::save(path, &manifest, &blob)?)
}

pub fn load_qmodel(path: &Path) -> Result<QuantizedModel, QuantError> {
    let (m, blob): (QModelManifest, Vec<u8>) = container::load(path, QMODEL_FORMAT, QMODEL_FORMAT_VERSION)?;
    if m.calibration.batch_size != 1 {
        return Err(QuantError::BatchSize(m.calibration.batch_size));
    }
    m.input_params.validate()?;
    let layers = decode_layers(&m.layers, &m.tensors, &blob)?;
    let qmodel = QuantizedModel {
        input_shape: m.input_shape,
        input_params: m.input_params,
        layers,
        calibration: m.calibration,
    };
    check_chain(&qmodel)?;
    Ok(qmodel)
}

/// Shapes must propagate and each layer's input scale must match its producer's output.
pub(crate) fn check_chain(qmodel: &QuantizedModel) -> Result<(), QuantError> {
    let mut shape = qmodel.input_shape;
    let mut params = qmodel.input_params;
    for l in &qmodel.layers {
        shape = l.kind.op_kind().output_shape(shape).map_err(|e| invalid(&l.id, &e))?;
        if l.input != params {
            return Err(invalid(&l.id, "input scale differs from producer output scale"));
        }
        params = l.output;
    }
    Ok(())
}
