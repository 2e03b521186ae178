use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tile::{LayerTotals, TensorInfo};
use super::{CompileError, CompiledModel, Fingerprint, Subgraph};
use crate::container::{self, BlobWriter, ContainerError, TensorRecord};
use crate::quant::{self, CalibrationMeta, QLayerEntry, QuantParams};
use crate::tensor::TensorShape;

pub const CMODEL_FORMAT: &str = "dpuflow.cmodel";
pub const CMODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompiledManifest {
    format: String,
    format_version: u32,
    fingerprint: Fingerprint,
    input_shape: TensorShape,
    input_params: QuantParams,
    calibration: CalibrationMeta,
    layers: Vec<QLayerEntry>,
    tensor_table: Vec<TensorInfo>,
    layer_totals: Vec<LayerTotals>,
    host_tail: Vec<usize>,
    subgraphs: Vec<Subgraph>,
    tensors: Vec<TensorRecord>,
}

/// Sibling files of a compiled model manifest: instruction listing and fingerprint sidecar.
pub fn artifact_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("lst"), path.with_extension("fingerprint.json"))
}

/// Writes the manifest, payload blob, instruction listing and fingerprint sidecar.
pub fn save_compiled(path: &Path, model: &CompiledModel) -> Result<(), CompileError> {
    let mut blob = BlobWriter::new();
    let layers = quant::encode_layers(&model.layers, &mut blob);
    let (tensors, blob) = blob.finish();
    let manifest = CompiledManifest {
        format: CMODEL_FORMAT.to_string(),
        format_version: CMODEL_FORMAT_VERSION,
        fingerprint: model.fingerprint.clone(),
        input_shape: model.input_shape,
        input_params: model.input_params,
        calibration: model.calibration.clone(),
        layers,
        tensor_table: model.tensors.clone(),
        layer_totals: model.layer_totals.clone(),
        host_tail: model.host_tail.clone(),
        subgraphs: model.subgraphs.clone(),
        tensors,
    };
    container::save(path, &manifest, &blob)?;
    let (listing, sidecar) = artifact_paths(path);
    fs::write(&listing, model.listing()).map_err(|source| ContainerError::Io { path: listing, source })?;
    model.fingerprint.save(&sidecar)?;
    Ok(())
}

pub fn load_compiled(path: &Path) -> Result<CompiledModel, CompileError> {
    let (m, blob): (CompiledManifest, Vec<u8>) = container::load(path, CMODEL_FORMAT, CMODEL_FORMAT_VERSION)?;
    let layers = quant::decode_layers(&m.layers, &m.tensors, &blob)?;
    let model = CompiledModel {
        fingerprint: m.fingerprint,
        input_shape: m.input_shape,
        input_params: m.input_params,
        layers,
        tensors: m.tensor_table,
        subgraphs: m.subgraphs,
        layer_totals: m.layer_totals,
        host_tail: m.host_tail,
        calibration: m.calibration,
    };
    validate(&model)?;
    Ok(model)
}

fn validate(m: &CompiledModel) -> Result<(), CompileError> {
    let bad = |s: String| Err(CompileError::InvalidModel(s));
    quant::check_chain(&m.as_quantized())?;
    if m.subgraphs.is_empty() {
        return bad("no subgraphs".into());
    }
    if m.layer_totals.len() != m.accelerator().layers.len() {
        return bad("layer totals do not match the accelerator subgraph".into());
    }
    if m.tensors.len() < m.layers.len() + 1 {
        return bad("tensor table is shorter than the activation list".into());
    }
    for ins in m.instructions() {
        if ins.layer >= m.layers.len() {
            return bad(format!("instruction refers to layer {}", ins.layer));
        }
        if let Some(r) = ins.region {
            let Some(t) = m.tensors.get(r.tensor) else {
                return bad(format!("instruction refers to tensor {}", r.tensor));
            };
            if r.count > 0 && r.offset + (r.count - 1) * r.stride + r.len > t.shape.numel() {
                return bad(format!("region outside tensor `{}`", t.name));
            }
        }
    }
    if m.host_tail.iter().any(|&i| i >= m.layers.len()) {
        return bad("host tail refers to a missing layer".into());
    }
    super::check_stream(&m.accelerator().instructions).or_else(bad)
}
