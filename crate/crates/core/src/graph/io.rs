use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BatchNormSpec, ConvSpec, DenseSpec, Diagnostic, DiagnosticKind, GraphDescription, GraphError, Layer, LayerSpec,
    ModelGraph, PoolSpec,
};
use crate::container::{self, BlobWriter, ContainerError, Header, TensorRecord};
use crate::tensor::{TensorData, TensorShape};

pub const GRAPH_FORMAT: &str = "dpuflow.graph";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    /// Parameter role (`weight`, `bias`, `gamma`, ...) to tensor-table index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, usize>,
}

impl LayerEntry {
    fn bare(id: &str, kind: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: kind.to_string(),
            k: None,
            stride: None,
            pad: None,
            c_in: None,
            c_out: None,
            eps: None,
            in_features: None,
            out_features: None,
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub format: String,
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input_shape: TensorShape,
    pub layers: Vec<LayerEntry>,
    pub edges: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub notes: serde_json::Value,
}

/// A model file in memory: manifest plus parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDocument {
    pub manifest: GraphManifest,
    pub blob: Vec<u8>,
}

pub fn serialize_graph(graph: &ModelGraph) -> GraphDocument {
    let mut blob = BlobWriter::new();
    let mut layers = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let id = layer.id.as_str();
        let mut push = |entry: &mut LayerEntry, role: &str, shape: &[usize], values: &[f32]| {
            let idx = blob.push(format!("{id}.{role}"), shape, &TensorData::Fp32(values.to_vec()));
            entry.params.insert(role.to_string(), idx);
        };
        let entry = match &layer.spec {
            LayerSpec::Conv2d(c) => {
                let mut e = LayerEntry::bare(id, "conv2d");
                e.k = Some(c.k);
                e.stride = Some(c.stride);
                e.pad = Some(c.pad);
                e.c_in = Some(c.c_in);
                e.c_out = Some(c.c_out);
                push(&mut e, "weight", &[c.c_out, c.c_in, c.k, c.k], &c.weights);
                push(&mut e, "bias", &[c.c_out], &c.bias);
                e
            }
            LayerSpec::BatchNorm(b) => {
                let mut e = LayerEntry::bare(id, "batchnorm");
                e.eps = Some(b.eps);
                let ch = b.channels();
                push(&mut e, "gamma", &[ch], &b.gamma);
                push(&mut e, "beta", &[ch], &b.beta);
                push(&mut e, "mean", &[ch], &b.mean);
                push(&mut e, "var", &[ch], &b.var);
                e
            }
            LayerSpec::Dense(d) => {
                let mut e = LayerEntry::bare(id, "dense");
                e.in_features = Some(d.in_features);
                e.out_features = Some(d.out_features);
                push(&mut e, "weight", &[d.out_features, d.in_features], &d.weights);
                push(&mut e, "bias", &[d.out_features], &d.bias);
                e
            }
            LayerSpec::MaxPool(p) => {
                let mut e = LayerEntry::bare(id, "maxpool");
                e.k = Some(p.k);
                e.stride = Some(p.stride);
                e
            }
            LayerSpec::Relu => LayerEntry::bare(id, "relu"),
            LayerSpec::GlobalAvgPool => LayerEntry::bare(id, "globalavgpool"),
            LayerSpec::Softmax => LayerEntry::bare(id, "softmax"),
        };
        layers.push(entry);
    }
    let (tensors, blob) = blob.finish();
    GraphDocument {
        manifest: GraphManifest {
            format: GRAPH_FORMAT.to_string(),
            format_version: GRAPH_FORMAT_VERSION,
            name: None,
            input_shape: graph.input_shape(),
            layers,
            edges: graph.edges(),
            tensors,
            notes: serde_json::Value::Null,
        },
        blob,
    }
}

pub fn deserialize_graph(doc: &GraphDocument) -> Result<ModelGraph, GraphError> {
    let m = &doc.manifest;
    Header::new(&m.format, m.format_version).check(GRAPH_FORMAT, GRAPH_FORMAT_VERSION)?;

    let mut diags = Vec::new();
    let mut layers = Vec::with_capacity(m.layers.len());
    for entry in &m.layers {
        match decode_layer(entry, &m.tensors, &doc.blob, &mut diags)? {
            Some(spec) => layers.push(Layer::new(entry.id.clone(), spec)),
            None => continue,
        }
    }
    if !diags.is_empty() {
        return Err(GraphError::Invalid(diags));
    }
    ModelGraph::build(GraphDescription {
        input_shape: m.input_shape,
        layers,
        edges: m.edges.clone(),
    })
}

fn decode_layer(
    entry: &LayerEntry,
    tensors: &[TensorRecord],
    blob: &[u8],
    diags: &mut Vec<Diagnostic>,
) -> Result<Option<LayerSpec>, GraphError> {
    let id = entry.id.as_str();
    let mut missing = Vec::new();
    let mut field = |name: &'static str, v: Option<usize>| {
        if v.is_none() {
            missing.push(name);
        }
        v.unwrap_or(0)
    };
    let spec = match entry.kind.as_str() {
        "conv2d" => {
            let (k, stride, pad, c_in, c_out) = (
                field("k", entry.k),
                field("stride", entry.stride),
                field("pad", entry.pad),
                field("c_in", entry.c_in),
                field("c_out", entry.c_out),
            );
            LayerSpec::Conv2d(ConvSpec {
                k,
                stride,
                pad,
                c_in,
                c_out,
                weights: param(entry, "weight", tensors, blob, diags)?,
                bias: param(entry, "bias", tensors, blob, diags)?,
            })
        }
        "batchnorm" => LayerSpec::BatchNorm(BatchNormSpec {
            gamma: param(entry, "gamma", tensors, blob, diags)?,
            beta: param(entry, "beta", tensors, blob, diags)?,
            mean: param(entry, "mean", tensors, blob, diags)?,
            var: param(entry, "var", tensors, blob, diags)?,
            eps: match entry.eps {
                Some(e) => e,
                None => {
                    missing.push("eps");
                    0.0
                }
            },
        }),
        "dense" => {
            let (in_features, out_features) = (
                field("in_features", entry.in_features),
                field("out_features", entry.out_features),
            );
            LayerSpec::Dense(DenseSpec {
                in_features,
                out_features,
                weights: param(entry, "weight", tensors, blob, diags)?,
                bias: param(entry, "bias", tensors, blob, diags)?,
            })
        }
        "maxpool" => LayerSpec::MaxPool(PoolSpec {
            k: field("k", entry.k),
            stride: field("stride", entry.stride),
        }),
        "relu" => LayerSpec::Relu,
        "globalavgpool" => LayerSpec::GlobalAvgPool,
        "softmax" => LayerSpec::Softmax,
        other => {
            diags.push(Diagnostic::new(
                DiagnosticKind::UnknownKind,
                Some(id),
                format!("unknown layer kind `{other}`"),
            ));
            return Ok(None);
        }
    };
    if !missing.is_empty() {
        diags.push(Diagnostic::new(
            DiagnosticKind::InvalidParameter,
            Some(id),
            format!("missing fields {missing:?}"),
        ));
        return Ok(None);
    }
    Ok(Some(spec))
}

fn param(
    entry: &LayerEntry,
    role: &str,
    tensors: &[TensorRecord],
    blob: &[u8],
    diags: &mut Vec<Diagnostic>,
) -> Result<Vec<f32>, GraphError> {
    let Some(record) = entry.params.get(role).and_then(|&i| tensors.get(i)) else {
        diags.push(Diagnostic::new(
            DiagnosticKind::PayloadSize,
            Some(&entry.id),
            format!("no `{role}` tensor"),
        ));
        return Ok(Vec::new());
    };
    match container::read_tensor(record, blob)? {
        TensorData::Fp32(v) => Ok(v),
        other => {
            diags.push(Diagnostic::new(
                DiagnosticKind::PayloadSize,
                Some(&entry.id),
                format!("`{role}` is {}, expected fp32", other.dtype()),
            ));
            Ok(Vec::new())
        }
    }
}

/// Writes `graph` to `path` (manifest) and its `.bin` sibling.
pub fn save_graph(
    path: &Path,
    graph: &ModelGraph,
    name: Option<&str>,
    notes: serde_json::Value,
) -> Result<(), ContainerError> {
    let mut doc = serialize_graph(graph);
    doc.manifest.name = name.map(str::to_string);
    doc.manifest.notes = notes;
    container::save(path, &doc.manifest, &doc.blob)
}

pub fn load_graph(path: &Path) -> Result<ModelGraph, GraphError> {
    let (manifest, blob) = container::load(path, GRAPH_FORMAT, GRAPH_FORMAT_VERSION)?;
    deserialize_graph(&GraphDocument { manifest, blob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::conv;

    fn sample() -> ModelGraph {
        let mut c = conv("conv1", 3, 1, 1, 3, 4);
        if let LayerSpec::Conv2d(spec) = &mut c.spec {
            for (i, w) in spec.weights.iter_mut().enumerate() {
                *w = (i as f32 * 0.37).sin() * 1e-3 + f32::EPSILON;
            }
        }
        ModelGraph::chain(
            TensorShape::new(1, 3, 8, 8),
            vec![
                c,
                Layer::new(
                    "bn1",
                    LayerSpec::BatchNorm(BatchNormSpec {
                        gamma: vec![1.0, 2.0, 0.5, 1.5],
                        beta: vec![0.1; 4],
                        mean: vec![-0.2; 4],
                        var: vec![0.9; 4],
                        eps: 1e-5,
                    }),
                ),
                Layer::new("relu1", LayerSpec::Relu),
                Layer::new("pool1", LayerSpec::MaxPool(PoolSpec { k: 2, stride: 2 })),
                Layer::new("gap", LayerSpec::GlobalAvgPool),
                Layer::new(
                    "fc",
                    LayerSpec::Dense(DenseSpec {
                        in_features: 4,
                        out_features: 10,
                        weights: (0..40).map(|i| i as f32 / 7.0).collect(),
                        bias: vec![0.25; 10],
                    }),
                ),
                Layer::new("softmax", LayerSpec::Softmax),
            ],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let g = sample();
        save_graph(
            &path,
            &g,
            Some("sample"),
            serde_json::json!({"params": g.count_params()}),
        )
        .unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut doc = serialize_graph(&sample());
        doc.manifest.format_version = 99;
        let err = deserialize_graph(&doc).unwrap_err();
        assert!(matches!(
            err,
            GraphError::Container(ContainerError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_blob_fails_checksum_or_bounds() {
        let mut doc = serialize_graph(&sample());
        let last = doc.manifest.tensors.last().unwrap().clone();
        doc.blob.truncate(last.offset + last.length - 1);
        let err = deserialize_graph(&doc).unwrap_err();
        assert!(
            matches!(err, GraphError::Container(ContainerError::OutOfBounds { .. })),
            "{err}"
        );

        let mut doc = serialize_graph(&sample());
        let n = doc.blob.len();
        doc.blob[n - 1] ^= 1;
        let err = deserialize_graph(&doc).unwrap_err();
        assert!(
            matches!(err, GraphError::Container(ContainerError::Checksum { .. })),
            "{err}"
        );
    }

    #[test]
    fn unknown_kind_is_a_diagnostic() {
        let mut doc = serialize_graph(&sample());
        doc.manifest.layers[2].kind = "gelu".into();
        let err = deserialize_graph(&doc).unwrap_err();
        assert!(err.has(DiagnosticKind::UnknownKind), "{err}");
    }
}
