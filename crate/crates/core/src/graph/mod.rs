//! CNN graph representation: layer payloads, validation, shape inference and
//! parameter / operation counting.
//!
//! Graphs are linear chains. Every layer but the first has exactly one
//! producer, and the first layer consumes the graph input. Layers are kept in
//! topological order once a graph has been built.

mod io;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::tensor::TensorShape;

pub use io::{
    deserialize_graph, load_graph, save_graph, serialize_graph, GraphDocument, GRAPH_FORMAT, GRAPH_FORMAT_VERSION,
};

pub const SUPPORTED_KERNELS: [usize; 3] = [1, 3, 5];
pub const SUPPORTED_STRIDES: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    ShapeMismatch,
    Cycle,
    UnknownKind,
    PayloadSize,
    InvalidParameter,
    Topology,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub layer: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, layer: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            kind,
            layer: layer.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(id) => write!(f, "[{:?}] layer `{}`: {}", self.kind, id, self.message),
            None => write!(f, "[{:?}] {}", self.kind, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl GraphError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            GraphError::Invalid(d) => d,
            GraphError::Container(_) => &[],
        }
    }

    pub fn has(&self, kind: DiagnosticKind) -> bool {
        self.diagnostics().iter().any(|d| d.kind == kind)
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  - {d}")).collect::<Vec<_>>().join("\n")
}

/// Structural description of a convolution, without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    /// `floor((len + 2*pad - k) / stride) + 1`, or `None` when the window does not fit.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.k || self.stride == 0 {
            return None;
        }
        Some((padded - self.k) / self.stride + 1)
    }
}

/// Square 2-D convolution (cross-correlation) with bias. Weights are `[c_out, c_in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            c_in: self.c_in,
            c_out: self.c_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormSpec {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
}

/// Fully connected layer over the flattened `(c, h, w)` input. Weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    BatchNorm(BatchNormSpec),
    Relu,
    MaxPool(PoolSpec),
    GlobalAvgPool,
    Dense(DenseSpec),
    Softmax,
}

impl LayerSpec {
    pub fn op_kind(&self) -> OpKind {
        match self {
            LayerSpec::Conv2d(c) => OpKind::Conv2d(c.geometry()),
            LayerSpec::BatchNorm(b) => OpKind::BatchNorm { channels: b.channels() },
            LayerSpec::Relu => OpKind::Relu,
            LayerSpec::MaxPool(p) => OpKind::MaxPool(*p),
            LayerSpec::GlobalAvgPool => OpKind::GlobalAvgPool,
            LayerSpec::Dense(d) => OpKind::Dense {
                in_features: d.in_features,
                out_features: d.out_features,
            },
            LayerSpec::Softmax => OpKind::Softmax,
        }
    }

    /// Number of stored scalar parameters.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.weights.len() + c.bias.len(),
            LayerSpec::BatchNorm(b) => b.gamma.len() + b.beta.len() + b.mean.len() + b.var.len(),
            LayerSpec::Dense(d) => d.weights.len() + d.bias.len(),
            LayerSpec::Relu | LayerSpec::MaxPool(_) | LayerSpec::GlobalAvgPool | LayerSpec::Softmax => 0,
        }
    }

    fn check_payload(&self, id: &str, diags: &mut Vec<Diagnostic>) {
        let mut size = |what: &str, got: usize, want: usize| {
            if got != want {
                diags.push(Diagnostic::new(
                    DiagnosticKind::PayloadSize,
                    Some(id),
                    format!("{what} has {got} values, expected {want}"),
                ));
            }
        };
        match self {
            LayerSpec::Conv2d(c) => {
                size("weight", c.weights.len(), c.geometry().weight_len());
                size("bias", c.bias.len(), c.c_out);
            }
            LayerSpec::BatchNorm(b) => {
                let ch = b.channels();
                size("beta", b.beta.len(), ch);
                size("running mean", b.mean.len(), ch);
                size("running variance", b.var.len(), ch);
            }
            LayerSpec::Dense(d) => {
                size("weight", d.weights.len(), d.in_features * d.out_features);
                size("bias", d.bias.len(), d.out_features);
            }
            _ => {}
        }
        let mut bad = |msg: String| {
            diags.push(Diagnostic::new(DiagnosticKind::InvalidParameter, Some(id), msg));
        };
        match self {
            LayerSpec::Conv2d(c) => {
                if !SUPPORTED_KERNELS.contains(&c.k) {
                    bad(format!("kernel size {} not in {:?}", c.k, SUPPORTED_KERNELS));
                }
                if !SUPPORTED_STRIDES.contains(&c.stride) {
                    bad(format!("stride {} not in {:?}", c.stride, SUPPORTED_STRIDES));
                }
                if c.c_in == 0 || c.c_out == 0 {
                    bad("channel counts must be >= 1".into());
                }
            }
            LayerSpec::BatchNorm(b) => {
                if b.channels() == 0 {
                    bad("batchnorm needs at least one channel".into());
                }
                if !(b.eps >= 0.0) {
                    bad(format!("eps must be >= 0, got {}", b.eps));
                }
                for (ch, &v) in b.var.iter().enumerate() {
                    if !(v >= 0.0) {
                        bad(format!("running variance of channel {ch} is negative ({v})"));
                    } else if v + b.eps <= 0.0 {
                        bad(format!("channel {ch}: variance + eps must be > 0"));
                    }
                }
            }
            LayerSpec::MaxPool(p) => {
                if p.k == 0 || p.stride == 0 {
                    bad("pool window and stride must be >= 1".into());
                }
            }
            LayerSpec::Dense(d) if d.in_features == 0 || d.out_features == 0 => {
                bad("dense feature counts must be >= 1".into());
            }
            LayerSpec::Dense(_) => {}
            _ => {}
        }
    }
}

/// Operation counts split by category. One multiply-accumulate counts as two operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub conv: u64,
    pub dense: u64,
    pub eltwise: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.conv + self.dense + self.eltwise
    }
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(self, rhs: Self) -> Self {
        OpCounts {
            conv: self.conv + rhs.conv,
            dense: self.dense + rhs.dense,
            eltwise: self.eltwise + rhs.eltwise,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Parameter-free description of a layer: enough for shape inference,
/// operation counting and partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpKind {
    Conv2d(ConvGeometry),
    BatchNorm { channels: usize },
    Relu,
    MaxPool(PoolSpec),
    GlobalAvgPool,
    Dense { in_features: usize, out_features: usize },
    Softmax,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d(_) => "conv2d",
            OpKind::BatchNorm { .. } => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::MaxPool(_) => "maxpool",
            OpKind::GlobalAvgPool => "globalavgpool",
            OpKind::Dense { .. } => "dense",
            OpKind::Softmax => "softmax",
        }
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape, String> {
        match *self {
            OpKind::Conv2d(g) => {
                if input.c != g.c_in {
                    return Err(format!("expects {} input channels, producer gives {}", g.c_in, input.c));
                }
                match (g.output_len(input.h), g.output_len(input.w)) {
                    (Some(h), Some(w)) => Ok(TensorShape::new(input.n, g.c_out, h, w)),
                    _ => Err(format!(
                        "kernel {} with pad {} does not fit a {}x{} input",
                        g.k, g.pad, input.h, input.w
                    )),
                }
            }
            OpKind::BatchNorm { channels } => {
                if channels != input.c {
                    return Err(format!("has {channels} channels, producer gives {}", input.c));
                }
                Ok(input)
            }
            OpKind::Relu | OpKind::Softmax => Ok(input),
            OpKind::MaxPool(p) => {
                if p.k > input.h || p.k > input.w || p.stride == 0 {
                    return Err(format!("pool window {} exceeds the {}x{} input", p.k, input.h, input.w));
                }
                Ok(TensorShape::new(
                    input.n,
                    input.c,
                    (input.h - p.k) / p.stride + 1,
                    (input.w - p.k) / p.stride + 1,
                ))
            }
            OpKind::GlobalAvgPool => Ok(TensorShape::new(input.n, input.c, 1, 1)),
            OpKind::Dense {
                in_features,
                out_features,
            } => {
                if input.image_len() != in_features {
                    return Err(format!(
                        "expects {in_features} input features, producer gives {}",
                        input.image_len()
                    ));
                }
                Ok(TensorShape::new(input.n, out_features, 1, 1))
            }
        }
    }

    /// Operation count for one application of the layer on `input`.
    ///
    /// Convolution: `2 * k^2 * c_in * c_out * h_out * w_out`; dense: `2 * in * out`;
    /// every other kind counts one operation per input element.
    pub fn ops(&self, input: TensorShape, output: TensorShape) -> OpCounts {
        let n = input.n as u64;
        match *self {
            OpKind::Conv2d(g) => OpCounts {
                conv: 2 * (g.k * g.k * g.c_in) as u64 * (g.c_out * output.h * output.w) as u64 * n,
                ..OpCounts::default()
            },
            OpKind::Dense {
                in_features,
                out_features,
            } => OpCounts {
                dense: 2 * (in_features * out_features) as u64 * n,
                ..OpCounts::default()
            },
            _ => OpCounts {
                eltwise: input.numel() as u64,
                ..OpCounts::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(id: impl Into<String>, spec: LayerSpec) -> Self {
        Self { id: id.into(), spec }
    }
}

/// Unvalidated graph description, as read from a document.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDescription {
    pub input_shape: TensorShape,
    pub layers: Vec<Layer>,
    pub edges: Vec<(String, String)>,
}

impl GraphDescription {
    /// Description of a linear chain with edges between consecutive layers.
    pub fn chain(input_shape: TensorShape, layers: Vec<Layer>) -> Self {
        let edges = layers.windows(2).map(|w| (w[0].id.clone(), w[1].id.clone())).collect();
        Self {
            input_shape,
            layers,
            edges,
        }
    }
}

/// Validated, immutable layer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: TensorShape,
    layers: Vec<Layer>,
    shapes: Vec<TensorShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub per_layer: Vec<(String, OpCounts)>,
    pub total: OpCounts,
}

impl ModelGraph {
    /// Validates a description, returning every diagnostic found.
    pub fn build(desc: GraphDescription) -> Result<Self, GraphError> {
        let mut diags = Vec::new();
        if let Err(e) = desc.input_shape.validate() {
            diags.push(Diagnostic::new(DiagnosticKind::ShapeMismatch, None, e.to_string()));
        }
        if desc.layers.is_empty() {
            diags.push(Diagnostic::new(DiagnosticKind::Topology, None, "graph has no layers"));
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in desc.layers.iter().enumerate() {
            if layer.id.is_empty() {
                diags.push(Diagnostic::new(
                    DiagnosticKind::Topology,
                    None,
                    format!("layer #{i} has an empty id"),
                ));
            }
            if index.insert(layer.id.as_str(), i).is_some() {
                diags.push(Diagnostic::new(
                    DiagnosticKind::Topology,
                    Some(&layer.id),
                    "duplicate layer id",
                ));
            }
            layer.spec.check_payload(&layer.id, &mut diags);
        }

        let mut producers: Vec<Vec<usize>> = vec![Vec::new(); desc.layers.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); desc.layers.len()];
        let mut seen_edges = HashSet::new();
        for (from, to) in &desc.edges {
            match (index.get(from.as_str()), index.get(to.as_str())) {
                (Some(&a), Some(&b)) => {
                    if !seen_edges.insert((a, b)) {
                        continue;
                    }
                    producers[b].push(a);
                    consumers[a].push(b);
                }
                _ => diags.push(Diagnostic::new(
                    DiagnosticKind::Topology,
                    None,
                    format!("edge {from} -> {to} references an unknown layer"),
                )),
            }
        }

        let order = topological_order(&producers, &consumers);
        if order.len() < desc.layers.len() {
            let stuck: Vec<&str> = (0..desc.layers.len())
                .filter(|i| !order.contains(i))
                .map(|i| desc.layers[i].id.as_str())
                .collect();
            diags.push(Diagnostic::new(
                DiagnosticKind::Cycle,
                None,
                format!("cycle detected among layers {stuck:?}"),
            ));
            return Err(GraphError::Invalid(diags));
        }

        for (i, layer) in desc.layers.iter().enumerate() {
            if producers[i].len() > 1 {
                diags.push(Diagnostic::new(
                    DiagnosticKind::Topology,
                    Some(&layer.id),
                    format!("has {} producers; only linear chains are supported", producers[i].len()),
                ));
            }
            if consumers[i].len() > 1 {
                diags.push(Diagnostic::new(
                    DiagnosticKind::Topology,
                    Some(&layer.id),
                    format!(
                        "feeds {} consumers; branching graphs are not supported",
                        consumers[i].len()
                    ),
                ));
            }
        }
        let sources = producers.iter().filter(|p| p.is_empty()).count();
        if sources > 1 {
            diags.push(Diagnostic::new(
                DiagnosticKind::Topology,
                None,
                format!("{sources} layers have no producer; exactly one may consume the graph input"),
            ));
        }
        if !diags.is_empty() {
            return Err(GraphError::Invalid(diags));
        }

        let mut slots: Vec<Option<Layer>> = desc.layers.into_iter().map(Some).collect();
        let layers: Vec<Layer> = order
            .iter()
            .map(|&i| slots[i].take().expect("each index once"))
            .collect();

        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = desc.input_shape;
        for layer in &layers {
            match layer.spec.op_kind().output_shape(current) {
                Ok(next) => {
                    shapes.push(next);
                    current = next;
                }
                Err(msg) => {
                    diags.push(Diagnostic::new(DiagnosticKind::ShapeMismatch, Some(&layer.id), msg));
                    break;
                }
            }
        }
        if !diags.is_empty() {
            return Err(GraphError::Invalid(diags));
        }
        Ok(Self {
            input_shape: desc.input_shape,
            layers,
            shapes,
        })
    }

    /// Builds a linear chain in the given order.
    pub fn chain(input_shape: TensorShape, layers: Vec<Layer>) -> Result<Self, GraphError> {
        Self::build(GraphDescription::chain(input_shape, layers))
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn output_shape(&self) -> TensorShape {
        *self.shapes.last().expect("validated graphs are non-empty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of every layer, in layer order.
    pub fn shapes(&self) -> &[TensorShape] {
        &self.shapes
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> TensorShape {
        if i == 0 {
            self.input_shape
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn edges(&self) -> Vec<(String, String)> {
        self.layers
            .windows(2)
            .map(|w| (w[0].id.clone(), w[1].id.clone()))
            .collect()
    }

    pub fn description(&self) -> GraphDescription {
        GraphDescription {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            edges: self.edges(),
        }
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn count_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Per-layer and total operation counts when the graph runs on `input`.
    pub fn count_ops(&self, input: TensorShape) -> Result<OpReport, GraphError> {
        let kinds: Vec<(String, OpKind)> = self.layers.iter().map(|l| (l.id.clone(), l.spec.op_kind())).collect();
        count_ops(&kinds, input)
    }
}

/// Operation counts for a chain of structural layer descriptions.
pub fn count_ops(kinds: &[(String, OpKind)], input: TensorShape) -> Result<OpReport, GraphError> {
    let mut per_layer = Vec::with_capacity(kinds.len());
    let mut total = OpCounts::default();
    let mut current = input;
    for (id, kind) in kinds {
        let next = kind
            .output_shape(current)
            .map_err(|m| GraphError::Invalid(vec![Diagnostic::new(DiagnosticKind::ShapeMismatch, Some(id), m)]))?;
        let ops = kind.ops(current, next);
        total += ops;
        per_layer.push((id.clone(), ops));
        current = next;
    }
    Ok(OpReport { per_layer, total })
}

/// Kahn's algorithm; the result is shorter than the layer count iff there is a cycle.
/// Ties break on declaration order so the output is deterministic.
fn topological_order(producers: &[Vec<usize>], consumers: &[Vec<usize>]) -> Vec<usize> {
    let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
    let mut ready: VecDeque<usize> = (0..indegree.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        let mut next: Vec<usize> = Vec::new();
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                next.push(c);
            }
        }
        next.sort_unstable();
        ready.extend(next);
    }
    order
}
