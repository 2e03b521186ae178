//! Compact architecture descriptions and deterministic parameter initialisation.
//!
//! Trained weights are not part of this project; every shipped model is an
//! architecture file plus a seed. `init_graph` expands the architecture into a
//! full [`ModelGraph`] with seeded random parameters.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::graph::{BatchNormSpec, ConvSpec, DenseSpec, GraphError, Layer, LayerSpec, ModelGraph, OpKind, PoolSpec};
use crate::tensor::{Tensor, TensorShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchLayer {
    /// Convolution, optionally followed by batchnorm and relu. Padding defaults to `k / 2`.
    Conv2d {
        k: usize,
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pad: Option<usize>,
        c_out: usize,
        #[serde(default)]
        bn: bool,
        #[serde(default)]
        relu: bool,
    },
    MaxPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        out_features: usize,
        #[serde(default)]
        relu: bool,
    },
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: TensorShape,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub layers: Vec<ArchLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn default_seed() -> u64 {
    42
}

impl ArchSpec {
    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        container::read_json(path)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, ArchLayer::Conv2d { .. }))
            .count()
    }
}

/// The 8-layer model used by the golden tests:
/// conv-bn-relu-maxpool-conv-relu-gap-dense on a CIFAR-sized input.
pub fn test8() -> ArchSpec {
    ArchSpec {
        name: "test8".into(),
        input_shape: TensorShape::new(1, 3, 32, 32),
        seed: 42,
        layers: vec![
            ArchLayer::Conv2d {
                k: 3,
                stride: 1,
                pad: None,
                c_out: 8,
                bn: true,
                relu: true,
            },
            ArchLayer::MaxPool { k: 2, stride: 2 },
            ArchLayer::Conv2d {
                k: 3,
                stride: 1,
                pad: None,
                c_out: 16,
                bn: false,
                relu: true,
            },
            ArchLayer::GlobalAvgPool,
            ArchLayer::Dense {
                out_features: 10,
                relu: false,
            },
        ],
        notes: None,
    }
}

/// Expands `arch` into a graph whose parameters are drawn from a ChaCha8 stream seeded with `seed`.
pub fn init_graph(arch: &ArchSpec, seed: u64) -> Result<ModelGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut shape = arch.input_shape;
    let mut conv_idx = 0;
    let mut pool_idx = 0;
    let mut relu_idx = 0;

    let push = |layers: &mut Vec<Layer>, shape: &mut TensorShape, layer: Layer| {
        if let Ok(next) = layer.spec.op_kind().output_shape(*shape) {
            *shape = next;
        }
        layers.push(layer);
    };

    for entry in &arch.layers {
        match *entry {
            ArchLayer::Conv2d {
                k,
                stride,
                pad,
                c_out,
                bn,
                relu,
            } => {
                conv_idx += 1;
                let c_in = shape.c;
                let fan_in = (c_in * k * k) as f32;
                let bound = (6.0 / fan_in).sqrt();
                let weights = sample(&mut rng, -bound, bound, c_out * c_in * k * k);
                let bias = sample(&mut rng, -0.05, 0.05, c_out);
                let spec = ConvSpec {
                    k,
                    stride,
                    pad: pad.unwrap_or(k / 2),
                    c_in,
                    c_out,
                    weights,
                    bias,
                };
                push(
                    &mut layers,
                    &mut shape,
                    Layer::new(format!("conv{conv_idx}"), LayerSpec::Conv2d(spec)),
                );
                if bn {
                    let spec = BatchNormSpec {
                        gamma: sample(&mut rng, 0.8, 1.2, c_out),
                        beta: sample(&mut rng, -0.1, 0.1, c_out),
                        mean: sample(&mut rng, -0.1, 0.1, c_out),
                        var: sample(&mut rng, 0.5, 1.5, c_out),
                        eps: 1e-5,
                    };
                    push(
                        &mut layers,
                        &mut shape,
                        Layer::new(format!("bn{conv_idx}"), LayerSpec::BatchNorm(spec)),
                    );
                }
                if relu {
                    push(
                        &mut layers,
                        &mut shape,
                        Layer::new(format!("relu{conv_idx}"), LayerSpec::Relu),
                    );
                }
            }
            ArchLayer::MaxPool { k, stride } => {
                pool_idx += 1;
                push(
                    &mut layers,
                    &mut shape,
                    Layer::new(format!("pool{pool_idx}"), LayerSpec::MaxPool(PoolSpec { k, stride })),
                );
            }
            ArchLayer::GlobalAvgPool => {
                push(&mut layers, &mut shape, Layer::new("gap", LayerSpec::GlobalAvgPool));
            }
            ArchLayer::Dense { out_features, relu } => {
                let in_features = shape.image_len();
                let bound = (6.0 / in_features as f32).sqrt();
                let spec = DenseSpec {
                    in_features,
                    out_features,
                    weights: sample(&mut rng, -bound, bound, in_features * out_features),
                    bias: sample(&mut rng, -0.05, 0.05, out_features),
                };
                let id = if layers.iter().any(|l| l.id == "fc") {
                    format!("fc{}", layers.len())
                } else {
                    "fc".to_string()
                };
                push(&mut layers, &mut shape, Layer::new(id, LayerSpec::Dense(spec)));
                if relu {
                    relu_idx += 1;
                    push(
                        &mut layers,
                        &mut shape,
                        Layer::new(format!("fc_relu{relu_idx}"), LayerSpec::Relu),
                    );
                }
            }
            ArchLayer::Relu => {
                relu_idx += 1;
                push(
                    &mut layers,
                    &mut shape,
                    Layer::new(format!("act{relu_idx}"), LayerSpec::Relu),
                );
            }
            ArchLayer::Softmax => {
                push(&mut layers, &mut shape, Layer::new("softmax", LayerSpec::Softmax));
            }
        }
    }
    ModelGraph::chain(arch.input_shape, layers)
}

fn sample(rng: &mut ChaCha8Rng, lo: f32, hi: f32, n: usize) -> Vec<f32> {
    let dist = Uniform::new_inclusive(lo, hi);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `count` images with pixels in `[0, 1]`, drawn from a seeded stream. Each
/// channel is a random level plus a random sinusoidal pattern and pixel noise,
/// so images differ in both their channel means and their spatial structure.
pub fn synthetic_images(count: usize, shape: TensorShape, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(0.0f32, 1.0);
    (0..count)
        .map(|_| {
            let mut data = Vec::with_capacity(shape.numel());
            for _ in 0..shape.n * shape.c {
                let level = 0.1 + 0.8 * unit.sample(&mut rng);
                let amp = 0.5 * unit.sample(&mut rng);
                let (fy, fx) = (0.5 * unit.sample(&mut rng), 0.5 * unit.sample(&mut rng));
                let phase = std::f32::consts::TAU * unit.sample(&mut rng);
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let wave = (std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) + phase).sin();
                        let noise = 0.3 * (unit.sample(&mut rng) - 0.5);
                        data.push((level + amp * wave + noise).clamp(0.0, 1.0));
                    }
                }
            }
            Tensor::from_f32(shape, data).expect("shape and length agree")
        })
        .collect()
}

/// Layer, parameter and op counts of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub conv_layers: usize,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub c_in: usize,
    pub final_c_out: usize,
    pub params: usize,
}

pub fn profile(graph: &ModelGraph) -> ArchProfile {
    let mut kernel_sizes = Vec::new();
    let mut strides = Vec::new();
    let mut conv_layers = 0;
    let mut final_c_out = 0;
    for layer in graph.layers() {
        if let OpKind::Conv2d(g) = layer.spec.op_kind() {
            conv_layers += 1;
            final_c_out = g.c_out;
            if !kernel_sizes.contains(&g.k) {
                kernel_sizes.push(g.k);
            }
            if !strides.contains(&g.stride) {
                strides.push(g.stride);
            }
        }
    }
    kernel_sizes.sort_unstable();
    strides.sort_unstable();
    ArchProfile {
        conv_layers,
        kernel_sizes,
        strides,
        c_in: graph.input_shape().c,
        final_c_out,
        params: graph.count_params(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test8_has_eight_layers() {
        let g = init_graph(&test8(), 42).unwrap();
        let ids: Vec<&str> = g.layers().iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, ["conv1", "bn1", "relu1", "pool1", "conv2", "relu2", "gap", "fc"]);
        assert_eq!(g.output_shape(), TensorShape::vector(10));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_graph(&test8(), 7).unwrap();
        assert_eq!(a, init_graph(&test8(), 7).unwrap());
        assert_ne!(a, init_graph(&test8(), 8).unwrap());
    }
}
