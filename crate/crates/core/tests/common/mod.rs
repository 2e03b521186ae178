//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpuflow::compiler::{compile, fold_batchnorm, CompiledModel};
use dpuflow::graph::{BatchNormSpec, ConvSpec, DenseSpec, Layer, LayerSpec, ModelGraph, PoolSpec};
use dpuflow::models::{init_graph, synthetic_images, test8};
use dpuflow::quant::{calibrate, quantize_model, CalibrationSet, QLayerKind, QuantizedModel};
use dpuflow::refexec;
use dpuflow::sim::{load_model, LoadedModel, TargetConfig};
use dpuflow::tensor::{Tensor, TensorShape};

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub const GOLDEN_SEED: u64 = 42;
pub const CALIBRATION_IMAGES: usize = 1000;

/// The shipped 8-layer model at seed 42 and its full INT8 pipeline.
pub struct Test8 {
    pub graph: ModelGraph,
    pub folded: ModelGraph,
    pub calibration: Vec<Tensor>,
    pub qmodel: QuantizedModel,
    pub compiled: CompiledModel,
    pub loaded: LoadedModel,
}

pub fn test8_pipeline() -> Test8 {
    let arch = test8();
    let graph = init_graph(&arch, GOLDEN_SEED).unwrap();
    let folded = fold_batchnorm(&graph).unwrap();
    let calibration = synthetic_images(CALIBRATION_IMAGES, arch.input_shape, GOLDEN_SEED);
    let table = calibrate(
        &folded,
        &CalibrationSet::new("synthetic-seed42", calibration.clone()),
        100,
    )
    .unwrap();
    let qmodel = quantize_model(&folded, &table).unwrap();
    let target = TargetConfig::zcu104_dual_b4096();
    let compiled = compile(&qmodel, &target).unwrap();
    let loaded = load_model(compiled.clone(), &target).unwrap();
    Test8 {
        graph,
        folded,
        calibration,
        qmodel,
        compiled,
        loaded,
    }
}

/// Brute-force convolution: seven nested loops, taps summed in (ci, ky, kx)
/// order from zero, bias added last.
pub fn naive_conv(input: &Tensor, c: &ConvSpec) -> Tensor {
    let s = input.shape();
    let x = input.as_f32().unwrap();
    let oh = (s.h + 2 * c.pad - c.k) / c.stride + 1;
    let ow = (s.w + 2 * c.pad - c.k) / c.stride + 1;
    let mut out = Vec::new();
    for n in 0..s.n {
        for co in 0..c.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c.c_in {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                                let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                                if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                    continue;
                                }
                                let xv = x[((n * s.c + ci) * s.h + iy as usize) * s.w + ix as usize];
                                let wv = c.weights[((co * c.c_in + ci) * c.k + ky) * c.k + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out.push(acc + c.bias[co]);
                }
            }
        }
    }
    Tensor::from_f32(TensorShape::new(s.n, c.c_out, oh, ow), out).unwrap()
}

/// FP32 forward pass that uses [`naive_conv`] for convolutions.
pub fn oracle_forward_fp32(graph: &ModelGraph, image: &Tensor) -> Tensor {
    let mut cur = image.clone();
    for layer in graph.layers() {
        cur = match &layer.spec {
            LayerSpec::Conv2d(c) => naive_conv(&cur, c),
            other => refexec::apply_layer(other, &cur).unwrap(),
        };
    }
    cur
}

fn round_half_even_div(num: i128, den: i128) -> i128 {
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    if 2 * r > den || (2 * r == den && q % 2 != 0) {
        q + 1
    } else {
        q
    }
}

fn rescale(v: i128, shift: i32) -> i128 {
    if shift >= 0 {
        round_half_even_div(v, 1i128 << shift)
    } else {
        v << (-shift).min(64)
    }
}

fn clamp8(v: i128) -> i8 {
    v.clamp(-128, 127) as i8
}

/// Scalar INT8 reference written straight from the arithmetic rules, with
/// wide integers throughout. Panics on accumulator overflow.
pub fn oracle_qforward(q: &QuantizedModel, image: &Tensor) -> Tensor {
    let scale = 2f32.powi(q.input_params.frac_bits);
    let mut shape = q.input_shape;
    let mut x: Vec<i8> = image
        .as_f32()
        .unwrap()
        .iter()
        .map(|&v| {
            let r = (v * scale).round_ties_even();
            r.clamp(-128.0, 127.0) as i8
        })
        .collect();
    for layer in &q.layers {
        let s = shape;
        let at = |c: usize, y: usize, xx: usize| x[(c * s.h + y) * s.w + xx] as i128;
        let (next_shape, next): (TensorShape, Vec<i8>) = match &layer.kind {
            QLayerKind::Conv {
                geometry: g,
                weights,
                bias,
                shift,
                fused_relu,
                ..
            } => {
                let oh = (s.h + 2 * g.pad - g.k) / g.stride + 1;
                let ow = (s.w + 2 * g.pad - g.k) / g.stride + 1;
                let mut out = Vec::new();
                for co in 0..g.c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: i128 = 0;
                            for ci in 0..g.c_in {
                                for ky in 0..g.k {
                                    for kx in 0..g.k {
                                        let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                                        let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                                        if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                            continue;
                                        }
                                        let w = weights[((co * g.c_in + ci) * g.k + ky) * g.k + kx] as i128;
                                        acc += w * at(ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                            acc += bias[co] as i128;
                            assert!(i32::try_from(acc).is_ok(), "accumulator overflow in {}", layer.id);
                            let mut v = clamp8(rescale(acc, *shift));
                            if fused_relu.is_some() {
                                v = v.max(0);
                            }
                            out.push(v);
                        }
                    }
                }
                (TensorShape::new(1, g.c_out, oh, ow), out)
            }
            QLayerKind::Dense {
                in_features,
                out_features,
                weights,
                bias,
                shift,
                ..
            } => {
                let out = (0..*out_features)
                    .map(|o| {
                        let mut acc: i128 = bias[o] as i128;
                        for i in 0..*in_features {
                            acc += weights[o * in_features + i] as i128 * x[i] as i128;
                        }
                        assert!(i32::try_from(acc).is_ok(), "accumulator overflow in {}", layer.id);
                        clamp8(rescale(acc, *shift))
                    })
                    .collect();
                (TensorShape::new(1, *out_features, 1, 1), out)
            }
            QLayerKind::Relu => (s, x.iter().map(|&v| v.max(0)).collect()),
            QLayerKind::MaxPool(PoolSpec { k, stride }) => {
                let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
                let mut out = Vec::new();
                for c in 0..s.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = i128::MIN;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    m = m.max(at(c, oy * stride + ky, ox * stride + kx));
                                }
                            }
                            out.push(m as i8);
                        }
                    }
                }
                (TensorShape::new(1, s.c, oh, ow), out)
            }
            QLayerKind::GlobalAvgPool => {
                let d = layer.output.frac_bits - layer.input.frac_bits;
                let hw = (s.h * s.w) as i128;
                let out = (0..s.c)
                    .map(|c| {
                        let sum: i128 = (0..s.h * s.w).map(|i| x[c * s.h * s.w + i] as i128).sum();
                        let v = if d >= 0 {
                            round_half_even_div(sum << d, hw)
                        } else {
                            round_half_even_div(sum, hw << -d)
                        };
                        clamp8(v)
                    })
                    .collect();
                (TensorShape::new(1, s.c, 1, 1), out)
            }
            QLayerKind::Softmax => {
                let step = 2f32.powi(-layer.input.frac_bits);
                let real = Tensor::from_f32(s, x.iter().map(|&v| v as f32 * step).collect()).unwrap();
                let p = refexec::softmax_fp32(&real).unwrap();
                let sc = 2f32.powi(layer.output.frac_bits);
                let out = p
                    .as_f32()
                    .unwrap()
                    .iter()
                    .map(|&v| (v * sc).round_ties_even().clamp(-128.0, 127.0) as i8)
                    .collect();
                (s, out)
            }
        };
        shape = next_shape;
        x = next;
    }
    Tensor::from_i8(shape, x).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32, n: usize) -> Vec<f32> {
    let d = Uniform::new_inclusive(lo, hi);
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn random_conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
    let bound = (1.0 / (c_in * k * k) as f32).sqrt() * 1.5;
    ConvSpec {
        k,
        stride,
        pad,
        c_in,
        c_out,
        weights: uniform(rng, -bound, bound, c_out * c_in * k * k),
        bias: uniform(rng, -0.1, 0.1, c_out),
    }
}

pub fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BatchNormSpec {
    BatchNormSpec {
        gamma: uniform(rng, 0.5, 1.5, c),
        beta: uniform(rng, -0.2, 0.2, c),
        mean: uniform(rng, -0.2, 0.2, c),
        var: uniform(rng, 0.5, 2.0, c),
        eps: 1e-5,
    }
}

/// Random linear chain with at most `max_layers` layers, at most 16 channels
/// and an input of at most 16x16. Convolutions may carry a batchnorm; the
/// chain ends in global pooling, a dense classifier and optionally softmax.
pub fn random_small_graph(seed: u64, max_layers: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.gen_range(1..=4);
    let hw = rng.gen_range(4..=16);
    let input = TensorShape::new(1, c0, hw, hw);
    let softmax = rng.gen_bool(0.3);
    let tail = 2 + softmax as usize;
    let body_budget = rng.gen_range(1..=max_layers - tail);
    let mut layers = Vec::new();
    let (mut c, mut h) = (c0, hw);
    let mut id = 0;
    let mut next_id = |p: &str| {
        id += 1;
        format!("{p}{id}")
    };
    while layers.len() < body_budget {
        let room = body_budget - layers.len();
        match rng.gen_range(0..4) {
            0 | 1 => {
                let k = [1, 3, 5][rng.gen_range(0..3)];
                let pad = rng.gen_range(0..=k / 2);
                let stride = if h >= 6 { rng.gen_range(1..=2) } else { 1 };
                if h + 2 * pad < k {
                    continue;
                }
                let c_out = rng.gen_range(1..=16);
                layers.push(Layer::new(
                    next_id("conv"),
                    LayerSpec::Conv2d(random_conv(&mut rng, c, c_out, k, stride, pad)),
                ));
                c = c_out;
                h = (h + 2 * pad - k) / stride + 1;
                if room >= 2 && rng.gen_bool(0.4) {
                    layers.push(Layer::new(next_id("bn"), LayerSpec::BatchNorm(random_bn(&mut rng, c))));
                }
                if layers.len() < body_budget && rng.gen_bool(0.6) {
                    layers.push(Layer::new(next_id("relu"), LayerSpec::Relu));
                }
            }
            2 if h >= 2 => {
                layers.push(Layer::new(
                    next_id("pool"),
                    LayerSpec::MaxPool(PoolSpec { k: 2, stride: 2 }),
                ));
                h = (h - 2) / 2 + 1;
            }
            _ => layers.push(Layer::new(next_id("relu"), LayerSpec::Relu)),
        }
    }
    layers.push(Layer::new(next_id("gap"), LayerSpec::GlobalAvgPool));
    let classes = rng.gen_range(2..=10);
    let bound = (1.0 / c as f32).sqrt();
    layers.push(Layer::new(
        next_id("fc"),
        LayerSpec::Dense(DenseSpec {
            in_features: c,
            out_features: classes,
            weights: uniform(&mut rng, -bound, bound, c * classes),
            bias: uniform(&mut rng, -0.1, 0.1, classes),
        }),
    ));
    if softmax {
        layers.push(Layer::new(next_id("softmax"), LayerSpec::Softmax));
    }
    ModelGraph::chain(input, layers).unwrap()
}

/// Folds, calibrates on `calib` seeded images and quantizes.
pub fn quantize_random(graph: &ModelGraph, calib: usize, seed: u64) -> (ModelGraph, QuantizedModel) {
    let folded = fold_batchnorm(graph).unwrap();
    let images = synthetic_images(calib, graph.input_shape(), seed);
    let table = calibrate(&folded, &CalibrationSet::new("random", images), 4).unwrap();
    (folded.clone(), quantize_model(&folded, &table).unwrap())
}

/// Seeded images with pixels in [-1, 1] so that negative codes are exercised.
pub fn signed_images(count: usize, shape: TensorShape, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::from_f32(shape, uniform(&mut rng, -1.0, 1.0, shape.numel())).unwrap())
        .collect()
}

/// Checks simulator output against qforward for `models` random models and
/// `images` images each. Returns the number of frames compared and the number
/// of models with at least one layer split over several tiles.
pub fn check_bit_exact(models: u64, images: usize) -> Result<(usize, usize), String> {
    use dpuflow::quant::qforward;
    use dpuflow::sim::simulate_frame;
    let mut frames = 0;
    let mut tiled = 0;
    for seed in 0..models {
        let graph = random_small_graph(seed, 10);
        let (_, q) = quantize_random(&graph, 8, seed + 1000);
        let mut target = TargetConfig::zcu104_dual_b4096();
        // Small buffers force channel and row tiling.
        target.buffer_bytes = [524_288, 2048, 768, 384][seed as usize % 4];
        let compiled = match compile(&q, &target) {
            Ok(c) => c,
            Err(dpuflow::compiler::CompileError::TileExceedsBuffer { .. }) => {
                target.buffer_bytes = 524_288;
                compile(&q, &target).map_err(|e| e.to_string())?
            }
            Err(e) => return Err(format!("model {seed}: {e}")),
        };
        tiled += compiled.layer_totals.iter().any(|t| t.tiles > 1) as usize;
        let loaded = load_model(compiled, &target).map_err(|e| e.to_string())?;
        for img in signed_images(images, graph.input_shape(), seed + 5000) {
            let want = qforward(&q, &img).map_err(|e| e.to_string())?.logits;
            let (got, _) = simulate_frame(&loaded, &img).map_err(|e| e.to_string())?;
            if got.as_i8().unwrap() != want.as_i8().unwrap() {
                return Err(format!(
                    "model {seed}: simulator {:?} vs qforward {:?}",
                    got.as_i8().unwrap(),
                    want.as_i8().unwrap()
                ));
            }
            frames += 1;
        }
    }
    Ok((frames, tiled))
}
