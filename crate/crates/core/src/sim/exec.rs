//! Interpreter for compiled instruction streams.
//!
//! Off-chip memory is modelled as one buffer per tensor-table entry. LOAD copies a
//! region into the on-chip slot selected by the tensor's role, compute ops work on
//! the slots, SAVE scatters the output slot back. Integer semantics follow the
//! quantizer exactly so outputs are bit-identical to `qforward`.

use std::sync::Arc;

use super::timing::{frame_trace, CycleTrace};
use super::{estimate_resources, ResourceReport, SimError, TargetConfig};
use crate::compiler::{verify_fingerprint, CompiledModel, Instruction, Opcode, TensorRole, Tile};
use crate::quant::{
    conv_accumulate, dot_i8, finish_acc, host_softmax_int8, quantize_tensor, requantize, round_div_half_even,
    saturate_i8, shift_round, QLayerKind, QuantError,
};
use crate::tensor::{Tensor, TensorData, TensorShape};

/// A compiled model accepted by a target.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Arc<CompiledModel>,
    pub target: TargetConfig,
    pub resources: ResourceReport,
    shapes: Vec<TensorShape>,
}

impl LoadedModel {
    pub fn model(&self) -> &CompiledModel {
        &self.model
    }

    /// Operations per frame on the accelerator.
    pub fn ops_per_frame(&self) -> u64 {
        self.model.op_totals().total()
    }

    pub fn bytes_per_frame(&self) -> u64 {
        self.model.bytes_per_frame()
    }
}

/// Checks the fingerprint, then the resource budget.
pub fn load_model(compiled: impl Into<Arc<CompiledModel>>, target: &TargetConfig) -> Result<LoadedModel, SimError> {
    let model = compiled.into();
    target.validate()?;
    verify_fingerprint(&model, target)?;
    let resources = estimate_resources(target);
    if !resources.pass {
        return Err(SimError::Resources(Box::new(resources)));
    }
    let shapes = model.shapes();
    Ok(LoadedModel {
        model,
        target: target.clone(),
        resources,
        shapes,
    })
}

#[derive(Default)]
struct Slots {
    input: Vec<i8>,
    weights: Vec<i8>,
    bias: Vec<i32>,
    output: Vec<i8>,
}

fn gather<T: Copy>(src: &[T], r: &crate::compiler::Region) -> Vec<T> {
    r.indices().map(|i| src[i]).collect()
}

/// Runs one frame: INT8 output plus its single-stream cycle trace.
pub fn simulate_frame(handle: &LoadedModel, image: &Tensor) -> Result<(Tensor, CycleTrace), SimError> {
    let out = execute(handle, image)?;
    let trace = frame_trace(&handle.model.layer_totals, &handle.target, 1, 0.0)?;
    Ok((out, trace))
}

/// Numeric part of [`simulate_frame`].
pub fn execute(handle: &LoadedModel, image: &Tensor) -> Result<Tensor, SimError> {
    let m = &*handle.model;
    if image.shape() != m.input_shape {
        return Err(SimError::Exec(format!(
            "image has shape {}, model expects {}",
            image.shape(),
            m.input_shape
        )));
    }
    let mut ddr: Vec<TensorData> = m
        .tensors
        .iter()
        .map(|t| match t.role {
            TensorRole::Bias => TensorData::Int32(Vec::new()),
            _ => TensorData::Int8(Vec::new()),
        })
        .collect();
    // Parameters live in the weight and bias tensors; activations start zeroed.
    for (i, t) in m.tensors.iter().enumerate() {
        if t.role == TensorRole::Activation {
            ddr[i] = TensorData::Int8(vec![0; t.shape.numel()]);
        }
    }
    for l in &m.layers {
        let (w, b) = match &l.kind {
            QLayerKind::Conv { weights, bias, .. } | QLayerKind::Dense { weights, bias, .. } => (weights, bias),
            _ => continue,
        };
        for (role, data) in [
            ("weight", TensorData::Int8(w.clone())),
            ("bias", TensorData::Int32(b.clone())),
        ] {
            let name = format!("{}.{role}", l.id);
            let idx = m
                .tensors
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| SimError::Exec(format!("tensor table has no `{name}`")))?;
            ddr[idx] = data;
        }
    }
    let q = quantize_tensor(image, m.input_params)?;
    ddr[crate::compiler::INPUT_TENSOR_ID] = q.tensor.into_data();

    let mut slots = Slots::default();
    for ins in &m.accelerator().instructions {
        step(m, &handle.shapes, &mut ddr, &mut slots, ins)?;
    }

    let out_id = m.accelerator_output();
    let TensorData::Int8(data) = std::mem::replace(&mut ddr[out_id], TensorData::Int8(Vec::new())) else {
        return Err(SimError::Exec("accelerator output is not int8".into()));
    };
    let mut out = Tensor::from_i8(m.tensors[out_id].shape, data).map_err(QuantError::from)?;
    for &i in &m.host_tail {
        let l = &m.layers[i];
        match l.kind {
            QLayerKind::Softmax => out = host_softmax_int8(&out, l.input, l.output)?.0,
            _ => return Err(SimError::Exec(format!("layer `{}` cannot run on the host", l.id))),
        }
    }
    Ok(out)
}

fn step(
    m: &CompiledModel,
    shapes: &[TensorShape],
    ddr: &mut [TensorData],
    slots: &mut Slots,
    ins: &Instruction,
) -> Result<(), SimError> {
    let layer = &m.layers[ins.layer];
    let in_shape = if ins.layer == 0 {
        m.input_shape
    } else {
        shapes[ins.layer - 1]
    };
    let out_shape = shapes[ins.layer];
    let missing = |what: &str| SimError::Exec(format!("{} for layer `{}` without {what}", ins.opcode, layer.id));
    match ins.opcode {
        Opcode::Load => {
            let r = ins.region.ok_or_else(|| missing("a region"))?;
            match (&ddr[r.tensor], m.tensors[r.tensor].role) {
                (TensorData::Int8(v), TensorRole::Input | TensorRole::Activation) => slots.input = gather(v, &r),
                (TensorData::Int8(v), TensorRole::Weight) => slots.weights = gather(v, &r),
                (TensorData::Int32(v), TensorRole::Bias) => slots.bias = gather(v, &r),
                _ => {
                    return Err(SimError::Exec(format!(
                        "LOAD of `{}` has the wrong type",
                        m.tensors[r.tensor].name
                    )))
                }
            }
        }
        Opcode::Save => {
            let r = ins.region.ok_or_else(|| missing("a region"))?;
            let TensorData::Int8(dst) = &mut ddr[r.tensor] else {
                return Err(SimError::Exec("SAVE into a non-int8 tensor".into()));
            };
            if slots.output.len() != r.elements() {
                return Err(SimError::Exec(format!(
                    "SAVE of {} elements from a {}-element output slot",
                    r.elements(),
                    slots.output.len()
                )));
            }
            for (i, v) in r.indices().zip(slots.output.iter()) {
                dst[i] = *v;
            }
        }
        Opcode::Conv | Opcode::Pool | Opcode::Eltwise => {
            let tile = ins.tile.ok_or_else(|| missing("a tile"))?;
            slots.output = compute(layer, &tile, ins, in_shape, out_shape, slots)?;
        }
    }
    Ok(())
}

fn compute(
    layer: &crate::quant::QLayer,
    t: &Tile,
    ins: &Instruction,
    ins_shape: TensorShape,
    outs: TensorShape,
    s: &Slots,
) -> Result<Vec<i8>, SimError> {
    let overflow = || {
        SimError::Quant(QuantError::AccumulatorOverflow {
            layer: layer.id.clone(),
        })
    };
    let mut out = Vec::new();
    match &layer.kind {
        QLayerKind::Conv { geometry: g, .. } => {
            let kk = g.k * g.k;
            let mut acc = vec![0i64; (t.y1 - t.y0) * outs.w];
            for co in t.c0..t.c1 {
                let w_co = &s.weights[(co - t.c0) * g.c_in * kk..(co - t.c0 + 1) * g.c_in * kk];
                conv_accumulate(
                    &mut acc,
                    g,
                    w_co,
                    &s.input,
                    ins_shape.h,
                    ins_shape.w,
                    t.in_y0,
                    t.y0..t.y1,
                    outs.w,
                );
                for &a in &acc {
                    let a = finish_acc(a, s.bias[co - t.c0]).ok_or_else(overflow)?;
                    let (mut v, _) = requantize(a, ins.shift);
                    if ins.fused_relu {
                        v = v.max(0);
                    }
                    out.push(v);
                }
            }
        }
        QLayerKind::Dense { in_features, .. } => {
            for o in t.c0..t.c1 {
                let row = &s.weights[(o - t.c0) * in_features..(o - t.c0 + 1) * in_features];
                let acc = finish_acc(dot_i8(row, &s.input), s.bias[o - t.c0]).ok_or_else(overflow)?;
                out.push(requantize(acc, ins.shift).0);
            }
        }
        QLayerKind::MaxPool(p) => {
            let (h, w) = (ins_shape.h, ins_shape.w);
            for c in 0..t.c1 - t.c0 {
                let plane = &s.input[c * h * w..(c + 1) * h * w];
                for oy in 0..outs.h {
                    for ox in 0..outs.w {
                        let mut m = i8::MIN;
                        for ky in 0..p.k {
                            for kx in 0..p.k {
                                m = m.max(plane[(oy * p.stride + ky) * w + ox * p.stride + kx]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
        QLayerKind::GlobalAvgPool => {
            let hw = ins_shape.h * ins_shape.w;
            let d = layer.output.frac_bits - layer.input.frac_bits;
            for plane in s.input.chunks(hw) {
                let sum: i64 = plane.iter().map(|&v| v as i64).sum();
                let v = if d >= 0 {
                    round_div_half_even(shift_round(sum, -d), hw as i64)
                } else if -d >= 40 {
                    0
                } else {
                    round_div_half_even(sum, (hw as i64) << -d)
                };
                out.push(saturate_i8(v).0);
            }
        }
        QLayerKind::Relu => out.extend(s.input.iter().map(|&v| v.max(0))),
        QLayerKind::Softmax => {
            return Err(SimError::Exec(format!(
                "softmax `{}` reached the accelerator",
                layer.id
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, fold_batchnorm};
    use crate::graph::{ConvSpec, Layer, LayerSpec, ModelGraph};
    use crate::models::{init_graph, synthetic_images, test8};
    use crate::quant::{calibrate, qforward, quantize_model, CalibrationSet};

    #[test]
    fn matches_qforward_on_test8_with_and_without_tiling() {
        let g = fold_batchnorm(&init_graph(&test8(), 11).unwrap()).unwrap();
        let imgs = synthetic_images(6, g.input_shape(), 11);
        let t = calibrate(&g, &CalibrationSet::new("s", imgs.clone()), 3).unwrap();
        let q = quantize_model(&g, &t).unwrap();
        for buffer in [512 * 1024, 3000] {
            let mut target = TargetConfig::zcu104_dual_b4096();
            target.buffer_bytes = buffer;
            let h = load_model(compile(&q, &target).unwrap(), &target).unwrap();
            for img in &imgs {
                let (out, trace) = simulate_frame(&h, img).unwrap();
                assert_eq!(out, qforward(&q, img).unwrap().logits);
                assert!(trace.total_cycles > 0);
            }
        }
    }

    #[test]
    fn identity_conv_returns_quantized_input() {
        let c = 2;
        let mut weights = vec![0.0; c * c];
        weights[0] = 1.0;
        weights[3] = 1.0;
        let g = ModelGraph::chain(
            TensorShape::new(1, c, 3, 3),
            vec![Layer::new(
                "id",
                LayerSpec::Conv2d(ConvSpec {
                    k: 1,
                    stride: 1,
                    pad: 0,
                    c_in: c,
                    c_out: c,
                    weights,
                    bias: vec![0.0; c],
                }),
            )],
        )
        .unwrap();
        let imgs = synthetic_images(2, g.input_shape(), 0);
        let t = calibrate(&g, &CalibrationSet::new("s", imgs.clone()), 1).unwrap();
        let q = quantize_model(&g, &t).unwrap();
        let target = TargetConfig::zcu104_dual_b4096();
        let h = load_model(compile(&q, &target).unwrap(), &target).unwrap();
        let (out, _) = simulate_frame(&h, &imgs[0]).unwrap();
        let expect = quantize_tensor(&imgs[0], q.input_params).unwrap().tensor;
        assert_eq!(out.as_i8().unwrap(), expect.as_i8().unwrap());
    }
}
