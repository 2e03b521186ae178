//! Output-stationary tiling and instruction emission.
//!
//! Convolutions are cut into output-channel groups times output-row bands.
//! For each channel group the weights and bias are loaded once; each row band
//! then loads the input rows it needs (halo included), computes, and saves.
//! Dense layers tile over output neurons, pools and element-wise layers over
//! channel groups. The tile choice minimises bytes moved subject to the tile
//! working set fitting the on-chip buffer.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::CompileError;
use crate::graph::{ConvGeometry, OpCounts};
use crate::quant::{QLayer, QLayerKind};
use crate::tensor::{DType, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Opcode {
    Load,
    Conv,
    Pool,
    Eltwise,
    Save,
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Opcode::Load => "LOAD",
            Opcode::Conv => "CONV",
            Opcode::Pool => "POOL",
            Opcode::Eltwise => "ELTWISE",
            Opcode::Save => "SAVE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Input,
    Activation,
    Weight,
    Bias,
}

/// Entry of the compiled model's tensor table (model-space address book).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub role: TensorRole,
    pub dtype: DType,
    pub shape: TensorShape,
}

impl TensorInfo {
    pub fn bytes(&self) -> usize {
        self.shape.numel() * self.dtype.size_bytes()
    }
}

/// `count` runs of `len` elements of `tensor`, starting at `offset`, `stride` elements apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub tensor: usize,
    pub offset: usize,
    pub count: usize,
    pub len: usize,
    pub stride: usize,
}

impl Region {
    pub fn elements(&self) -> usize {
        self.count * self.len
    }

    fn contiguous(tensor: usize, offset: usize, len: usize) -> Self {
        Self {
            tensor,
            offset,
            count: 1,
            len,
            stride: len,
        }
    }

    /// Element indices covered, in buffer order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).flat_map(move |i| {
            let start = self.offset + i * self.stride;
            start..start + self.len
        })
    }
}

/// Output channels `c0..c1` and output rows `y0..y1`, computed from input rows `in_y0..in_y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub c0: usize,
    pub c1: usize,
    pub y0: usize,
    pub y1: usize,
    pub in_y0: usize,
    pub in_y1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    /// Index into the compiled model's layer list.
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<Tile>,
    /// Source of a LOAD, destination of a SAVE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default)]
    pub fused_relu: bool,
    #[serde(default)]
    pub shift: i32,
    #[serde(default)]
    pub ops: OpCounts,
    #[serde(default)]
    pub bytes: u64,
}

impl Instruction {
    fn new(opcode: Opcode, layer: usize) -> Self {
        Self {
            opcode,
            layer,
            tile: None,
            region: None,
            fused_relu: false,
            shift: 0,
            ops: OpCounts::default(),
            bytes: 0,
        }
    }

    fn transfer(opcode: Opcode, layer: usize, region: Region, dtype: DType) -> Self {
        Self {
            region: Some(region),
            bytes: (region.elements() * dtype.size_bytes()) as u64,
            ..Self::new(opcode, layer)
        }
    }

    /// One line of the human-readable listing.
    pub fn listing(&self, layer_id: &str, tensors: &[TensorInfo]) -> String {
        let mut s = format!("{:<8} {:<14}", self.opcode.to_string(), layer_id);
        if let Some(t) = self.tile {
            s.push_str(&format!(
                " tile c[{}..{}) y[{}..{}) in_y[{}..{})",
                t.c0, t.c1, t.y0, t.y1, t.in_y0, t.in_y1
            ));
        }
        if let Some(r) = self.region {
            let name = tensors.get(r.tensor).map(|t| t.name.as_str()).unwrap_or("?");
            s.push_str(&format!(
                " {name}@{} {}x{} stride {} ({} B)",
                r.offset, r.count, r.len, r.stride, self.bytes
            ));
        }
        if matches!(self.opcode, Opcode::Conv) {
            s.push_str(&format!(" shift {}", self.shift));
            if self.fused_relu {
                s.push_str(" +relu");
            }
        }
        if self.ops.total() > 0 {
            s.push_str(&format!(" ops {}", self.ops.total()));
        }
        s
    }
}

/// Per-layer totals consumed by the roofline timing model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTotals {
    pub layer: String,
    pub ops: OpCounts,
    pub bytes: u64,
    pub tiles: usize,
}

/// Tensor ids a layer reads and writes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerTensors {
    pub input: usize,
    pub output: usize,
    pub weight: Option<usize>,
    pub bias: Option<usize>,
}

/// Emits the instruction stream of one layer.
pub(crate) fn lower_layer(
    index: usize,
    layer: &QLayer,
    in_shape: TensorShape,
    out_shape: TensorShape,
    t: LayerTensors,
    buffer_bytes: usize,
) -> Result<Vec<Instruction>, CompileError> {
    match &layer.kind {
        QLayerKind::Conv {
            geometry,
            shift,
            fused_relu,
            ..
        } => lower_conv(
            index,
            layer,
            *geometry,
            *shift,
            fused_relu.is_some(),
            in_shape,
            out_shape,
            t,
            buffer_bytes,
        ),
        QLayerKind::Dense {
            in_features,
            out_features,
            shift,
            ..
        } => lower_dense(index, layer, *in_features, *out_features, *shift, t, buffer_bytes),
        QLayerKind::MaxPool(_) | QLayerKind::GlobalAvgPool => {
            lower_channelwise(index, layer, Opcode::Pool, in_shape, out_shape, t, buffer_bytes)
        }
        QLayerKind::Relu => lower_channelwise(index, layer, Opcode::Eltwise, in_shape, out_shape, t, buffer_bytes),
        QLayerKind::Softmax => Err(CompileError::InvalidModel(format!(
            "layer `{}`: softmax is host-only and cannot be lowered",
            layer.id
        ))),
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Input rows needed for output rows `y0..y1`.
fn input_rows(g: &ConvGeometry, h: usize, y0: usize, y1: usize) -> (usize, usize) {
    let lo = (y0 * g.stride) as isize - g.pad as isize;
    let hi = ((y1 - 1) * g.stride + g.k) as isize - g.pad as isize;
    (lo.max(0) as usize, (hi.min(h as isize)).max(0) as usize)
}

#[allow(clippy::too_many_arguments)]
fn lower_conv(
    index: usize,
    layer: &QLayer,
    g: ConvGeometry,
    shift: i32,
    fused_relu: bool,
    ins: TensorShape,
    outs: TensorShape,
    t: LayerTensors,
    buffer: usize,
) -> Result<Vec<Instruction>, CompileError> {
    let (h, w, ho, wo) = (ins.h, ins.w, outs.h, outs.w);
    let wlen = g.c_in * g.k * g.k;
    // Largest input band needed by any row tile of `rt` rows.
    let band = |rt: usize| -> usize {
        (0..ho)
            .step_by(rt)
            .map(|y0| {
                let (a, b) = input_rows(&g, h, y0, (y0 + rt).min(ho));
                b - a
            })
            .max()
            .unwrap_or(0)
    };
    let moved = |ct: usize, rt: usize| -> usize {
        let nc = ceil_div(g.c_out, ct);
        let in_total: usize = (0..ho)
            .step_by(rt)
            .map(|y0| {
                let (a, b) = input_rows(&g, h, y0, (y0 + rt).min(ho));
                (b - a) * w * g.c_in
            })
            .sum();
        g.c_out * wlen + 4 * g.c_out + nc * in_total + g.c_out * ho * wo
    };

    let mut best: Option<(usize, usize, usize, usize)> = None;
    let mut smallest = usize::MAX;
    let mut last_ct = 0;
    for nc in 1..=g.c_out {
        let ct = ceil_div(g.c_out, nc);
        if ct == last_ct {
            continue;
        }
        last_ct = ct;
        let mut last_rt = 0;
        for nr in 1..=ho {
            let rt = ceil_div(ho, nr);
            if rt == last_rt {
                continue;
            }
            last_rt = rt;
            let need = ct * wlen + 4 * ct + g.c_in * band(rt) * w + ct * rt * wo;
            smallest = smallest.min(need);
            if need > buffer {
                continue;
            }
            let m = moved(ct, rt);
            let tiles = ceil_div(g.c_out, ct) * ceil_div(ho, rt);
            let better = match best {
                None => true,
                Some((bm, bt, _, _)) => (m, tiles) < (bm, bt),
            };
            if better {
                best = Some((m, tiles, ct, rt));
            }
            // larger row tiles were tried first; once one fits, smaller ones only add halo traffic
            break;
        }
    }
    let Some((_, _, ct, rt)) = best else {
        return Err(CompileError::TileExceedsBuffer {
            layer: layer.id.clone(),
            needed: smallest,
            buffer,
        });
    };

    let weight = t.weight.expect("conv layers have weights");
    let bias = t.bias.expect("conv layers have a bias");
    let mut out = Vec::new();
    for c0 in (0..g.c_out).step_by(ct) {
        let c1 = (c0 + ct).min(g.c_out);
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(weight, c0 * wlen, (c1 - c0) * wlen),
            DType::Int8,
        ));
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(bias, c0, c1 - c0),
            DType::Int32,
        ));
        for y0 in (0..ho).step_by(rt) {
            let y1 = (y0 + rt).min(ho);
            let (in_y0, in_y1) = input_rows(&g, h, y0, y1);
            let tile = Tile {
                c0,
                c1,
                y0,
                y1,
                in_y0,
                in_y1,
            };
            out.push(Instruction::transfer(
                Opcode::Load,
                index,
                Region {
                    tensor: t.input,
                    offset: in_y0 * w,
                    count: g.c_in,
                    len: (in_y1 - in_y0) * w,
                    stride: h * w,
                },
                DType::Int8,
            ));
            let outputs = ((c1 - c0) * (y1 - y0) * wo) as u64;
            out.push(Instruction {
                tile: Some(tile),
                fused_relu,
                shift,
                ops: OpCounts {
                    conv: 2 * wlen as u64 * outputs,
                    eltwise: if fused_relu { outputs } else { 0 },
                    ..OpCounts::default()
                },
                ..Instruction::new(Opcode::Conv, index)
            });
            out.push(Instruction::transfer(
                Opcode::Save,
                index,
                Region {
                    tensor: t.output,
                    offset: c0 * ho * wo + y0 * wo,
                    count: c1 - c0,
                    len: (y1 - y0) * wo,
                    stride: ho * wo,
                },
                DType::Int8,
            ));
        }
    }
    Ok(out)
}

fn lower_dense(
    index: usize,
    layer: &QLayer,
    inf: usize,
    outf: usize,
    shift: i32,
    t: LayerTensors,
    buffer: usize,
) -> Result<Vec<Instruction>, CompileError> {
    let need = |ct: usize| ct * inf + 4 * ct + inf + ct;
    let Some(ct) = (1..=outf).map(|nc| ceil_div(outf, nc)).find(|&ct| need(ct) <= buffer) else {
        return Err(CompileError::TileExceedsBuffer {
            layer: layer.id.clone(),
            needed: need(1),
            buffer,
        });
    };
    let weight = t.weight.expect("dense layers have weights");
    let bias = t.bias.expect("dense layers have a bias");
    let mut out = Vec::new();
    for c0 in (0..outf).step_by(ct) {
        let c1 = (c0 + ct).min(outf);
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(weight, c0 * inf, (c1 - c0) * inf),
            DType::Int8,
        ));
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(bias, c0, c1 - c0),
            DType::Int32,
        ));
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(t.input, 0, inf),
            DType::Int8,
        ));
        out.push(Instruction {
            tile: Some(Tile {
                c0,
                c1,
                y0: 0,
                y1: 1,
                in_y0: 0,
                in_y1: 1,
            }),
            shift,
            ops: OpCounts {
                dense: 2 * (inf * (c1 - c0)) as u64,
                ..OpCounts::default()
            },
            ..Instruction::new(Opcode::Conv, index)
        });
        out.push(Instruction::transfer(
            Opcode::Save,
            index,
            Region::contiguous(t.output, c0, c1 - c0),
            DType::Int8,
        ));
    }
    Ok(out)
}

fn lower_channelwise(
    index: usize,
    layer: &QLayer,
    opcode: Opcode,
    ins: TensorShape,
    outs: TensorShape,
    t: LayerTensors,
    buffer: usize,
) -> Result<Vec<Instruction>, CompileError> {
    let (ip, op) = (ins.h * ins.w, outs.h * outs.w);
    let per_channel = ip + op;
    let cg = (buffer / per_channel).min(ins.c);
    if cg == 0 {
        return Err(CompileError::TileExceedsBuffer {
            layer: layer.id.clone(),
            needed: per_channel,
            buffer,
        });
    }
    let mut out = Vec::new();
    for c0 in (0..ins.c).step_by(cg) {
        let c1 = (c0 + cg).min(ins.c);
        out.push(Instruction::transfer(
            Opcode::Load,
            index,
            Region::contiguous(t.input, c0 * ip, (c1 - c0) * ip),
            DType::Int8,
        ));
        out.push(Instruction {
            tile: Some(Tile {
                c0,
                c1,
                y0: 0,
                y1: outs.h,
                in_y0: 0,
                in_y1: ins.h,
            }),
            ops: OpCounts {
                eltwise: ((c1 - c0) * ip) as u64,
                ..OpCounts::default()
            },
            ..Instruction::new(opcode, index)
        });
        out.push(Instruction::transfer(
            Opcode::Save,
            index,
            Region::contiguous(t.output, c0 * op, (c1 - c0) * op),
            DType::Int8,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_rows_cover_halo() {
        let g = ConvGeometry {
            k: 3,
            stride: 1,
            pad: 1,
            c_in: 1,
            c_out: 1,
        };
        assert_eq!(input_rows(&g, 8, 0, 8), (0, 8));
        assert_eq!(input_rows(&g, 8, 2, 4), (1, 5));
        let g2 = ConvGeometry { stride: 2, ..g };
        // output rows 1..3 read input rows 1..6
        assert_eq!(input_rows(&g2, 8, 1, 3), (1, 6));
    }

    #[test]
    fn region_indices() {
        let r = Region {
            tensor: 0,
            offset: 2,
            count: 2,
            len: 3,
            stride: 10,
        };
        assert_eq!(r.indices().collect::<Vec<_>>(), [2, 3, 4, 12, 13, 14]);
    }
}
