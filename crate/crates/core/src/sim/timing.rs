//! Roofline timing: each layer takes `max(compute, memory)` cycles, layers run back to back.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{SimError, TargetConfig};
use crate::compiler::LayerTotals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
}

impl Bound {
    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub compute: u64,
    pub memory: u64,
    pub bound: Bound,
}

impl LayerCycles {
    fn new(compute: u64, memory: u64) -> Self {
        let bound = if compute >= memory {
            Bound::Compute
        } else {
            Bound::Memory
        };
        Self { compute, memory, bound }
    }

    pub fn cycles(&self) -> u64 {
        self.compute.max(self.memory)
    }
}

/// Per-stream bandwidth in MB/s: an even split, degraded by `1 / (1 + kappa * max(0, s - cores))`.
pub fn arbitrate_bandwidth(active_streams: usize, target: &TargetConfig, kappa: f64) -> Result<f64, SimError> {
    if active_streams == 0 {
        return Err(SimError::NoActiveStreams);
    }
    let excess = active_streams.saturating_sub(target.cores as usize) as f64;
    Ok(target.bandwidth_mbps / active_streams as f64 / (1.0 + kappa.max(0.0) * excess))
}

/// MB/s divided by MHz is bytes per cycle.
pub fn bytes_per_cycle(bandwidth_mbps: f64, clock_mhz: u32) -> f64 {
    bandwidth_mbps / clock_mhz as f64
}

/// Compute share of a core seen by one stream: streams beyond the core count time-share.
fn share(active_streams: usize, cores: u32) -> (u128, u128) {
    let c = cores as u128;
    ((active_streams as u128).max(c), c)
}

/// Cycles for one layer when `active_streams` frames are in flight on `target`.
///
/// `compute = ceil(ops * max(s, C) / (C * peak))`, which is `ceil(ops / peak)` while
/// streams do not outnumber cores; `memory = ceil(bytes / bytes_per_cycle)` at the
/// stream's arbitrated bandwidth.
pub fn layer_cycles_shared(
    ops: u64,
    bytes: u64,
    bandwidth_mbps: f64,
    active_streams: usize,
    target: &TargetConfig,
) -> Result<LayerCycles, SimError> {
    if !(bandwidth_mbps > 0.0) {
        return Err(SimError::ZeroBandwidth);
    }
    let (num, den) = share(active_streams.max(1), target.cores);
    let compute = (ops as u128 * num).div_ceil(den * target.peak_ops_per_cycle() as u128) as u64;
    let memory = (bytes as f64 / bytes_per_cycle(bandwidth_mbps, target.clock_mhz)).ceil() as u64;
    Ok(LayerCycles::new(compute, memory))
}

/// Single-stream layer timing at `bandwidth_mbps`.
pub fn layer_cycles(ops: u64, bytes: u64, bandwidth_mbps: f64, target: &TargetConfig) -> Result<LayerCycles, SimError> {
    layer_cycles_shared(ops, bytes, bandwidth_mbps, 1, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub layer: String,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub bound: Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub layers: Vec<LayerTiming>,
    pub total_cycles: u64,
    /// Core the frame ran on.
    pub core: usize,
}

impl CycleTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,compute_cycles,memory_cycles,bound\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                l.layer,
                l.compute_cycles,
                l.memory_cycles,
                l.bound.as_str()
            );
        }
        s
    }
}

/// Frame timing from per-layer totals with `active_streams` sharing the target.
pub fn frame_trace(
    totals: &[LayerTotals],
    target: &TargetConfig,
    active_streams: usize,
    kappa: f64,
) -> Result<CycleTrace, SimError> {
    let bw = arbitrate_bandwidth(active_streams, target, kappa)?;
    let mut layers = Vec::with_capacity(totals.len());
    let mut total = 0;
    for t in totals {
        let c = layer_cycles_shared(t.ops.total(), t.bytes, bw, active_streams, target)?;
        total += c.cycles();
        layers.push(LayerTiming {
            layer: t.layer.clone(),
            compute_cycles: c.compute,
            memory_cycles: c.memory,
            bound: c.bound,
        });
    }
    Ok(CycleTrace {
        layers,
        total_cycles: total,
        core: 0,
    })
}

/// Frame-level cost used instead of per-layer totals when a scenario fixes the
/// per-frame core time and memory traffic directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameProfile {
    /// Seconds of exclusive core time per frame.
    pub core_time_s: f64,
    pub bytes_per_frame: f64,
}

impl FrameProfile {
    pub fn cycles(&self, target: &TargetConfig, active_streams: usize, kappa: f64) -> Result<LayerCycles, SimError> {
        let bw = arbitrate_bandwidth(active_streams, target, kappa)?;
        let (num, den) = share(active_streams.max(1), target.cores);
        let compute = (self.core_time_s * target.clock_hz() * num as f64 / den as f64).ceil() as u64;
        let memory = (self.bytes_per_frame / bytes_per_cycle(bw, target.clock_mhz)).ceil() as u64;
        Ok(LayerCycles::new(compute, memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> TargetConfig {
        TargetConfig::zcu104_dual_b4096()
    }

    #[test]
    fn compute_cycle_examples() {
        assert_eq!(layer_cycles(884_736, 0, 2041.91, &t()).unwrap().compute, 216);
        assert_eq!(layer_cycles(4096, 0, 2041.91, &t()).unwrap().compute, 1);
        let c = layer_cycles(10, 1 << 20, 2041.91, &t()).unwrap();
        assert_eq!(c.bound, Bound::Memory);
        assert!(matches!(layer_cycles(1, 1, 0.0, &t()), Err(SimError::ZeroBandwidth)));
    }

    #[test]
    fn arbiter_examples() {
        assert_eq!(arbitrate_bandwidth(1, &t(), 0.3).unwrap(), 2041.91);
        assert_eq!(arbitrate_bandwidth(2, &t(), 0.0).unwrap(), 1020.955);
        let three = arbitrate_bandwidth(3, &t(), 0.1).unwrap();
        assert!(3.0 * three < 2041.91);
        assert!(arbitrate_bandwidth(0, &t(), 0.0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let totals = vec![LayerTotals {
            layer: "c".into(),
            ops: crate::graph::OpCounts {
                conv: 8192,
                ..Default::default()
            },
            bytes: 7,
            tiles: 1,
        }];
        let tr = frame_trace(&totals, &t(), 1, 0.0).unwrap();
        assert_eq!(tr.total_cycles, 2);
        assert_eq!(tr.to_csv(), "layer,compute_cycles,memory_cycles,bound\nc,2,2,compute\n");
    }
}
