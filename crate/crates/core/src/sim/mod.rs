//! Cycle-approximate DPU simulator.

mod exec;
mod resources;
mod target;
mod timing;

use thiserror::Error;

use crate::compiler::CompileError;
use crate::container::ContainerError;
use crate::quant::QuantError;

pub use exec::{execute, load_model, simulate_frame, LoadedModel};
pub use resources::{estimate_resources, ResourceReport, ResourceUsage};
pub use target::{default_supported_ops, Arch, DeviceBudget, ResourceCost, TargetConfig};
pub use timing::{
    arbitrate_bandwidth, bytes_per_cycle, frame_trace, layer_cycles, layer_cycles_shared, Bound, CycleTrace,
    FrameProfile, LayerCycles, LayerTiming,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("allocated bandwidth is zero")]
    ZeroBandwidth,
    #[error("bandwidth arbitration needs at least one active stream")]
    NoActiveStreams,
    #[error("insufficient FPGA resources:\n{0}")]
    Resources(Box<ResourceReport>),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("execution error: {0}")]
    Exec(String),
}

impl SimError {
    pub fn is_fingerprint_mismatch(&self) -> bool {
        matches!(self, SimError::Compile(CompileError::FingerprintMismatch { .. }))
    }
}
