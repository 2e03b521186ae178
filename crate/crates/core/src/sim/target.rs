use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::container;

/// DPU architecture size. The numeral is the peak operations per clock cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    B512,
    B800,
    B1024,
    B1152,
    B1600,
    B2304,
    B3136,
    B4096,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::B512,
        Arch::B800,
        Arch::B1024,
        Arch::B1152,
        Arch::B1600,
        Arch::B2304,
        Arch::B3136,
        Arch::B4096,
    ];

    pub fn peak_ops_per_cycle(self) -> u64 {
        match self {
            Arch::B512 => 512,
            Arch::B800 => 800,
            Arch::B1024 => 1024,
            Arch::B1152 => 1152,
            Arch::B1600 => 1600,
            Arch::B2304 => 2304,
            Arch::B3136 => 3136,
            Arch::B4096 => 4096,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.peak_ops_per_cycle())
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Arch::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown architecture `{s}`"))
    }
}

/// FPGA resource totals. Defaults are the ZCU104 figures implied by the
/// dual-B4096 utilisation table (e.g. 1420 DSP at 82.18% -> 1728).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceBudget {
    pub dsp_total: u64,
    pub bram_total: u64,
    pub ff_total: u64,
    pub lut_total: u64,
}

impl Default for DeviceBudget {
    fn default() -> Self {
        Self {
            dsp_total: 1728,
            bram_total: 312,
            ff_total: 460_800,
            lut_total: 230_400,
        }
    }
}

/// Resource cost of a dual-core B4096 build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCost {
    pub dsp: u64,
    pub bram: u64,
    pub ff: u64,
    pub lut: u64,
}

impl Default for ResourceCost {
    fn default() -> Self {
        Self {
            dsp: 1420,
            bram: 210,
            ff: 198_725,
            lut: 105_845,
        }
    }
}

fn default_clock() -> u32 {
    300
}
fn default_bandwidth() -> f64 {
    2041.91
}
fn default_power() -> f64 {
    60.0
}
fn default_buffer() -> usize {
    512 * 1024
}
fn default_isa() -> u32 {
    1
}

pub fn default_supported_ops() -> BTreeSet<String> {
    ["conv2d", "relu", "maxpool", "globalavgpool", "dense", "eltwise"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub arch: Arch,
    pub cores: u32,
    #[serde(default = "default_clock")]
    pub clock_mhz: u32,
    #[serde(default)]
    pub device: DeviceBudget,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
    #[serde(default = "default_power")]
    pub power_w: f64,
    #[serde(default = "default_supported_ops")]
    pub supported_ops: BTreeSet<String>,
    /// On-chip buffer per core.
    #[serde(default = "default_buffer")]
    pub buffer_bytes: usize,
    #[serde(default = "default_isa")]
    pub isa_version: u32,
    #[serde(default)]
    pub dual_core_cost: ResourceCost,
    /// Replaces the linear `peak / 4096` cost scaling for smaller architectures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_cost_scale: Option<f64>,
}

impl TargetConfig {
    pub fn new(arch: Arch, cores: u32) -> Self {
        Self {
            name: None,
            arch,
            cores,
            clock_mhz: default_clock(),
            device: DeviceBudget::default(),
            bandwidth_mbps: default_bandwidth(),
            power_w: default_power(),
            supported_ops: default_supported_ops(),
            buffer_bytes: default_buffer(),
            isa_version: default_isa(),
            dual_core_cost: ResourceCost::default(),
            arch_cost_scale: None,
        }
    }

    /// ZCU104 with two B4096 cores at 300 MHz.
    pub fn zcu104_dual_b4096() -> Self {
        Self {
            name: Some("zcu104_dual_b4096".into()),
            ..Self::new(Arch::B4096, 2)
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let t: TargetConfig = container::read_json(path)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        Ok(container::write_json(path, self)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidTarget(m));
        if !(1..=4).contains(&self.cores) {
            return bad(format!("cores must be in 1..=4, got {}", self.cores));
        }
        if self.clock_mhz == 0 {
            return bad("clock_mhz must be positive".into());
        }
        if !(self.bandwidth_mbps > 0.0) || !self.bandwidth_mbps.is_finite() {
            return bad(format!("bandwidth_mbps must be positive, got {}", self.bandwidth_mbps));
        }
        if !(self.power_w > 0.0) {
            return bad(format!("power_w must be positive, got {}", self.power_w));
        }
        let d = self.device;
        if d.dsp_total == 0 || d.bram_total == 0 || d.ff_total == 0 || d.lut_total == 0 {
            return bad("device budget entries must be positive".into());
        }
        if self.buffer_bytes == 0 {
            return bad("buffer_bytes must be positive".into());
        }
        if let Some(s) = self.arch_cost_scale {
            if !(s > 0.0) {
                return bad(format!("arch_cost_scale must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn peak_ops_per_cycle(&self) -> u64 {
        self.arch.peak_ops_per_cycle()
    }

    pub fn clock_hz(&self) -> f64 {
        self.clock_mhz as f64 * 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_roundtrip() {
        for a in Arch::ALL {
            assert_eq!(a.to_string().parse::<Arch>().unwrap(), a);
        }
        assert_eq!(serde_json::to_string(&Arch::B3136).unwrap(), "\"B3136\"");
    }

    #[test]
    fn minimal_json_takes_defaults() {
        let t: TargetConfig = serde_json::from_str(r#"{"arch":"B4096","cores":2}"#).unwrap();
        assert_eq!(t.clock_mhz, 300);
        assert_eq!(t.bandwidth_mbps, 2041.91);
        assert_eq!(t.device, DeviceBudget::default());
        assert!(t.validate().is_ok());
    }

    #[test]
    fn five_cores_rejected() {
        assert!(TargetConfig::new(Arch::B512, 5).validate().is_err());
        assert!(TargetConfig::new(Arch::B512, 0).validate().is_err());
    }
}
