use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::sim::TargetConfig;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Target identity embedded in compiled models and checked at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub arch: String,
    pub cores: u32,
    pub clock_mhz: u32,
    pub isa_version: u32,
    /// FNV-1a 64 over the canonical encoding, as 16 hex digits.
    pub digest: String,
}

impl Fingerprint {
    pub fn of(target: &TargetConfig) -> Self {
        let arch = target.arch.to_string();
        let canonical = format!(
            "arch={arch};cores={};clock_mhz={};isa_version={}",
            target.cores, target.clock_mhz, target.isa_version
        );
        Self {
            arch,
            cores: target.cores,
            clock_mhz: target.clock_mhz,
            isa_version: target.isa_version,
            digest: format!("{:016x}", fnv1a64(canonical.as_bytes())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        container::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        container::read_json(path)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}x{} @ {} MHz, isa {})",
            self.digest, self.cores, self.arch, self.clock_mhz, self.isa_version
        )
    }
}

pub fn compute_fingerprint(target: &TargetConfig) -> Fingerprint {
    Fingerprint::of(target)
}
