use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Arch, TargetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub resource: String,
    pub used: u64,
    pub total: u64,
    /// `100 * used / total`
    pub percent: f64,
    pub ok: bool,
}

impl ResourceUsage {
    fn new(resource: &str, used: u64, total: u64) -> Self {
        Self {
            resource: resource.to_string(),
            used,
            total,
            percent: 100.0 * used as f64 / total as f64,
            ok: used <= total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub arch: Arch,
    pub cores: u32,
    /// DSP, BRAM, FF, LUT in that order.
    pub usage: Vec<ResourceUsage>,
    pub exceeded: Vec<String>,
    pub pass: bool,
}

impl ResourceReport {
    pub fn get(&self, resource: &str) -> Option<&ResourceUsage> {
        self.usage.iter().find(|u| u.resource.eq_ignore_ascii_case(resource))
    }
}

impl fmt::Display for ResourceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} x {} core(s)", self.arch, self.cores)?;
        for u in &self.usage {
            writeln!(
                f,
                "  {:<5} {:>8} / {:<8} ({:>6.2}%) {}",
                u.resource,
                u.used,
                u.total,
                u.percent,
                if u.ok { "ok" } else { "EXCEEDED" }
            )?;
        }
        if self.pass {
            write!(f, "  pass")
        } else {
            write!(f, "  fail: {} exceeded", self.exceeded.join(", "))
        }
    }
}

/// Cost of one resource class for `cores` cores of `target.arch`.
///
/// The dual-B4096 cost is scaled to the architecture size (rounded up), then each
/// core is charged half of the dual-core figure: `ceil(cores * scaled / 2)`.
fn used(cost: u64, target: &TargetConfig) -> u64 {
    let peak = target.peak_ops_per_cycle();
    let scaled = match target.arch_cost_scale {
        Some(s) => (cost as f64 * s).ceil() as u64,
        None => (cost * peak).div_ceil(4096),
    };
    (target.cores as u64 * scaled).div_ceil(2)
}

pub fn estimate_resources(target: &TargetConfig) -> ResourceReport {
    let c = target.dual_core_cost;
    let d = target.device;
    let usage = vec![
        ResourceUsage::new("DSP", used(c.dsp, target), d.dsp_total),
        ResourceUsage::new("BRAM", used(c.bram, target), d.bram_total),
        ResourceUsage::new("FF", used(c.ff, target), d.ff_total),
        ResourceUsage::new("LUT", used(c.lut, target), d.lut_total),
    ];
    let exceeded: Vec<String> = usage.iter().filter(|u| !u.ok).map(|u| u.resource.clone()).collect();
    ResourceReport {
        arch: target.arch,
        cores: target.cores,
        pass: exceeded.is_empty(),
        usage,
        exceeded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_b4096_usage_figures() {
        let r = estimate_resources(&TargetConfig::zcu104_dual_b4096());
        let got: Vec<(u64, String)> = r.usage.iter().map(|u| (u.used, format!("{:.2}", u.percent))).collect();
        assert_eq!(
            got,
            [
                (1420, "82.18".to_string()),
                (210, "67.31".to_string()),
                (198725, "43.13".to_string()),
                (105845, "45.94".to_string())
            ]
        );
        assert!(r.pass);
    }

    #[test]
    fn three_cores_fail_on_bram_and_dsp() {
        let r = estimate_resources(&TargetConfig::new(Arch::B4096, 3));
        assert_eq!(r.get("DSP").unwrap().used, 2130);
        assert_eq!(r.get("BRAM").unwrap().used, 315);
        assert_eq!(r.exceeded, ["DSP", "BRAM"]);
        assert!(!r.pass);
    }

    #[test]
    fn single_b512_is_small() {
        let r = estimate_resources(&TargetConfig::new(Arch::B512, 1));
        assert!(r.pass);
        assert!(r.usage.iter().all(|u| u.percent <= 13.0), "{r}");
    }

    #[test]
    fn cost_scale_override() {
        let mut t = TargetConfig::new(Arch::B512, 2);
        t.arch_cost_scale = Some(1.0);
        assert_eq!(estimate_resources(&t).get("DSP").unwrap().used, 1420);
    }
}
