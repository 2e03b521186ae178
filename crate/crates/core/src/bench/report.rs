use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;

/// Derived metrics of one platform run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fps: f64,
    pub latency_s: f64,
    pub fps_per_watt: f64,
    pub achieved_gops: f64,
}

/// `latency = images / fps`, `efficiency = fps / power`, `gops = ops_per_frame * fps / 1e9`.
pub fn compute_metrics(fps: f64, power_w: f64, images: usize, ops_per_frame: u64) -> MetricRow {
    MetricRow {
        fps,
        latency_s: images as f64 / fps,
        fps_per_watt: fps / power_w,
        achieved_gops: ops_per_frame as f64 * fps / 1e9,
    }
}

/// One platform in a comparison table; baseline rows are data, not runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformRow {
    pub platform: String,
    pub fps: f64,
    pub power_w: f64,
    #[serde(default = "default_images")]
    pub images: usize,
    /// Top-1 accuracy in percent, display only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Efficiency printed by the source of a baseline row, kept for cross-checking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_efficiency: Option<f64>,
}

fn default_images() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub platform: String,
    pub fps: f64,
    pub power_w: f64,
    pub images: usize,
    pub accuracy: Option<f64>,
    pub latency_s: f64,
    pub fps_per_watt: f64,
    pub throughput_ratio: f64,
    pub efficiency_ratio: f64,
    pub reported_efficiency: Option<f64>,
    /// Set when `reported_efficiency` disagrees with `fps / power` at two decimals.
    pub footnote: Option<usize>,
    /// `reported_efficiency` over the baseline's efficiency (its reported value
    /// when present), i.e. the ratio the source table would print.
    pub reported_efficiency_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    pub footnotes: Vec<String>,
}

pub fn compare_report(rows: &[PlatformRow], baseline: &str) -> Result<ComparisonReport, BenchError> {
    let base = rows
        .iter()
        .find(|r| r.platform == baseline)
        .ok_or_else(|| BenchError::MissingBaseline(baseline.to_string()))?;
    for r in rows {
        if !(r.fps > 0.0) || !(r.power_w > 0.0) || r.images == 0 {
            return Err(BenchError::Invalid(format!(
                "row `{}` needs positive fps, power and image count",
                r.platform
            )));
        }
    }
    let base_eff = base.fps / base.power_w;
    let base_reported = base.reported_efficiency.unwrap_or(base_eff);
    let mut footnotes = Vec::new();
    let out = rows
        .iter()
        .map(|r| {
            let m = compute_metrics(r.fps, r.power_w, r.images, 0);
            let reported_ratio = r.reported_efficiency.map(|rep| rep / base_reported);
            let footnote = r
                .reported_efficiency
                .filter(|&rep| (rep - m.fps_per_watt).abs() >= 0.005)
                .map(|rep| {
                    footnotes.push(format!(
                        "{}: reported efficiency {rep:.2} FPS/W does not equal fps/power = {:.2}/{:.2} = {:.2}; \
                     the computed value is shown (ratio {:.2}x), the reported value gives {:.2}x against `{baseline}`",
                        r.platform,
                        r.fps,
                        r.power_w,
                        m.fps_per_watt,
                        m.fps_per_watt / base_eff,
                        rep / base_reported
                    ));
                    footnotes.len()
                });
            ComparisonRow {
                platform: r.platform.clone(),
                fps: r.fps,
                power_w: r.power_w,
                images: r.images,
                accuracy: r.accuracy,
                latency_s: m.latency_s,
                fps_per_watt: m.fps_per_watt,
                throughput_ratio: r.fps / base.fps,
                efficiency_ratio: m.fps_per_watt / base_eff,
                reported_efficiency: r.reported_efficiency,
                footnote,
                reported_efficiency_ratio: reported_ratio,
            }
        })
        .collect();
    Ok(ComparisonReport {
        baseline: baseline.to_string(),
        rows: out,
        footnotes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "platform,fps,power_w,images,accuracy,latency_s,fps_per_watt,throughput_ratio,efficiency_ratio,reported_efficiency,footnote,reported_efficiency_ratio\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{},{},{:.2},{:.2},{:.2},{:.2},{},{},{}",
                r.platform,
                r.fps,
                r.power_w,
                r.images,
                opt(r.accuracy),
                r.latency_s,
                r.fps_per_watt,
                r.throughput_ratio,
                r.efficiency_ratio,
                opt(r.reported_efficiency),
                r.footnote.map(|n| n.to_string()).unwrap_or_default(),
                opt(r.reported_efficiency_ratio)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("Comparison against `{}`\n", self.baseline);
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>8} {:>9} {:>11} {:>10} {:>11} {:>11}",
            "platform", "fps", "power_w", "acc_%", "latency_s", "fps/W", "thr_ratio", "eff_ratio"
        );
        for r in &self.rows {
            let eff = match r.footnote {
                Some(n) => format!("{:.2}[{n}]", r.fps_per_watt),
                None => format!("{:.2}", r.fps_per_watt),
            };
            let _ = writeln!(
                s,
                "{:<16} {:>10.2} {:>8.2} {:>9} {:>11.2} {:>10} {:>10.2}x {:>10.2}x",
                r.platform,
                r.fps,
                r.power_w,
                opt(r.accuracy),
                r.latency_s,
                eff,
                r.throughput_ratio,
                r.efficiency_ratio
            );
        }
        for (i, f) in self.footnotes.iter().enumerate() {
            let _ = writeln!(s, "[{}] {f}", i + 1);
        }
        s
    }
}

/// Reads platform rows from CSV with a `platform,fps,power_w[,images,accuracy,reported_efficiency]` header.
pub fn load_rows_csv(path: &Path) -> Result<Vec<PlatformRow>, BenchError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| BenchError::Csv(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| BenchError::Csv(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &str, fps: f64, w: f64) -> PlatformRow {
        PlatformRow {
            platform: p.into(),
            fps,
            power_w: w,
            images: 10_000,
            accuracy: None,
            reported_efficiency: None,
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(
            format!("{:.2}", compute_metrics(1021.45, 60.0, 10_000, 0).fps_per_watt),
            "17.02"
        );
        assert_eq!(
            format!("{:.2}", compute_metrics(175.47, 65.0, 10_000, 0).latency_s),
            "56.99"
        );
        assert_eq!(
            format!("{:.2}", compute_metrics(584.11, 60.0, 10_000, 0).fps_per_watt),
            "9.74"
        );
        assert_eq!(compute_metrics(100.0, 1.0, 1, 2_000_000).achieved_gops, 0.2);
    }

    #[test]
    fn ratios_and_baseline() {
        let rows = [
            row("cpu", 175.47, 65.0),
            row("fpga2", 1021.45, 60.0),
            row("fpga1", 584.11, 60.0),
        ];
        let r = compare_report(&rows, "cpu").unwrap();
        assert_eq!(r.rows[0].throughput_ratio, 1.0);
        assert_eq!(format!("{:.2}", r.rows[1].throughput_ratio), "5.82");
        assert_eq!(format!("{:.2}", r.rows[2].throughput_ratio), "3.33");
        assert!(matches!(
            compare_report(&rows, "tpu"),
            Err(BenchError::MissingBaseline(_))
        ));
    }

    #[test]
    fn inconsistent_reported_efficiency_gets_a_footnote() {
        let mut f = row("fpga1", 584.11, 60.0);
        f.reported_efficiency = Some(9.14);
        let mut ok = row("fpga2", 1021.45, 60.0);
        ok.reported_efficiency = Some(17.02);
        let r = compare_report(&[row("cpu", 175.47, 65.0), f, ok], "cpu").unwrap();
        assert_eq!(r.rows[1].footnote, Some(1));
        assert_eq!(r.rows[2].footnote, None);
        assert!(r.to_text().contains("9.74[1]"));
        assert!(r.to_csv().lines().nth(2).unwrap().ends_with(",9.14,1,3.39"));
        assert!(r.footnotes[0].contains("3.39x"));
    }
}
