//! Multi-threaded benchmark over the simulator.
//!
//! Images are split round-robin over `T` worker threads, each driving one
//! in-flight frame at a time. Frames advance in lockstep rounds: during round
//! `k` the active streams are the threads that still have a `k`-th frame, and
//! every active frame costs the cycles the timing model gives for that stream
//! count. The makespan is the sum of round times, so results depend only on
//! the workload and never on host scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::thread;

use serde::Serialize;

use super::report::{compare_report, compute_metrics, ComparisonReport, PlatformRow};
use super::BenchError;
use crate::quant::accuracy;
use crate::sim::{execute, frame_trace, FrameProfile, LoadedModel, TargetConfig};
use crate::tensor::{argmax, Tensor};

/// What one frame costs on a target.
#[derive(Debug, Clone)]
pub struct Workload {
    pub target: TargetConfig,
    pub model: Option<LoadedModel>,
    /// Frame-level cost; replaces the model's per-layer totals for timing when set.
    pub profile: Option<FrameProfile>,
    pub kappa: f64,
    /// Overrides the model's operation count in the GOPS column.
    pub ops_per_frame: Option<u64>,
}

impl Workload {
    pub fn from_profile(target: TargetConfig, profile: FrameProfile, kappa: f64) -> Self {
        Self {
            target,
            model: None,
            profile: Some(profile),
            kappa,
            ops_per_frame: None,
        }
    }

    pub fn from_model(model: LoadedModel, kappa: f64) -> Self {
        Self {
            target: model.target.clone(),
            model: Some(model),
            profile: None,
            kappa,
            ops_per_frame: None,
        }
    }

    /// Cycles of one frame while `active` streams share the target.
    pub fn frame_cycles(&self, active: usize) -> Result<u64, BenchError> {
        if let Some(p) = &self.profile {
            return Ok(p.cycles(&self.target, active, self.kappa)?.cycles());
        }
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| BenchError::Invalid("workload has no model or frame profile".into()))?;
        Ok(frame_trace(&model.model.layer_totals, &self.target, active, self.kappa)?.total_cycles)
    }

    pub fn bytes_per_frame(&self) -> f64 {
        match (&self.profile, &self.model) {
            (Some(p), _) => p.bytes_per_frame,
            (None, Some(m)) => m.bytes_per_frame() as f64,
            (None, None) => 0.0,
        }
    }

    pub fn ops_per_frame(&self) -> Option<u64> {
        self.ops_per_frame
            .or_else(|| self.model.as_ref().map(|m| m.ops_per_frame()))
    }
}

/// Image indices per thread: image `i` goes to thread `i mod T`.
pub fn split_round_robin(images: usize, threads: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); threads];
    for i in 0..images {
        out[i % threads].push(i);
    }
    out
}

/// Makespan in cycles without spawning threads: `q` full rounds of `T` streams
/// plus one round of `images mod T` streams.
pub fn makespan_cycles(w: &Workload, images: usize, threads: usize) -> Result<u64, BenchError> {
    if threads == 0 {
        return Err(BenchError::Invalid("thread count must be >= 1".into()));
    }
    let (q, r) = (images / threads, images % threads);
    let mut total = q as u64 * w.frame_cycles(threads)?;
    if r > 0 {
        total += w.frame_cycles(r)?;
    }
    Ok(total)
}

/// FPS the throughput model predicts for `threads` over `images` frames.
pub fn model_fps(w: &Workload, images: usize, threads: usize) -> Result<f64, BenchError> {
    let cycles = makespan_cycles(w, images, threads)?;
    Ok(images as f64 / (cycles as f64 / w.target.clock_hz()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreadRun {
    pub threads: usize,
    pub images_per_thread: Vec<usize>,
    pub makespan_cycles: u64,
    pub makespan_s: f64,
    pub fps: f64,
    /// Total off-chip traffic divided by the makespan.
    pub bandwidth_mbps_used: f64,
    /// Predicted class per image, when numerics were executed.
    #[serde(skip)]
    pub predictions: Option<Vec<usize>>,
}

/// Finish cycle of a worker and its `(image, class)` predictions.
type WorkerResult = Result<(u64, Vec<(usize, usize)>), BenchError>;

/// Runs `images` frames on `threads` workers. With `frames`, every image is also
/// executed numerically (frame `i` uses `frames[i]`).
pub fn run_threads(
    w: &Workload,
    images: usize,
    threads: usize,
    frames: Option<&[Tensor]>,
    host_parallel: bool,
) -> Result<ThreadRun, BenchError> {
    if images == 0 {
        return Err(BenchError::EmptyImages);
    }
    if threads == 0 {
        return Err(BenchError::Invalid("thread count must be >= 1".into()));
    }
    if let Some(f) = frames {
        if f.len() < images {
            return Err(BenchError::Invalid(format!(
                "{images} frames requested, {} supplied",
                f.len()
            )));
        }
        if w.model.is_none() {
            return Err(BenchError::Invalid("numeric execution needs a compiled model".into()));
        }
    }
    let subsets = split_round_robin(images, threads);
    let counts: Vec<usize> = subsets.iter().map(Vec::len).collect();
    let mut cycles_for = BTreeMap::new();
    for s in 1..=threads {
        cycles_for.insert(s, w.frame_cycles(s)?);
    }

    let worker = |subset: &[usize]| -> WorkerResult {
        let mut finish = 0u64;
        let mut preds = Vec::new();
        for (k, &img) in subset.iter().enumerate() {
            let active = counts.iter().filter(|&&c| c > k).count();
            finish += cycles_for[&active];
            if let (Some(f), Some(m)) = (frames, &w.model) {
                let out = execute(m, &f[img])?;
                let class = argmax(out.as_i8().map_err(|e| BenchError::Invalid(e.to_string()))?)
                    .ok_or_else(|| BenchError::Invalid("empty output".into()))?;
                preds.push((img, class));
            }
        }
        Ok((finish, preds))
    };

    let results: Vec<WorkerResult> = if host_parallel && threads > 1 {
        thread::scope(|scope| {
            let handles: Vec<_> = subsets.iter().map(|s| scope.spawn(|| worker(s))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(BenchError::Invalid("worker panicked".into())))
                })
                .collect()
        })
    } else {
        subsets.iter().map(|s| worker(s)).collect()
    };

    let mut makespan = 0;
    let mut preds = frames.map(|_| vec![0usize; images]);
    for r in results {
        let (finish, p) = r?;
        makespan = makespan.max(finish);
        if let Some(all) = preds.as_mut() {
            for (i, c) in p {
                all[i] = c;
            }
        }
    }
    let makespan_s = makespan as f64 / w.target.clock_hz();
    Ok(ThreadRun {
        threads,
        images_per_thread: counts,
        makespan_cycles: makespan,
        makespan_s,
        fps: images as f64 / makespan_s,
        bandwidth_mbps_used: w.bytes_per_frame() * images as f64 / makespan_s / 1e6,
        predictions: preds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreadRow {
    pub threads: usize,
    pub fps: f64,
    pub latency_s: f64,
    pub achieved_gops: Option<f64>,
    pub bandwidth_mbps_used: f64,
    pub fps_per_watt: f64,
    pub makespan_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub images: usize,
    pub power_w: f64,
    pub kappa: f64,
    pub rows: Vec<ThreadRow>,
    /// Top-1 accuracy in `[0, 1]` when labels were supplied.
    pub accuracy: Option<f64>,
    pub comparison: Option<ComparisonReport>,
}

pub const FPS_NOTE: &str = "FPS counts simulated accelerator time only; host pre/post-processing is excluded.";

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("threads,fps,latency_s,achieved_gops,bandwidth_mbps_used,fps_per_watt,makespan_cycles\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{},{:.2},{:.2},{}",
                r.threads,
                r.fps,
                r.latency_s,
                r.achieved_gops.map(|g| format!("{g:.3}")).unwrap_or_default(),
                r.bandwidth_mbps_used,
                r.fps_per_watt,
                r.makespan_cycles
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{FPS_NOTE}\nimages {}  power {:.2} W  kappa {:.6}\n",
            self.images, self.power_w, self.kappa
        );
        let _ = writeln!(
            s,
            "{:>7} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "threads", "fps", "latency_s", "gops", "mb/s", "fps/W"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>7} {:>10.2} {:>10.2} {:>10} {:>10.2} {:>8.2}",
                r.threads,
                r.fps,
                r.latency_s,
                r.achieved_gops.map(|g| format!("{g:.3}")).unwrap_or_else(|| "-".into()),
                r.bandwidth_mbps_used,
                r.fps_per_watt
            );
        }
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy {:.2}%", 100.0 * a);
        }
        if let Some(c) = &self.comparison {
            s.push('\n');
            s.push_str(&c.to_text());
        }
        s
    }
}

/// Options for [`run_workload`] beyond the workload itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub frames: Option<&'a [Tensor]>,
    pub labels: Option<&'a [u8]>,
    pub baselines: Vec<PlatformRow>,
    pub baseline: Option<String>,
    /// Run worker threads on the host in parallel (results are identical either way).
    pub host_parallel: bool,
}

pub fn run_workload(
    w: &Workload,
    images: usize,
    thread_counts: &[usize],
    opts: &RunOptions<'_>,
) -> Result<RunReport, BenchError> {
    if thread_counts.is_empty() || thread_counts.contains(&0) {
        return Err(BenchError::Invalid("thread counts must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut accuracy_value = None;
    for (i, &t) in thread_counts.iter().enumerate() {
        // Outputs do not depend on the thread count, so numerics run once.
        let frames = if i == 0 { opts.frames } else { None };
        let run = run_threads(w, images, t, frames, opts.host_parallel)?;
        if let (Some(p), Some(l), None) = (&run.predictions, opts.labels, accuracy_value) {
            accuracy_value = Some(accuracy(p, &l[..images]).map_err(|e| BenchError::Invalid(e.to_string()))?);
        }
        let m = compute_metrics(run.fps, w.target.power_w, images, w.ops_per_frame().unwrap_or(0));
        rows.push(ThreadRow {
            threads: t,
            fps: run.fps,
            latency_s: m.latency_s,
            achieved_gops: w.ops_per_frame().map(|_| m.achieved_gops),
            bandwidth_mbps_used: run.bandwidth_mbps_used,
            fps_per_watt: m.fps_per_watt,
            makespan_cycles: run.makespan_cycles,
        });
    }
    let comparison = if opts.baselines.is_empty() {
        None
    } else {
        let mut table = opts.baselines.clone();
        for r in &rows {
            table.push(PlatformRow {
                platform: format!("sim-{}thread", r.threads),
                fps: r.fps,
                power_w: w.target.power_w,
                images,
                accuracy: accuracy_value.map(|a| 100.0 * a),
                reported_efficiency: None,
            });
        }
        let base = opts
            .baseline
            .clone()
            .unwrap_or_else(|| opts.baselines[0].platform.clone());
        Some(compare_report(&table, &base)?)
    };
    Ok(RunReport {
        images,
        power_w: w.target.power_w,
        kappa: w.kappa,
        rows,
        accuracy: accuracy_value,
        comparison,
    })
}
