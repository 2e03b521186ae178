use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpuflow::bench::{
    self, fit_scenario, load_cifar10_path, load_observations, load_rows_csv, run_benchmark, run_workload, BenchError,
    RunOptions, Scenario, Workload,
};
use dpuflow::compiler::{self, artifact_paths, fold_batchnorm, load_compiled, save_compiled, CompileError};
use dpuflow::graph::{load_graph, save_graph, GraphError};
use dpuflow::models::{init_graph, synthetic_images, ArchSpec};
use dpuflow::quant::{calibrate, load_qmodel, quantize_model, save_qmodel, CalibrationSet, QuantError};
use dpuflow::sim::{estimate_resources, load_model, simulate_frame, SimError, TargetConfig};

#[derive(Parser)]
#[command(
    name = "dpuflow",
    version,
    about = "INT8 quantization, DPU compilation and simulation for small CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand an architecture file into a model with seeded parameters.
    InitModel {
        arch: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a CIFAR-10 format batch of seeded random images and labels.
    SynthCifar {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold batchnorm, calibrate and quantize a model to INT8.
    Quantize {
        model: PathBuf,
        /// CIFAR-10 batch file or a directory of batches.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        batch: usize,
        /// Use only the first N calibration images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compile a quantized model for a target.
    Compile {
        qmodel: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a compiled model over a CIFAR-10 batch for several thread counts.
    Run {
        cmodel: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Report top-1 accuracy against the batch labels.
        #[arg(long)]
        labels: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario file.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-frame core time and contention factor to observed FPS per thread count.
    Fit {
        /// CSV with `threads,fps` columns.
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Off-chip bytes per frame; defaults to bandwidth / highest observed FPS.
        #[arg(long)]
        bytes_per_frame: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        images: usize,
        /// Write a scenario file with the fitted parameters.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table from platform rows.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, default_value = "cpu")]
        baseline: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resource estimate of a target against its device budget.
    Resources {
        #[arg(long)]
        target: PathBuf,
    },
    /// Simulate one frame and write its per-layer cycle trace as CSV.
    Trace {
        cmodel: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 validation, 3 fingerprint mismatch, 4 resources, 5 subgraph gate, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let compile = cause
            .downcast_ref::<CompileError>()
            .or_else(|| match cause.downcast_ref::<SimError>() {
                Some(SimError::Compile(c)) => Some(c),
                _ => None,
            })
            .or_else(|| match cause.downcast_ref::<BenchError>() {
                Some(BenchError::Compile(c)) | Some(BenchError::Sim(SimError::Compile(c))) => Some(c),
                _ => None,
            });
        if let Some(c) = compile {
            return match c {
                CompileError::FingerprintMismatch { .. } => 3,
                CompileError::SubgraphGateViolation { .. } => 5,
                CompileError::Quant(_) | CompileError::Graph(_) | CompileError::OrphanBatchNorm { .. } => 2,
                CompileError::InvalidModel(_) | CompileError::TileExceedsBuffer { .. } => 2,
                CompileError::Container(_) => 1,
            };
        }
        let sim = cause
            .downcast_ref::<SimError>()
            .or_else(|| match cause.downcast_ref::<BenchError>() {
                Some(BenchError::Sim(s)) => Some(s),
                _ => None,
            });
        match sim {
            Some(SimError::Resources(_)) => return 4,
            Some(SimError::InvalidTarget(_)) => return 2,
            _ => {}
        }
        if cause.downcast_ref::<GraphError>().is_some() || cause.downcast_ref::<QuantError>().is_some() {
            return 2;
        }
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            if !matches!(b, BenchError::Io { .. } | BenchError::Container(_) | BenchError::Sim(_)) {
                return 2;
            }
        }
    }
    1
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitModel { arch, seed, out } => {
            let spec = ArchSpec::load(&arch)?;
            let seed = seed.unwrap_or(spec.seed);
            let g = init_graph(&spec, seed)?;
            let notes = serde_json::json!({ "arch": spec.name, "seed": seed, "params": g.count_params() });
            save_graph(&out, &g, Some(&spec.name), notes)?;
            println!(
                "{}: {} layers, {} parameters -> {}",
                spec.name,
                g.layers().len(),
                g.count_params(),
                out.display()
            );
        }
        Command::SynthCifar { count, seed, out } => {
            let images = synthetic_images(count, bench::IMAGE_SHAPE, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let labels: Vec<u8> = (0..count).map(|_| rng.gen_range(0..10)).collect();
            fs::write(&out, bench::encode_cifar10(&images, &labels)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{count} records -> {}", out.display());
        }
        Command::Quantize {
            model,
            calib,
            out,
            batch,
            limit,
        } => {
            let g = fold_batchnorm(&load_graph(&model)?)?;
            let mut data = load_cifar10_path(&calib)?;
            if let Some(n) = limit {
                data.images.truncate(n);
            }
            let set = CalibrationSet::new(calib.display().to_string(), data.images);
            let table = calibrate(&g, &set, batch)?;
            let q = quantize_model(&g, &table)?;
            save_qmodel(&out, &q)?;
            println!(
                "quantized {} layers with {} calibration images -> {}",
                q.layers.len(),
                set.len(),
                out.display()
            );
        }
        Command::Compile { qmodel, target, out } => {
            let q = load_qmodel(&qmodel)?;
            let t = TargetConfig::load(&target)?;
            let c = compiler::compile(&q, &t)?;
            save_compiled(&out, &c)?;
            let (lst, fp) = artifact_paths(&out);
            println!(
                "1 subgraph, {} instructions, {} ops/frame, {} bytes/frame; fingerprint {}",
                c.accelerator().instructions.len(),
                c.op_totals().total(),
                c.bytes_per_frame(),
                c.fingerprint.digest
            );
            println!("wrote {}, {}, {}", out.display(), lst.display(), fp.display());
        }
        Command::Run {
            cmodel,
            target,
            images,
            labels,
            threads,
            kappa,
            limit,
            out,
        } => {
            let t = TargetConfig::load(&target)?;
            let handle = load_model(Arc::new(load_compiled(&cmodel)?), &t)?;
            let mut batch = load_cifar10_path(&images)?;
            if let Some(n) = limit {
                batch.images.truncate(n);
                batch.labels.truncate(n);
            }
            if batch.is_empty() {
                bail!(BenchError::EmptyImages);
            }
            let w = Workload::from_model(handle, kappa);
            let opts = RunOptions {
                frames: Some(&batch.images),
                labels: labels.then_some(&batch.labels[..]),
                host_parallel: true,
                ..RunOptions::default()
            };
            let report = run_workload(&w, batch.len(), &threads, &opts)?;
            eprint!("{}", report.to_text());
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Bench { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let report = run_benchmark(&s)?;
            eprint!("{}", report.to_text());
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Fit {
            observations,
            target,
            bytes_per_frame,
            images,
            out,
        } => {
            let t = TargetConfig::load(&target)?;
            let obs = load_observations(&observations)?;
            let max_fps = obs.iter().map(|o| o.fps).fold(0.0, f64::max);
            let bytes = bytes_per_frame.unwrap_or(t.bandwidth_mbps * 1e6 / max_fps);
            let fit = fit_scenario(&obs, &t, bytes, images)?;
            println!(
                "core_time_s {:.9e}  kappa {:.6}  bytes_per_frame {:.1}",
                fit.core_time_s, fit.kappa, bytes
            );
            for r in &fit.residuals {
                println!(
                    "  threads {}  observed {:.2}  predicted {:.2}  residual {:+.4}%",
                    r.threads,
                    r.observed,
                    r.predicted,
                    100.0 * r.relative
                );
            }
            if let Some(path) = out {
                let scenario = Scenario {
                    target,
                    model: None,
                    threads: obs.iter().map(|o| o.threads).collect(),
                    images,
                    kappa: fit.kappa,
                    frame_profile: Some(fit.profile()),
                    ops_per_frame: None,
                    baselines: Vec::new(),
                    baseline: None,
                    execute_numerics: false,
                    images_file: None,
                    notes: Some(format!(
                        "fitted to {}; bytes_per_frame held fixed during the fit",
                        observations.display()
                    )),
                    fit: Some(fit),
                };
                dpuflow::container::write_json(&path, &scenario)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Report { rows, baseline, out } => {
            let rows = load_rows_csv(&rows)?;
            let report = bench::compare_report(&rows, &baseline)?;
            eprint!("{}", report.to_text());
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Resources { target } => {
            let t = TargetConfig::load(&target)?;
            let r = estimate_resources(&t);
            println!("{r}");
            if !r.pass {
                bail!(SimError::Resources(Box::new(r)));
            }
        }
        Command::Trace {
            cmodel,
            target,
            images,
            out,
        } => {
            let t = TargetConfig::load(&target)?;
            let handle = load_model(Arc::new(load_compiled(&cmodel)?), &t)?;
            let image = match images {
                Some(p) => load_cifar10_path(&p)?
                    .images
                    .into_iter()
                    .next()
                    .ok_or(BenchError::EmptyImages)?,
                None => synthetic_images(1, handle.model.input_shape, 0).remove(0),
            };
            let (_, trace) = simulate_frame(&handle, &image)?;
            eprintln!(
                "{} cycles/frame = {:.3} ms at {} MHz",
                trace.total_cycles,
                trace.total_cycles as f64 / t.clock_hz() * 1e3,
                t.clock_mhz
            );
            write_or_print(out.as_deref(), &trace.to_csv())?;
        }
    }
    Ok(())
}
