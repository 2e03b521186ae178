//! CIFAR-10 ingestion, multi-threaded benchmark runs and comparison reports.

mod cifar;
mod fit;
mod report;
mod run;
mod scenario;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::compiler::CompileError;
use crate::container::ContainerError;
use crate::sim::SimError;

pub use cifar::{
    encode_cifar10, load_cifar10, load_cifar10_path, parse_cifar10, Cifar10Batch, IMAGE_SHAPE, RECORD_BYTES,
};
pub use fit::{fit_scenario, load_observations, FitResult, Observation, Residual};
pub use report::{
    compare_report, compute_metrics, load_rows_csv, ComparisonReport, ComparisonRow, MetricRow, PlatformRow,
};
pub use run::{
    makespan_cycles, model_fps, run_threads, run_workload, split_round_robin, RunOptions, RunReport, ThreadRow,
    ThreadRun, Workload, FPS_NOTE,
};
pub use scenario::{run_benchmark, Scenario};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CIFAR-10 file of {0} bytes is not a whole number of 3073-byte records")]
    CifarSize(usize),
    #[error("CIFAR-10 record {record} has label {label}, expected 0..=9")]
    CifarLabel { record: usize, label: u8 },
    #[error("no images to run")]
    EmptyImages,
    #[error("baseline `{0}` is not among the rows")]
    MissingBaseline(String),
    #[error("degenerate observations: {0}")]
    DegenerateObservations(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}
