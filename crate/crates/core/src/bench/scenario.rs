use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cifar::load_cifar10_path;
use super::fit::FitResult;
use super::report::PlatformRow;
use super::run::{run_workload, RunOptions, RunReport, Workload};
use super::BenchError;
use crate::compiler::load_compiled;
use crate::container;
use crate::models::synthetic_images;
use crate::sim::{load_model, FrameProfile, TargetConfig};

fn default_images() -> usize {
    10_000
}

/// A benchmark description. Relative paths resolve against the scenario file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub target: PathBuf,
    /// Compiled model; optional when `frame_profile` fixes the per-frame cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub threads: Vec<usize>,
    #[serde(default = "default_images")]
    pub images: usize,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_profile: Option<FrameProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops_per_frame: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<PlatformRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Also execute every frame numerically (needs `model`).
    #[serde(default)]
    pub execute_numerics: bool,
    /// CIFAR-10 batch used for numeric execution and accuracy; synthetic images otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_file: Option<PathBuf>,
    /// Record of the fit that produced `frame_profile` and `kappa`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let mut s: Scenario = container::read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        resolve(&mut s.target);
        if let Some(m) = s.model.as_mut() {
            resolve(m);
        }
        if let Some(f) = s.images_file.as_mut() {
            resolve(f);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.threads.is_empty() || self.threads.contains(&0) {
            return Err(BenchError::Invalid("scenario thread counts must be >= 1".into()));
        }
        if self.images == 0 {
            return Err(BenchError::EmptyImages);
        }
        if self.model.is_none() && self.frame_profile.is_none() {
            return Err(BenchError::Invalid("scenario needs a model or a frame_profile".into()));
        }
        if self.execute_numerics && self.model.is_none() {
            return Err(BenchError::Invalid("execute_numerics needs a model".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(BenchError::Invalid(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }

    pub fn workload(&self) -> Result<Workload, BenchError> {
        let target = TargetConfig::load(&self.target)?;
        let model = match &self.model {
            Some(p) => Some(load_model(Arc::new(load_compiled(p)?), &target)?),
            None => None,
        };
        Ok(Workload {
            target,
            model,
            profile: self.frame_profile,
            kappa: self.kappa,
            ops_per_frame: self.ops_per_frame,
        })
    }
}

/// Runs every thread count of `scenario`.
pub fn run_benchmark(scenario: &Scenario) -> Result<RunReport, BenchError> {
    scenario.validate()?;
    let w = scenario.workload()?;
    let mut images = scenario.images;
    let mut frames = None;
    let mut labels = None;
    if scenario.execute_numerics {
        let model = w.model.as_ref().expect("validated");
        match &scenario.images_file {
            Some(p) => {
                let batch = load_cifar10_path(p)?;
                if batch.is_empty() {
                    return Err(BenchError::EmptyImages);
                }
                images = images.min(batch.len());
                frames = Some(batch.images);
                labels = Some(batch.labels);
            }
            None => frames = Some(synthetic_images(images, model.model.input_shape, 0)),
        }
    }
    let opts = RunOptions {
        frames: frames.as_deref(),
        labels: labels.as_deref(),
        baselines: scenario.baselines.clone(),
        baseline: scenario.baseline.clone(),
        host_parallel: true,
    };
    run_workload(&w, images, &scenario.threads, &opts)
}
