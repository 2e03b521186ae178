//! Least-squares fit of the throughput model's two free parameters
//! (per-frame core time and contention factor) to observed FPS per thread count.

use serde::{Deserialize, Serialize};

use super::run::{model_fps, Workload};
use super::BenchError;
use crate::sim::{FrameProfile, TargetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub threads: usize,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub threads: usize,
    pub observed: f64,
    pub predicted: f64,
    /// `(predicted - observed) / observed`
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub core_time_s: f64,
    pub kappa: f64,
    /// Held fixed during the fit.
    pub bytes_per_frame: f64,
    pub images: usize,
    pub residuals: Vec<Residual>,
}

impl FitResult {
    pub fn profile(&self) -> FrameProfile {
        FrameProfile {
            core_time_s: self.core_time_s,
            bytes_per_frame: self.bytes_per_frame,
        }
    }

    pub fn max_abs_relative(&self) -> f64 {
        self.residuals.iter().map(|r| r.relative.abs()).fold(0.0, f64::max)
    }
}

/// Tie-breaker that prefers the smallest contention factor among equal fits.
const KAPPA_PENALTY: f64 = 1e-9;

struct Problem<'a> {
    obs: &'a [Observation],
    target: &'a TargetConfig,
    bytes: f64,
    images: usize,
}

impl Problem<'_> {
    fn workload(&self, t: f64, kappa: f64) -> Workload {
        Workload::from_profile(
            self.target.clone(),
            FrameProfile {
                core_time_s: t,
                bytes_per_frame: self.bytes,
            },
            kappa,
        )
    }

    fn objective(&self, t: f64, kappa: f64) -> f64 {
        let w = self.workload(t, kappa);
        let sse: f64 = self
            .obs
            .iter()
            .map(|o| match model_fps(&w, self.images, o.threads) {
                Ok(p) => ((p - o.fps) / o.fps).powi(2),
                Err(_) => f64::INFINITY,
            })
            .sum();
        sse + KAPPA_PENALTY * kappa
    }
}

/// Fits `(core_time_s, kappa)` with `bytes_per_frame` fixed, over `images` frames per run.
pub fn fit_scenario(
    obs: &[Observation],
    target: &TargetConfig,
    bytes_per_frame: f64,
    images: usize,
) -> Result<FitResult, BenchError> {
    if obs.len() < 2 {
        return Err(BenchError::DegenerateObservations(
            "need at least two thread counts".into(),
        ));
    }
    if let Some(o) = obs
        .iter()
        .find(|o| !(o.fps > 0.0) || !o.fps.is_finite() || o.threads == 0)
    {
        return Err(BenchError::DegenerateObservations(format!(
            "observation threads={} fps={} is not positive",
            o.threads, o.fps
        )));
    }
    if !(bytes_per_frame >= 0.0) || images == 0 {
        return Err(BenchError::DegenerateObservations(
            "bytes per frame and images must be positive".into(),
        ));
    }
    target.validate()?;
    let p = Problem {
        obs,
        target,
        bytes: bytes_per_frame,
        images,
    };

    // Coarse grid: log2(t / t_ref) in [-4, 4], kappa in [0, 2].
    let t_ref = obs.iter().min_by_key(|o| o.threads).map(|o| 1.0 / o.fps).unwrap_or(1.0);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=400 {
        let u = -4.0 + 0.02 * i as f64;
        for j in 0..=200 {
            let kappa = 0.01 * j as f64;
            let v = p.objective(t_ref * u.exp2(), kappa);
            if v < best.0 {
                best = (v, u, kappa);
            }
        }
    }

    // Pattern search in (log2 t, kappa).
    let (mut fbest, mut u, mut kappa) = best;
    let (mut du, mut dk) = (0.02, 0.01);
    while du > 1e-12 || dk > 1e-12 {
        let mut improved = false;
        for (su, sk) in [
            (du, 0.0),
            (-du, 0.0),
            (0.0, dk),
            (0.0, -dk),
            (du, dk),
            (-du, -dk),
            (du, -dk),
            (-du, dk),
        ] {
            let (nu, nk) = (u + su, (kappa + sk).max(0.0));
            let v = p.objective(t_ref * nu.exp2(), nk);
            if v < fbest {
                (fbest, u, kappa) = (v, nu, nk);
                improved = true;
            }
        }
        if !improved {
            du *= 0.5;
            dk *= 0.5;
        }
    }

    let core_time_s = t_ref * u.exp2();
    let w = p.workload(core_time_s, kappa);
    let residuals = obs
        .iter()
        .map(|o| {
            let predicted = model_fps(&w, images, o.threads)?;
            Ok(Residual {
                threads: o.threads,
                observed: o.fps,
                predicted,
                relative: (predicted - o.fps) / o.fps,
            })
        })
        .collect::<Result<_, BenchError>>()?;
    Ok(FitResult {
        core_time_s,
        kappa,
        bytes_per_frame,
        images,
        residuals,
    })
}

/// Reads `threads,fps` rows.
pub fn load_observations(path: &std::path::Path) -> Result<Vec<Observation>, BenchError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| BenchError::Csv(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| BenchError::Csv(e.to_string())))
        .collect()
}
