//! One module per CLI subcommand. Each `run_*` function computes its
//! result without touching the filesystem (apart from loading inputs);
//! [`crate::run`] writes the files.

pub mod e2e;
pub mod gradient_check;
pub mod mse_sweep;
pub mod svd_stats;
pub mod training;

use dmmimo_core::jscc::SourceModel;
use dmmimo_core::rng::{self, SimRng};
use dmmimo_core::{NoiseSchedule, PredictorModel};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SourceKind};
use crate::error::Result;
use crate::output::load_checkpoint;

/// Runs `f(j, rng_j)` for every trial `j` on its own stream
/// `(seed, tag, j)` and returns the results in trial order.
pub fn par_trials<T, F>(seed: u64, tag: &str, trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut SimRng) -> Result<T> + Sync,
{
    (0..trials as u64)
        .into_par_iter()
        .map(|j| f(j, &mut rng::stream(seed, tag, j)))
        .collect()
}

/// `oracle` is the analytic Gaussian predictor for unit source power;
/// anything else is a checkpoint path.
pub fn load_predictor(spec: &str) -> Result<PredictorModel> {
    if spec == "oracle" {
        return Ok(PredictorModel::analytic(1.0));
    }
    Ok(PredictorModel::from_checkpoint(&load_checkpoint(spec.as_ref())?)?)
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::from_params(&cfg.schedule)?)
}

pub fn source_model(cfg: &ExperimentConfig) -> SourceModel {
    let s = &cfg.source;
    match s.kind {
        SourceKind::Gaussian => SourceModel::correlated_gaussian(s.dim, s.condition, s.model_seed),
        SourceKind::Mixture => SourceModel::gaussian_mixture(s.dim, s.condition, s.separation, s.model_seed),
    }
}

/// Source sample set `tag` drawn from a single stream of the master seed.
pub fn source_set(cfg: &ExperimentConfig, tag: &str, count: usize) -> Vec<ndarray::Array1<f64>> {
    source_model(cfg).sample_set(count, &mut rng::stream(cfg.common.seed, tag, 0))
}
