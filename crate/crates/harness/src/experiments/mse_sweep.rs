//! Per-sub-channel MSE of the equalized and denoised signal against the
//! transmitted block, for a unit complex Gaussian source.

use dmmimo_core::channel::{
    build_profile, db, equalize_with_fallback, precode, sample_rayleigh_channel, snr_to_noise_power, transmit,
};
use dmmimo_core::rng::{self, complex_gaussian};
use dmmimo_core::sampler::{denoise_with_profile, SamplerTrace};
use dmmimo_core::{CMatrix, PredictorModel, SignalBlock};

use super::{par_trials, schedule};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub snr_db: f64,
    /// Sub-channel `i` (strongest first) after equalization.
    pub mse_eq: Vec<f64>,
    /// Sub-channel `i` after the joint sampler.
    pub mse_dm: Vec<f64>,
    pub mse_eq_avg: f64,
    pub mse_dm_avg: f64,
    pub trials: usize,
    pub seed: u64,
}

impl MetricRow {
    pub fn columns(m: usize) -> Vec<String> {
        let mut c = vec!["snr_db".to_string()];
        for suffix in ["", "_db"] {
            c.extend((1..=m).map(|i| format!("mse_eq_{i}{suffix}")));
            c.extend((1..=m).map(|i| format!("mse_dm_{i}{suffix}")));
            c.push(format!("mse_eq_avg{suffix}"));
            c.push(format!("mse_dm_avg{suffix}"));
        }
        c.push("trials".into());
        c.push("seed".into());
        c
    }

    pub fn cells(&self) -> Vec<String> {
        let linear: Vec<f64> = self
            .mse_eq
            .iter()
            .chain(&self.mse_dm)
            .copied()
            .chain([self.mse_eq_avg, self.mse_dm_avg])
            .collect();
        let mut c = vec![fmt_f64(self.snr_db)];
        c.extend(linear.iter().map(|&v| fmt_f64(v)));
        c.extend(linear.iter().map(|&v| fmt_f64(db(v))));
        c.push(self.trials.to_string());
        c.push(self.seed.to_string());
        c
    }
}

pub fn metric_table(rows: &[MetricRow], m: usize) -> Table {
    let mut t = Table::new(MetricRow::columns(m));
    for r in rows {
        t.push(r.cells());
    }
    t
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<MetricRow>,
    /// Trace of trial 0 per SNR when tracing is on.
    pub traces: Vec<SamplerTrace>,
}

fn row_mse(est: &SignalBlock, z: &SignalBlock) -> Result<Vec<f64>> {
    let d = est.sub(z)?;
    Ok((0..d.rows()).map(|i| d.row_norm_sqr(i) / d.cols() as f64).collect())
}

/// Trial `j` draws `Z`, `H` and the noise from `(seed, "mse-sweep-link", j)`
/// and the sampler's draws from `(seed, "mse-sweep-sampler", j)`, so every
/// SNR sees the same blocks and channels.
pub fn run_mse_sweep(cfg: &ExperimentConfig, predictor: &PredictorModel) -> Result<SweepResult> {
    let m = cfg.common.antennas;
    let k = cfg.mse_sweep.block_len;
    if let PredictorModel::FeedForward(f) = predictor {
        if (f.antennas(), f.block_len()) != (m, k) {
            return Err(HarnessError::Config(format!(
                "predictor expects {}x{} blocks, sweep uses {m}x{k}",
                f.antennas(),
                f.block_len()
            )));
        }
    }
    let sched = schedule(cfg)?;
    let seed = cfg.common.seed;
    let trials = cfg.mse_sweep.trials;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for &snr_db in &cfg.mse_sweep.snr {
        let sigma_sq = snr_to_noise_power(snr_db, m, 1.0);
        let per_trial = par_trials(seed, "mse-sweep-link", trials, |j, link| {
            let z = CMatrix::from_fn(m, k, |_, _| complex_gaussian(link, 1.0));
            let ch = sample_rayleigh_channel(m, link);
            let y = transmit(&precode(&z, &ch)?, &ch, sigma_sq, link)?;
            let profile = build_profile(&ch, sigma_sq, &sched);
            let y_eq = equalize_with_fallback(&y, &ch, &profile, link)?;
            let mut samp = rng::stream(seed, "mse-sweep-sampler", j);
            let (z_hat, trace) = denoise_with_profile(&y_eq, &ch.lambdas, &profile, predictor, &sched, &mut samp)?;
            let keep = (cfg.mse_sweep.trace && j == 0).then_some(trace);
            Ok((row_mse(&y_eq, &z)?, row_mse(&z_hat, &z)?, keep))
        })?;
        let mut eq = vec![0.0; m];
        let mut dm = vec![0.0; m];
        for (e, d, trace) in per_trial {
            for i in 0..m {
                eq[i] += e[i];
                dm[i] += d[i];
            }
            traces.extend(trace);
        }
        eq.iter_mut().chain(dm.iter_mut()).for_each(|v| *v /= trials as f64);
        rows.push(MetricRow {
            snr_db,
            mse_eq_avg: eq.iter().sum::<f64>() / m as f64,
            mse_dm_avg: dm.iter().sum::<f64>() / m as f64,
            mse_eq: eq,
            mse_dm: dm,
            trials,
            seed,
        });
    }
    Ok(SweepResult { rows, traces })
}
