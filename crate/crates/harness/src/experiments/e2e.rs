//! Source reconstruction MSE for the three pipeline variants.

use dmmimo_core::channel::db;
use dmmimo_core::jscc::{reconstruction_mse, ChannelMode, ToyCodec};
use dmmimo_core::PredictorModel;

use super::{schedule, source_set};
use super::training::check_codec;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{fmt_f64, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct E2eRow {
    pub snr_db: f64,
    /// Stage-1 codec, no denoiser.
    pub stage1: f64,
    /// Stage-1 codec with the joint sampler.
    pub stage1_dm: f64,
    /// Stage-3 decoder with the joint sampler.
    pub stage3_dm: f64,
    pub trials: usize,
    pub seed: u64,
}

pub fn e2e_table(rows: &[E2eRow]) -> Table {
    let mut t = Table::new([
        "snr_db",
        "mse_stage1",
        "mse_stage1_dm",
        "mse_stage3_dm",
        "mse_stage1_db",
        "mse_stage1_dm_db",
        "mse_stage3_dm_db",
        "trials",
        "seed",
    ]);
    for r in rows {
        let lin = [r.stage1, r.stage1_dm, r.stage3_dm];
        let mut c = vec![fmt_f64(r.snr_db)];
        c.extend(lin.iter().map(|&v| fmt_f64(v)));
        c.extend(lin.iter().map(|&v| fmt_f64(db(v))));
        c.push(r.trials.to_string());
        c.push(r.seed.to_string());
        t.push(c);
    }
    t
}

/// MSE per source dimension on a held-out set drawn from
/// `(seed, "e2e-heldout", 0)`. The three variants share channels and noise.
pub fn run_e2e(
    cfg: &ExperimentConfig,
    stage1: &ToyCodec,
    stage3: &ToyCodec,
    predictor: &PredictorModel,
) -> Result<Vec<E2eRow>> {
    check_codec(cfg, stage1)?;
    check_codec(cfg, stage3)?;
    let sched = schedule(cfg)?;
    let seed = cfg.common.seed;
    let heldout = source_set(cfg, "e2e-heldout", cfg.e2e.trials);
    let chan = ChannelMode::Rayleigh;
    cfg.e2e
        .snr
        .iter()
        .map(|&snr_db| {
            Ok(E2eRow {
                snr_db,
                stage1: reconstruction_mse::<PredictorModel>(stage1, None, &heldout, snr_db, &chan, &sched, seed)?,
                stage1_dm: reconstruction_mse(stage1, Some(predictor), &heldout, snr_db, &chan, &sched, seed)?,
                stage3_dm: reconstruction_mse(stage3, Some(predictor), &heldout, snr_db, &chan, &sched, seed)?,
                trials: cfg.e2e.trials,
                seed,
            })
        })
        .collect()
}
