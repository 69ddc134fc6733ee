//! The three training stages and the held-out predictor evaluation.

use dmmimo_core::channel::sample_rayleigh_channel;
use dmmimo_core::jscc::{self, ChannelMode, JsccTrainReport, SnrRange, ToyCodec, REFERENCE_BATCH};
use dmmimo_core::predictor::{train_predictor, Activation, EpochStats, FeedForward, TrainConfig};
use dmmimo_core::rng::{self, complex_gaussian, SimRng};
use dmmimo_core::{CMatrix, EpsilonPredictor, NoiseSchedule, PredictorModel, PredictorQuery, SignalBlock};
use rand::Rng;
use serde_json::{json, Value};

use super::{par_trials, schedule, source_model, source_set};
use crate::config::{ExperimentConfig, PredictorData};
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, Table};

/// Reference batch for the power normalizer, fixed by the source seed so
/// every stage sees the same one.
pub fn reference_set(cfg: &ExperimentConfig) -> Vec<ndarray::Array1<f64>> {
    source_model(cfg).sample_set(REFERENCE_BATCH, &mut rng::stream(cfg.source.model_seed, "reference-set", 0))
}

pub fn train_set(cfg: &ExperimentConfig) -> Vec<ndarray::Array1<f64>> {
    source_set(cfg, "train-set", cfg.source.train_size)
}

pub fn loss_table(epochs: &[(usize, f64, f64)]) -> Table {
    let mut t = Table::new(["epoch", "mean_loss", "learning_rate"]);
    for &(e, l, lr) in epochs {
        t.push(vec![e.to_string(), fmt_f64(l), fmt_f64(lr)]);
    }
    t
}

pub fn codec_history(r: &JsccTrainReport) -> Vec<(usize, f64, f64)> {
    r.epoch_loss
        .iter()
        .zip(&r.learning_rate)
        .enumerate()
        .map(|(i, (&l, &lr))| (i + 1, l, lr))
        .collect()
}

pub fn predictor_history(h: &[EpochStats]) -> Vec<(usize, f64, f64)> {
    h.iter().map(|e| (e.epoch, e.mean_loss, e.learning_rate)).collect()
}

/// Stage 1: encoder and decoder trained jointly without the denoiser.
pub fn run_stage1(cfg: &ExperimentConfig) -> Result<(ToyCodec, JsccTrainReport)> {
    let seed = cfg.common.seed;
    let st = &cfg.stage1;
    let codec = ToyCodec::new(cfg.common.antennas, cfg.source.block_len, &reference_set(cfg), seed)?;
    Ok(jscc::stage1_train(
        &codec,
        &train_set(cfg),
        SnrRange::new(st.snr_low, st.snr_high)?,
        &ChannelMode::Rayleigh,
        &st.train_config(seed),
        &mut rng::stream(seed, "stage1", 0),
    )?)
}

/// Held-out comparison of a predictor against the analytic optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorEval {
    pub trials: usize,
    /// Mean `||eps - eps_hat||^2` per complex element.
    pub loss: f64,
    /// Same for the analytic Gaussian predictor on identical draws.
    pub oracle_loss: f64,
    /// `E_t[alpha_bar_t]`, the oracle's expected loss on a unit source.
    pub expected_alpha_bar: f64,
    /// Mean `||eps_hat - eps_oracle||^2` per complex element.
    pub msd: f64,
    /// Mean `||eps_oracle||^2` per complex element.
    pub oracle_power: f64,
}

impl PredictorEval {
    pub fn loss_excess(&self) -> f64 {
        self.loss / self.expected_alpha_bar - 1.0
    }

    pub fn msd_ratio(&self) -> f64 {
        self.msd / self.oracle_power
    }

    pub fn to_json(&self) -> Value {
        json!({
            "experiment": "train-stage2-eval",
            "trials": self.trials,
            "unit": "linear",
            "loss": self.loss,
            "oracle_loss": self.oracle_loss,
            "expected_alpha_bar": self.expected_alpha_bar,
            "loss_excess_fraction": self.loss_excess(),
            "msd": self.msd,
            "oracle_power": self.oracle_power,
            "msd_fraction": self.msd_ratio(),
        })
    }
}

/// Trial `j` draws `Z` (via `draw`), `t`, the channel and `eps` from
/// `(seed, "stage2-heldout", j)`.
pub fn evaluate_predictor<F>(
    model: &PredictorModel,
    sched: &NoiseSchedule,
    trials: usize,
    seed: u64,
    draw: F,
) -> Result<PredictorEval>
where
    F: Fn(&mut SimRng) -> Result<SignalBlock> + Sync,
{
    let oracle = PredictorModel::analytic(1.0);
    let per_trial = par_trials(seed, "stage2-heldout", trials, |_, r| {
        let z = draw(r)?;
        let (m, k) = z.shape();
        let t = r.random_range(1..=sched.steps());
        let lambdas = sample_rayleigh_channel(m, r).lambdas;
        let eps = CMatrix::from_fn(m, k, |_, _| complex_gaussian(r, 1.0));
        let ab = sched.alpha_bar(t);
        let x = z.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?;
        let q = PredictorQuery::new(&x, &lambdas, t, sched);
        let p = model.predict_epsilon(&q)?;
        let o = oracle.predict_epsilon(&q)?;
        let n = (m * k) as f64;
        Ok([
            eps.sub(&p)?.norm_sqr() / n,
            eps.sub(&o)?.norm_sqr() / n,
            p.sub(&o)?.norm_sqr() / n,
            o.norm_sqr() / n,
        ])
    })?;
    let mut acc = [0.0; 4];
    for v in &per_trial {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = trials as f64;
    Ok(PredictorEval {
        trials,
        loss: acc[0] / n,
        oracle_loss: acc[1] / n,
        expected_alpha_bar: sched.alpha_bars().iter().sum::<f64>() / sched.steps() as f64,
        msd: acc[2] / n,
        oracle_power: acc[3] / n,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub model: FeedForward,
    pub history: Vec<EpochStats>,
    pub eval: PredictorEval,
}

/// Stage 2: the noise predictor, trained on the stage-1 encoder output or
/// on unit Gaussian blocks. `codec` is required for the former.
pub fn run_stage2(cfg: &ExperimentConfig, codec: Option<&ToyCodec>) -> Result<Stage2Outcome> {
    let seed = cfg.common.seed;
    let st = &cfg.stage2;
    let sched = schedule(cfg)?;
    let m = cfg.common.antennas;
    let k = cfg.source.block_len;
    let activation = Activation::from_name(&st.activation)
        .ok_or_else(|| HarnessError::Config(format!("unknown activation `{}`", st.activation)))?;
    let unit_block = |r: &mut SimRng| CMatrix::from_fn(m, k, |_, _| complex_gaussian(r, 1.0));

    let set: Vec<SignalBlock> = match st.data {
        PredictorData::UnitGaussian => {
            let mut r = rng::stream(seed, "stage2-set", 0);
            (0..st.set_size).map(|_| unit_block(&mut r)).collect()
        }
        PredictorData::Codec => {
            let codec = codec.ok_or_else(|| HarnessError::Config("stage 2 on codec data needs the stage-1 codec".into()))?;
            check_codec(cfg, codec)?;
            train_set(cfg)
                .iter()
                .map(|s| codec.encode(s.view()))
                .collect::<dmmimo_core::Result<_>>()?
        }
    };
    let init = FeedForward::new(m, k, &st.hidden, activation, seed);
    let tc = TrainConfig {
        epochs: st.epochs,
        batch_size: st.batch_size,
        learning_rate: st.learning_rate,
        warmup_fraction: st.warmup_fraction,
        seed,
    };
    let out = train_predictor(&init, &set, &sched, &tc, &mut rng::stream(seed, "stage2", 0))?;
    let model = PredictorModel::FeedForward(out.model.clone());

    let eval = match (st.data, codec) {
        (PredictorData::Codec, Some(codec)) => {
            let source = source_model(cfg);
            evaluate_predictor(&model, &sched, st.trials, seed, |r| Ok(codec.encode(source.sample(r).view())?))?
        }
        _ => evaluate_predictor(&model, &sched, st.trials, seed, |r| Ok(unit_block(r)))?,
    };
    Ok(Stage2Outcome {
        model: out.model,
        history: out.history,
        eval,
    })
}

/// Stage 3: the decoder retrained behind the joint sampler.
pub fn run_stage3(
    cfg: &ExperimentConfig,
    codec: &ToyCodec,
    predictor: &PredictorModel,
) -> Result<(ToyCodec, JsccTrainReport)> {
    check_codec(cfg, codec)?;
    let seed = cfg.common.seed;
    let st = &cfg.stage3;
    Ok(jscc::stage3_retrain(
        codec,
        predictor,
        &train_set(cfg),
        SnrRange::new(st.snr_low, st.snr_high)?,
        &st.train_config(seed),
        &schedule(cfg)?,
        &mut rng::stream(seed, "stage3", 0),
    )?)
}

pub fn check_codec(cfg: &ExperimentConfig, codec: &ToyCodec) -> Result<()> {
    let want = (cfg.common.antennas, cfg.source.block_len, cfg.source.dim);
    let got = (codec.antennas(), codec.block_len(), codec.source_dim());
    if want != got {
        return Err(HarnessError::Config(format!(
            "codec geometry (M, k, n) = {got:?} does not match config {want:?}"
        )));
    }
    Ok(())
}
