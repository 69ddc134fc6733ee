use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeedForward, PredictorQuery};
use crate::channel::sample_rayleigh_channel;
use crate::complex::{CMatrix, SignalBlock};
use crate::error::{Error, Result};
use crate::optim::{Adam, CosineWarmup};
use crate::rng::complex_gaussian;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warm-up.
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            learning_rate: 1e-4,
            warmup_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidArgument(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FeedForward,
    pub history: Vec<EpochStats>,
}

/// Trains the feed-forward predictor on the denoising objective.
///
/// Each sample of an iteration draws a block `Z` from `encoded_set`, a step
/// `t` uniform on `1..=T`, a Rayleigh channel whose singular values condition
/// the network, and unit complex Gaussian noise `eps`; the network regresses
/// `eps` from `X_t = sqrt(ab_t) Z + sqrt(1 - ab_t) eps`. One epoch is
/// `ceil(|set| / batch_size)` iterations.
pub fn train_predictor<R: Rng + ?Sized>(
    model: &FeedForward,
    encoded_set: &[SignalBlock],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if encoded_set.is_empty() {
        return Err(Error::InvalidArgument("empty encoded signal set".into()));
    }
    let (m, k) = (model.antennas(), model.block_len());
    for z in encoded_set {
        z.check_shape("train_predictor", (m, k))?;
    }

    let mut model = model.clone();
    let iters_per_epoch = encoded_set.len().div_ceil(cfg.batch_size);
    let lr_sched = CosineWarmup {
        peak: cfg.learning_rate,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.epochs * iters_per_epoch,
    };
    let mut opt = Adam::new(model.net().params().len());
    let scale = 1.0 / (cfg.batch_size * m * k) as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..iters_per_epoch {
            let (x, target) = sample_batch(&model, encoded_set, sched, cfg.batch_size, rng)?;
            let (loss, grad) = model.net().squared_error_and_grad(x.view(), target.view(), scale);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { iteration, loss });
            }
            lr = lr_sched.lr(iteration);
            opt.step(model.net_mut().params_mut(), &grad, lr);
            sum += loss;
            iteration += 1;
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: sum / iters_per_epoch as f64,
            learning_rate: lr,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Network inputs and regression targets (`eps` as real pairs) for one
/// batch of the training objective.
pub(crate) fn sample_batch<R: Rng + ?Sized>(
    model: &FeedForward,
    encoded_set: &[SignalBlock],
    sched: &NoiseSchedule,
    batch: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (m, k) = (model.antennas(), model.block_len());
    let mut states = Vec::with_capacity(batch);
    let mut lambdas = Vec::with_capacity(batch);
    let mut steps = Vec::with_capacity(batch);
    let mut target = Array2::zeros((batch, 2 * m * k));
    for mut row in target.rows_mut() {
        let z = &encoded_set[rng.random_range(0..encoded_set.len())];
        let t = rng.random_range(1..=sched.steps());
        let ch = sample_rayleigh_channel(m, rng);
        let eps = CMatrix::from_fn(m, k, |_, _| complex_gaussian(rng, 1.0));
        let ab = sched.alpha_bar(t);
        states.push(z.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?);
        row.as_slice_mut().unwrap().copy_from_slice(&eps.to_real_pairs());
        lambdas.push(ch.lambdas);
        steps.push(t);
    }
    let queries: Vec<_> = states
        .iter()
        .zip(&lambdas)
        .zip(&steps)
        .map(|((x, l), &t)| PredictorQuery::new(x, l, t, sched))
        .collect();
    Ok((model.features(&queries)?, target))
}
