//! Backpropagation against central differences on a small predictor.

use dmmimo_core::channel::sample_rayleigh_channel;
use dmmimo_core::predictor::{gradient_check, Activation, FeedForward};
use dmmimo_core::rng::{self, complex_gaussian};
use dmmimo_core::{CMatrix, PredictorQuery};
use rand::Rng;
use serde_json::{json, Value};

use super::schedule;
use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEntry {
    pub activation: Activation,
    pub widths: Vec<usize>,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }

    pub fn to_json(&self) -> Value {
        json!({
            "experiment": "gradient-check",
            "tolerance": self.tolerance,
            "max_relative_error": self.worst(),
            "pass": self.passed(),
            "networks": self.entries.iter().map(|e| json!({
                "activation": e.activation.name(),
                "widths": e.widths,
                "max_relative_error": e.max_relative_error,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Random queries and targets from `(seed, "gradient-check", 0)`; one
/// network per activation.
pub fn run_gradient_check(cfg: &ExperimentConfig) -> Result<GradientReport> {
    let gc = &cfg.gradient_check;
    let m = cfg.common.antennas;
    let k = gc.block_len;
    let sched = schedule(cfg)?;
    let mut r = rng::stream(cfg.common.seed, "gradient-check", 0);
    let xs: Vec<_> = (0..gc.batch_size)
        .map(|_| CMatrix::from_fn(m, k, |_, _| complex_gaussian(&mut r, 1.0)))
        .collect();
    let lambdas: Vec<_> = (0..gc.batch_size).map(|_| sample_rayleigh_channel(m, &mut r).lambdas).collect();
    let steps: Vec<usize> = (0..gc.batch_size).map(|_| r.random_range(1..=sched.steps())).collect();
    let targets: Vec<_> = (0..gc.batch_size)
        .map(|_| CMatrix::from_fn(m, k, |_, _| complex_gaussian(&mut r, 1.0)))
        .collect();
    let queries: Vec<_> = xs
        .iter()
        .zip(&lambdas)
        .zip(&steps)
        .map(|((x, l), &t)| PredictorQuery::new(x, l, t, &sched))
        .collect();

    let mut entries = Vec::new();
    for activation in [Activation::Silu, Activation::Softplus] {
        let model = FeedForward::new(m, k, &gc.hidden, activation, cfg.common.seed);
        entries.push(GradientEntry {
            activation,
            widths: model.net().widths().to_vec(),
            max_relative_error: gradient_check(&model, &queries, &targets)?,
        });
    }
    Ok(GradientReport {
        entries,
        tolerance: gc.tolerance,
    })
}
