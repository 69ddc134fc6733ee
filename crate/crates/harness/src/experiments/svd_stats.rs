//! Singular-value statistics of the Rayleigh channel.

use dmmimo_core::channel::{db, sample_rayleigh_channel};
use dmmimo_core::rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{fmt_f64, json_f64, Table};

/// Externally quoted gap between the two sub-channels of the 2x2 channel.
/// Reported next to our estimates, never asserted.
pub const QUOTED_GAP_DB: f64 = 10.37;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdStatsReport {
    pub trials: usize,
    pub antennas: usize,
    /// `E[lambda_i^2]`, strongest first.
    pub mean_lambda_sq: Vec<f64>,
    /// `E[10 log10 lambda_i^2]`.
    pub mean_lambda_sq_db: Vec<f64>,
    pub bins: usize,
    pub lambda_max: f64,
    /// `histogram[i][b]`: count of `lambda_i` in bin `b`.
    pub histogram: Vec<Vec<u64>>,
    /// Samples of `lambda_i` at or above `lambda_max`.
    pub overflow: Vec<u64>,
}

impl SvdStatsReport {
    /// `10 log10(E[lambda_1^2] / E[lambda_2^2])`.
    pub fn gap_ratio_of_means_db(&self) -> Option<f64> {
        (self.antennas >= 2).then(|| db(self.mean_lambda_sq[0] / self.mean_lambda_sq[1]))
    }

    /// `E[dB lambda_1^2] - E[dB lambda_2^2]`.
    pub fn gap_mean_db_difference_db(&self) -> Option<f64> {
        (self.antennas >= 2).then(|| self.mean_lambda_sq_db[0] - self.mean_lambda_sq_db[1])
    }

    pub fn trace(&self) -> f64 {
        self.mean_lambda_sq.iter().sum()
    }

    pub fn to_json(&self) -> Value {
        let opt = |v: Option<f64>| v.map_or(Value::Null, json_f64);
        json!({
            "experiment": "svd-stats",
            "trials": self.trials,
            "antennas": self.antennas,
            "mean_lambda_sq": { "unit": "linear", "values": self.mean_lambda_sq },
            "mean_lambda_sq_db": { "unit": "db", "values": self.mean_lambda_sq_db.iter().map(|&v| json_f64(v)).collect::<Vec<_>>() },
            "trace": { "unit": "linear", "value": self.trace() },
            "gap": {
                "unit": "db",
                "ratio_of_means": opt(self.gap_ratio_of_means_db()),
                "mean_db_difference": opt(self.gap_mean_db_difference_db()),
                "quoted": QUOTED_GAP_DB,
            },
            "histogram": { "bins": self.bins, "lambda_max": self.lambda_max, "overflow": self.overflow },
        })
    }

    /// Empirical density of each `lambda_i` per bin.
    pub fn histogram_table(&self) -> Table {
        let mut cols = vec!["bin_low".to_string(), "bin_high".to_string()];
        cols.extend((1..=self.antennas).map(|i| format!("density_{i}")));
        let mut t = Table::new(cols);
        let width = self.lambda_max / self.bins as f64;
        for b in 0..self.bins {
            let mut row = vec![fmt_f64(b as f64 * width), fmt_f64((b + 1) as f64 * width)];
            row.extend(
                self.histogram
                    .iter()
                    .map(|h| fmt_f64(h[b] as f64 / (self.trials as f64 * width))),
            );
            t.push(row);
        }
        t
    }
}

struct Partial {
    sum_sq: Vec<f64>,
    sum_db: Vec<f64>,
    hist: Vec<Vec<u64>>,
    overflow: Vec<u64>,
}

impl Partial {
    fn new(m: usize, bins: usize) -> Self {
        Self {
            sum_sq: vec![0.0; m],
            sum_db: vec![0.0; m],
            hist: vec![vec![0; bins]; m],
            overflow: vec![0; m],
        }
    }

    fn merge(&mut self, o: &Partial) {
        for i in 0..self.sum_sq.len() {
            self.sum_sq[i] += o.sum_sq[i];
            self.sum_db[i] += o.sum_db[i];
            self.overflow[i] += o.overflow[i];
            for (a, b) in self.hist[i].iter_mut().zip(&o.hist[i]) {
                *a += b;
            }
        }
    }
}

/// Trial `j` draws its channel from stream `(seed, "svd-stats", j)`.
/// Trials are summed in fixed chunks, in order, so the result does not
/// depend on the thread count.
pub fn run_svd_stats(cfg: &ExperimentConfig) -> Result<SvdStatsReport> {
    let m = cfg.common.antennas;
    let sc = &cfg.svd_stats;
    let seed = cfg.common.seed;
    let width = sc.lambda_max / sc.bins as f64;
    let n_chunks = sc.trials.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut p = Partial::new(m, sc.bins);
            for j in c * CHUNK..((c + 1) * CHUNK).min(sc.trials) {
                let ch = sample_rayleigh_channel(m, &mut rng::stream(seed, "svd-stats", j as u64));
                for (i, &l) in ch.lambdas.iter().enumerate() {
                    p.sum_sq[i] += l * l;
                    p.sum_db[i] += db(l * l);
                    let b = (l / width) as usize;
                    if b < sc.bins {
                        p.hist[i][b] += 1;
                    } else {
                        p.overflow[i] += 1;
                    }
                }
            }
            p
        })
        .collect();
    let mut total = Partial::new(m, sc.bins);
    for p in &partials {
        total.merge(p);
    }
    let n = sc.trials as f64;
    Ok(SvdStatsReport {
        trials: sc.trials,
        antennas: m,
        mean_lambda_sq: total.sum_sq.iter().map(|s| s / n).collect(),
        mean_lambda_sq_db: total.sum_db.iter().map(|s| s / n).collect(),
        bins: sc.bins,
        lambda_max: sc.lambda_max,
        histogram: total.hist,
        overflow: total.overflow,
    })
}
