//! Linear noise schedule, effective sampling steps and forward diffusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complex::SignalBlock;
use crate::error::{Error, Result};
use crate::rng::complex_gaussian;

/// Schedule parameters as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub alpha_first: f64,
    pub alpha_last: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            alpha_first: 0.9999,
            alpha_last: 0.98,
        }
    }
}

/// Diffusion constants `alpha_t` and `alpha_bar_t = prod_{l<=t} alpha_l`.
///
/// Steps are indexed `1..=T` throughout the public API.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `(1 - alpha_bar_t) / alpha_bar_t`, strictly increasing.
    nsr: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_t` decreases linearly from `alpha_first` (t = 1) to
    /// `alpha_last` (t = T).
    pub fn linear(steps: usize, alpha_first: f64, alpha_last: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one diffusion step required".into()));
        }
        if !(alpha_last > 0.0 && alpha_last <= alpha_first && alpha_first < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < alpha_last <= alpha_first < 1, got first={alpha_first}, last={alpha_last}"
            )));
        }
        let alpha: Vec<f64> = if steps == 1 {
            vec![alpha_first]
        } else {
            let delta = (alpha_first - alpha_last) / (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        alpha_last
                    } else {
                        alpha_first - i as f64 * delta
                    }
                })
                .collect()
        };
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let nsr = alpha_bar.iter().map(|&ab| (1.0 - ab) / ab).collect();
        Ok(Self {
            alpha,
            alpha_bar,
            nsr,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.alpha_first, p.alpha_last)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Noise-to-signal ratio `(1 - alpha_bar_t) / alpha_bar_t`.
    pub fn noise_to_signal(&self, t: usize) -> f64 {
        self.nsr[t - 1]
    }

    /// The step `m` whose noise-to-signal ratio is closest to
    /// `sigma_sq_eff`. Ties go to the smaller step.
    pub fn effective_step(&self, sigma_sq_eff: f64) -> usize {
        let t_max = self.nsr.len();
        // First 0-based index with nsr >= sigma_sq_eff.
        let hi = self.nsr.partition_point(|&f| f < sigma_sq_eff);
        if hi == 0 {
            return 1;
        }
        if hi == t_max {
            return t_max;
        }
        let below = sigma_sq_eff - self.nsr[hi - 1];
        let above = self.nsr[hi] - sigma_sq_eff;
        if below <= above {
            hi
        } else {
            hi + 1
        }
    }

    /// `X_t = sqrt(alpha_bar_t) X_0 + sqrt(1 - alpha_bar_t) eps` with
    /// unit complex Gaussian `eps`.
    pub fn forward_diffuse<R: Rng + ?Sized>(&self, x0: &SignalBlock, t: usize, rng: &mut R) -> Result<SignalBlock> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.clone();
        for v in out.as_mut_slice() {
            *v = *v * a + complex_gaussian(rng, 1.0) * b;
        }
        Ok(out)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_params(&ScheduleParams::default()).expect("default schedule is valid")
    }
}
