//! Experiment configuration: a TOML file with one section per experiment.
//! Command-line flags override file values and use the same names.

use std::path::{Path, PathBuf};

use dmmimo_core::predictor::Activation;
use dmmimo_core::ScheduleParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub common: Common,
    pub schedule: ScheduleParams,
    pub source: SourceSection,
    pub svd_stats: SvdStatsSection,
    pub mse_sweep: SweepSection,
    #[serde(deserialize_with = "stage1_section")]
    pub stage1: CodecStage,
    pub stage2: PredictorStage,
    #[serde(deserialize_with = "stage3_section")]
    pub stage3: CodecStage,
    pub e2e: E2eSection,
    pub gradient_check: GradientCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            common: Common::default(),
            schedule: ScheduleParams::default(),
            source: SourceSection::default(),
            svd_stats: SvdStatsSection::default(),
            mse_sweep: SweepSection::default(),
            stage1: CodecStage::stage1(),
            stage2: PredictorStage::default(),
            stage3: CodecStage::stage3(),
            e2e: E2eSection::default(),
            gradient_check: GradientCheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Common {
    pub antennas: usize,
    pub seed: u64,
    /// Output directory. Checkpoints for the training pipeline live here too.
    pub out: PathBuf,
    /// `oracle` or a predictor checkpoint path.
    pub predictor: String,
}

impl Default for Common {
    fn default() -> Self {
        Self {
            antennas: 2,
            seed: 0,
            out: PathBuf::from("results"),
            predictor: "oracle".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Gaussian,
    Mixture,
}

/// Synthetic source and codec geometry for the training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub kind: SourceKind,
    /// Source dimension `n`.
    pub dim: usize,
    /// Channel uses per block `k`.
    pub block_len: usize,
    pub condition: f64,
    pub separation: f64,
    /// Seed of the source covariance itself, fixed across runs.
    pub model_seed: u64,
    pub train_size: usize,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            kind: SourceKind::Gaussian,
            dim: 32,
            block_len: 4,
            condition: 10.0,
            separation: 1.5,
            model_seed: 1,
            train_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdStatsSection {
    pub trials: usize,
    pub bins: usize,
    /// Upper edge of the singular-value histogram.
    pub lambda_max: f64,
}

impl Default for SvdStatsSection {
    fn default() -> Self {
        Self {
            trials: 1_000_000,
            bins: 100,
            lambda_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub block_len: usize,
    pub snr: Vec<f64>,
    pub trials: usize,
    /// Dump the sampler trace of trial 0 at every SNR.
    pub trace: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            block_len: 16,
            snr: (0..=10).map(|i| 2.0 * i as f64).collect(),
            trials: 2000,
            trace: false,
        }
    }
}

/// Stage 1 or stage 3 of the codec pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub snr_low: f64,
    pub snr_high: f64,
}

/// A codec stage section as written; missing keys take the stage's default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodecStageKeys {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    warmup_fraction: Option<f64>,
    snr_low: Option<f64>,
    snr_high: Option<f64>,
}

impl CodecStageKeys {
    fn or(self, d: CodecStage) -> CodecStage {
        CodecStage {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            warmup_fraction: self.warmup_fraction.unwrap_or(d.warmup_fraction),
            snr_low: self.snr_low.unwrap_or(d.snr_low),
            snr_high: self.snr_high.unwrap_or(d.snr_high),
        }
    }
}

fn stage1_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<CodecStage, D::Error> {
    Ok(CodecStageKeys::deserialize(d)?.or(CodecStage::stage1()))
}

fn stage3_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<CodecStage, D::Error> {
    Ok(CodecStageKeys::deserialize(d)?.or(CodecStage::stage3()))
}

impl CodecStage {
    pub fn stage1() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-2,
            warmup_fraction: 0.05,
            snr_low: 0.0,
            snr_high: 20.0,
        }
    }

    /// The decoder-only retraining converges in fewer epochs; its SNR
    /// range covers the evaluation grid of the pipeline check.
    pub fn stage3() -> Self {
        Self {
            epochs: 20,
            snr_high: 10.0,
            ..Self::stage1()
        }
    }

    pub fn train_config(&self, seed: u64) -> dmmimo_core::predictor::TrainConfig {
        dmmimo_core::predictor::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorData {
    /// Encoder output of the stage-1 codec on the training set.
    Codec,
    /// I.i.d. unit complex Gaussian blocks.
    UnitGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub data: PredictorData,
    /// Training set size when `data = "unit_gaussian"`.
    pub set_size: usize,
    /// Held-out blocks for the evaluation written after training.
    pub trials: usize,
}

impl Default for PredictorStage {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 2e-3,
            warmup_fraction: 0.05,
            hidden: vec![128, 128],
            activation: "silu".into(),
            data: PredictorData::Codec,
            set_size: 8192,
            trials: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2eSection {
    pub snr: Vec<f64>,
    /// Held-out source samples per SNR.
    pub trials: usize,
}

impl Default for E2eSection {
    fn default() -> Self {
        Self {
            snr: vec![0.0, 5.0, 10.0, 15.0, 20.0, f64::INFINITY],
            trials: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckSection {
    pub block_len: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub tolerance: f64,
}

impl Default for GradientCheckSection {
    fn default() -> Self {
        Self {
            block_len: 1,
            hidden: vec![8, 8],
            batch_size: 4,
            tolerance: 1e-4,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trials: Option<usize>,
    pub snr: Option<Vec<f64>>,
    pub predictor: Option<String>,
}

/// What a run does; selects which section the overrides apply to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    SvdStats,
    MseSweep,
    E2eEval,
    Train(u8),
    GradientCheck,
}

impl Experiment {
    pub fn name(self) -> String {
        match self {
            Experiment::SvdStats => "svd-stats".into(),
            Experiment::MseSweep => "mse-sweep".into(),
            Experiment::E2eEval => "e2e-eval".into(),
            Experiment::Train(s) => format!("train-stage{s}"),
            Experiment::GradientCheck => "gradient-check".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies flag overrides for `exp`; a flag the experiment has no use
    /// for is an error rather than silently ignored.
    pub fn apply(&mut self, exp: Experiment, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.common.seed = seed;
        }
        if let Some(out) = &o.out {
            self.common.out = out.clone();
        }
        if let Some(p) = &o.predictor {
            self.common.predictor = p.clone();
        }
        let unused = |flag: &str| HarnessError::Config(format!("--{flag} has no effect for {}", exp.name()));
        if let Some(n) = o.trials {
            match exp {
                Experiment::SvdStats => self.svd_stats.trials = n,
                Experiment::MseSweep => self.mse_sweep.trials = n,
                Experiment::E2eEval => self.e2e.trials = n,
                Experiment::Train(2) => self.stage2.trials = n,
                _ => return Err(unused("trials")),
            }
        }
        if let Some(snr) = &o.snr {
            match exp {
                Experiment::MseSweep => self.mse_sweep.snr = snr.clone(),
                Experiment::E2eEval => self.e2e.snr = snr.clone(),
                Experiment::Train(s @ (1 | 3)) => {
                    let lo = snr.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = snr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let stage = if s == 1 { &mut self.stage1 } else { &mut self.stage3 };
                    (stage.snr_low, stage.snr_high) = (lo, hi);
                }
                _ => return Err(unused("snr")),
            }
        }
        self.validate(exp)
    }

    pub fn validate(&self, exp: Experiment) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.common.antennas == 0 {
            return bad("antennas must be at least 1".into());
        }
        match exp {
            Experiment::SvdStats => {
                if self.svd_stats.trials == 0 || self.svd_stats.bins == 0 || !(self.svd_stats.lambda_max > 0.0) {
                    return bad("svd_stats needs trials >= 1, bins >= 1, lambda_max > 0".into());
                }
            }
            Experiment::MseSweep => {
                check_grid(&self.mse_sweep.snr)?;
                if self.mse_sweep.trials == 0 || self.mse_sweep.block_len == 0 {
                    return bad("mse_sweep needs trials >= 1 and block_len >= 1".into());
                }
            }
            Experiment::E2eEval => {
                check_grid(&self.e2e.snr)?;
                if self.e2e.trials == 0 {
                    return bad("e2e needs trials >= 1".into());
                }
            }
            Experiment::Train(1 | 3) => {
                for st in [&self.stage1, &self.stage3] {
                    if st.snr_low.is_nan() || st.snr_high.is_nan() || st.snr_low > st.snr_high {
                        return bad(format!("bad training SNR range [{}, {}]", st.snr_low, st.snr_high));
                    }
                }
            }
            Experiment::Train(2) => {
                if Activation::from_name(&self.stage2.activation).is_none() {
                    return bad(format!("unknown activation `{}`", self.stage2.activation));
                }
                if self.stage2.trials == 0 {
                    return bad("stage2 needs trials >= 1".into());
                }
            }
            Experiment::Train(s) => return Err(HarnessError::InvalidStage(s)),
            Experiment::GradientCheck => {
                if self.gradient_check.hidden.contains(&0) || self.gradient_check.batch_size == 0 {
                    return bad("gradient_check needs nonzero widths and batch".into());
                }
            }
        }
        if matches!(exp, Experiment::Train(_) | Experiment::E2eEval) && (self.source.dim == 0 || self.source.block_len == 0) {
            return bad("source dim and block_len must be nonzero".into());
        }
        Ok(())
    }

    /// SHA-256 over the experiment name and the config, excluding the
    /// output directory.
    pub fn hash(&self, exp: Experiment) -> String {
        let mut c = self.clone();
        c.common.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let mut h = Sha256::new();
        h.update(exp.name().as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex(&h.finalize())
    }
}

fn check_grid(snr: &[f64]) -> Result<()> {
    if snr.is_empty() {
        return Err(HarnessError::Config("SNR grid is empty".into()));
    }
    if snr.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
        return Err(HarnessError::Config("SNR grid entries must be numbers or inf".into()));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `0,5,10`, `inf` and `start:stop:step` ranges (inclusive).
pub fn parse_snr_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let pieces: Vec<&str> = part.split(':').collect();
        match pieces.as_slice() {
            [v] => out.push(v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"))?),
            [a, b, step] => {
                let (a, b, step): (f64, f64, f64) = (
                    a.parse().map_err(|e| format!("`{a}`: {e}"))?,
                    b.parse().map_err(|e| format!("`{b}`: {e}"))?,
                    step.parse().map_err(|e| format!("`{step}`: {e}"))?,
                );
                if !(step > 0.0) || !a.is_finite() || !b.is_finite() {
                    return Err(format!("bad range `{part}`"));
                }
                let n = ((b - a) / step + 1e-9).floor() as i64;
                out.extend((0..=n).map(|i| a + i as f64 * step));
            }
            _ => return Err(format!("bad SNR entry `{part}`")),
        }
    }
    if out.is_empty() {
        return Err("empty SNR list".into());
    }
    Ok(out)
}
