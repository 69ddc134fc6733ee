//! Affine joint source-channel codec on synthetic sources, with the
//! three-stage training pipeline:
//!
//! 1. encoder and decoder trained jointly through the real MIMO chain
//!    (precode, transmit, equalize) at random SNR;
//! 2. the noise predictor trained on the frozen encoder's output
//!    ([`crate::predictor::train_predictor`]);
//! 3. the decoder retrained with the joint sampler inserted after the
//!    equalizer, encoder frozen.
//!
//! The encoder output is `z = P (A s + b)`, reshaped to an `M x k` complex
//! block. `P` is the power normalizer: with `mu` and `S2` the mean and
//! second moment of a reference batch, `Q = tr(A S2 A^T) + 2 b^T A mu + |b|^2`
//! is the mean encoder energy on that batch and `P = sqrt(Mk / Q)` makes the
//! average power per complex element exactly one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde_json::Value;

use crate::channel::{
    build_profile, equalize_with_fallback, precode, sample_rayleigh_channel, snr_to_noise_power, transmit,
    ChannelRealization, SubchannelProfile,
};
use crate::checkpoint::{Checkpoint, NamedArray};
use crate::complex::{CMatrix, SignalBlock};
use crate::error::{Error, Result};
use crate::optim::{Adam, CosineWarmup};
use crate::predictor::{EpsilonPredictor, TrainConfig};
use crate::rng::{self, standard_normal, SimRng};
use crate::sampler::denoise_with_profile;
use crate::schedule::NoiseSchedule;

/// Reference batch size used to calibrate the power normalizer.
pub const REFERENCE_BATCH: usize = 4096;

/// Synthetic stand-in for the image source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceModel {
    /// `s = L g`, `g ~ N(0, I)`, with `L L^T` a random covariance whose
    /// eigenvalues are log-spaced over the condition number and average one.
    CorrelatedGaussian { mixing: Array2<f64> },
    /// Equal-weight mixture of `N(+offset, L L^T)` and `N(-offset, L L^T)`.
    GaussianMixture { mixing: Array2<f64>, offset: Array1<f64> },
}

impl SourceModel {
    pub fn correlated_gaussian(n: usize, condition: f64, seed: u64) -> Self {
        SourceModel::CorrelatedGaussian {
            mixing: random_mixing(n, condition, seed),
        }
    }

    /// `separation` is the norm of each component mean; the component
    /// covariance is scaled so the overall average variance stays one.
    pub fn gaussian_mixture(n: usize, condition: f64, separation: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "mixture-offset", 0);
        let dir: Array1<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let offset = &dir * (separation / dir.dot(&dir).sqrt());
        let shrink = (1.0 - separation * separation / n as f64).max(0.05).sqrt();
        SourceModel::GaussianMixture {
            mixing: random_mixing(n, condition, seed) * shrink,
            offset,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceModel::CorrelatedGaussian { mixing } | SourceModel::GaussianMixture { mixing, .. } => mixing.nrows(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let (mixing, offset) = match self {
            SourceModel::CorrelatedGaussian { mixing } => (mixing, None),
            SourceModel::GaussianMixture { mixing, offset } => (mixing, Some(offset)),
        };
        let g: Array1<f64> = (0..mixing.ncols()).map(|_| standard_normal(rng)).collect();
        let mut s = mixing.dot(&g);
        if let Some(o) = offset {
            if rng.random::<bool>() {
                s += o;
            } else {
                s -= o;
            }
        }
        s
    }

    pub fn sample_set<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Array1<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Exact covariance of the source.
    pub fn covariance(&self) -> Array2<f64> {
        match self {
            SourceModel::CorrelatedGaussian { mixing } => mixing.dot(&mixing.t()),
            SourceModel::GaussianMixture { mixing, offset } => {
                let o = offset.view().insert_axis(ndarray::Axis(1));
                mixing.dot(&mixing.t()) + o.dot(&o.t())
            }
        }
    }
}

fn random_mixing(n: usize, condition: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, "source-covariance", 0);
    let q = random_orthogonal(n, &mut rng);
    let mut eig: Vec<f64> = (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            condition.powf(-frac)
        })
        .collect();
    let mean = eig.iter().sum::<f64>() / n as f64;
    eig.iter_mut().for_each(|e| *e /= mean);
    let mut l = q;
    for (j, e) in eig.iter().enumerate() {
        l.column_mut(j).mapv_inplace(|v| v * e.sqrt());
    }
    l
}

/// Modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((n, n), |_| standard_normal(rng));
    for j in 0..n {
        for p in 0..j {
            let proj = q.column(p).dot(&q.column(j));
            let col_p = q.column(p).to_owned();
            q.column_mut(j).scaled_add(-proj, &col_p);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// How stage 1 and evaluation draw the channel matrix.
#[derive(Debug, Clone)]
pub enum ChannelMode {
    Rayleigh,
    Fixed(ChannelRealization),
}

/// Inclusive SNR range in dB; `+inf` means noiseless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrRange {
    pub low_db: f64,
    pub high_db: f64,
}

impl SnrRange {
    pub fn new(low_db: f64, high_db: f64) -> Result<Self> {
        if low_db.is_nan() || high_db.is_nan() || low_db > high_db {
            return Err(Error::InvalidArgument(format!("bad SNR range [{low_db}, {high_db}]")));
        }
        Ok(Self { low_db, high_db })
    }

    pub fn fixed(db: f64) -> Self {
        Self { low_db: db, high_db: db }
    }

    /// Uniform in dB. A range with an infinite end collapses to its low end.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low_db == self.high_db || !self.high_db.is_finite() || !self.low_db.is_finite() {
            return self.low_db;
        }
        rng.random_range(self.low_db..=self.high_db)
    }
}

impl Default for SnrRange {
    fn default() -> Self {
        Self { low_db: 0.0, high_db: 20.0 }
    }
}

/// Affine encoder/decoder pair for an `M x k` block and `n`-dim source.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    antennas: usize,
    block_len: usize,
    source_dim: usize,
    /// Encoder weights `A` (`2Mk x n`, row-major) followed by bias `b`.
    encoder: Vec<f64>,
    /// Decoder weights `D` (`n x 2Mk`) followed by bias `c`.
    decoder: Vec<f64>,
    power_scale: f64,
    ref_mean: Array1<f64>,
    ref_second_moment: Array2<f64>,
}

impl ToyCodec {
    /// Random encoder, zero decoder, normalizer calibrated on `reference`.
    pub fn new(antennas: usize, block_len: usize, reference: &[Array1<f64>], seed: u64) -> Result<Self> {
        let n = reference
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::InvalidArgument("empty reference batch".into()))?;
        let c = 2 * antennas * block_len;
        let mut rng = rng::stream(seed, "codec-init", 0);
        let bound = (6.0 / (n + c) as f64).sqrt();
        let mut encoder = vec![0.0; c * n + c];
        for w in &mut encoder[..c * n] {
            *w = rng.random_range(-bound..bound);
        }
        let mut codec = Self {
            antennas,
            block_len,
            source_dim: n,
            encoder,
            decoder: vec![0.0; n * c + n],
            power_scale: 1.0,
            ref_mean: Array1::zeros(n),
            ref_second_moment: Array2::zeros((n, n)),
        };
        codec.calibrate(reference)?;
        Ok(codec)
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    /// Channel bandwidth ratio `k / n`.
    pub fn cbr(&self) -> f64 {
        self.block_len as f64 / self.source_dim as f64
    }

    fn code_dim(&self) -> usize {
        2 * self.antennas * self.block_len
    }

    pub fn encoder_params(&self) -> &[f64] {
        &self.encoder
    }

    pub fn decoder_params(&self) -> &[f64] {
        &self.decoder
    }

    pub fn power_scale(&self) -> f64 {
        self.power_scale
    }

    pub fn enc_weight(&self) -> ArrayView2<'_, f64> {
        let (c, n) = (self.code_dim(), self.source_dim);
        ArrayView2::from_shape((c, n), &self.encoder[..c * n]).unwrap()
    }

    pub fn enc_bias(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.encoder[self.code_dim() * self.source_dim..])
    }

    pub fn dec_weight(&self) -> ArrayView2<'_, f64> {
        let (c, n) = (self.code_dim(), self.source_dim);
        ArrayView2::from_shape((n, c), &self.decoder[..c * n]).unwrap()
    }

    pub fn dec_bias(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.decoder[self.code_dim() * self.source_dim..])
    }

    pub fn set_decoder(&mut self, weight: ArrayView2<'_, f64>, bias: ArrayView1<'_, f64>) -> Result<()> {
        let (c, n) = (self.code_dim(), self.source_dim);
        if weight.shape() != [n, c] || bias.len() != n {
            return Err(Error::DimensionMismatch {
                op: "set_decoder",
                expected: (n, c),
                found: (weight.nrows(), weight.ncols()),
            });
        }
        self.decoder[..n * c].iter_mut().zip(weight.iter()).for_each(|(d, &w)| *d = w);
        self.decoder[n * c..].iter_mut().zip(bias.iter()).for_each(|(d, &b)| *d = b);
        Ok(())
    }

    pub fn set_encoder(&mut self, weight: ArrayView2<'_, f64>, bias: ArrayView1<'_, f64>) -> Result<()> {
        let (c, n) = (self.code_dim(), self.source_dim);
        if weight.shape() != [c, n] || bias.len() != c {
            return Err(Error::DimensionMismatch {
                op: "set_encoder",
                expected: (c, n),
                found: (weight.nrows(), weight.ncols()),
            });
        }
        self.encoder[..n * c].iter_mut().zip(weight.iter()).for_each(|(d, &w)| *d = w);
        self.encoder[n * c..].iter_mut().zip(bias.iter()).for_each(|(d, &b)| *d = b);
        self.power_scale = self.normalizer().0;
        Ok(())
    }

    /// Recomputes reference moments and the power normalizer.
    pub fn calibrate(&mut self, reference: &[Array1<f64>]) -> Result<()> {
        let n = self.source_dim;
        if reference.is_empty() || reference.iter().any(|s| s.len() != n) {
            return Err(Error::InvalidArgument("reference batch does not match source dimension".into()));
        }
        let mut mean = Array1::zeros(n);
        let mut second = Array2::zeros((n, n));
        for s in reference {
            mean += s;
            let col = s.view().insert_axis(ndarray::Axis(1));
            second += &col.dot(&col.t());
        }
        let count = reference.len() as f64;
        self.ref_mean = mean / count;
        self.ref_second_moment = second / count;
        self.power_scale = self.normalizer().0;
        Ok(())
    }

    /// `(P, Q)` for the current encoder and reference moments.
    fn normalizer(&self) -> (f64, f64) {
        let a = self.enc_weight();
        let b = self.enc_bias();
        let a_s2 = a.dot(&self.ref_second_moment);
        let trace: f64 = a_s2.rows().into_iter().zip(a.rows()).map(|(x, y)| x.dot(&y)).sum();
        let a_mu = a.dot(&self.ref_mean);
        let q = trace + 2.0 * b.dot(&a_mu) + b.dot(&b);
        (((self.antennas * self.block_len) as f64 / q).sqrt(), q)
    }

    fn encode_real(&self, s: ArrayView1<'_, f64>) -> Array1<f64> {
        (self.enc_weight().dot(&s) + self.enc_bias()) * self.power_scale
    }

    pub fn encode(&self, s: ArrayView1<'_, f64>) -> Result<SignalBlock> {
        if s.len() != self.source_dim {
            return Err(Error::DimensionMismatch {
                op: "encode",
                expected: (self.source_dim, 1),
                found: (s.len(), 1),
            });
        }
        let v = self.encode_real(s);
        CMatrix::from_real_pairs(self.antennas, self.block_len, v.as_slice().unwrap())
    }

    pub fn decode(&self, z_hat: &SignalBlock) -> Result<Array1<f64>> {
        z_hat.check_shape("decode", (self.antennas, self.block_len))?;
        let v = Array1::from(z_hat.to_real_pairs());
        Ok(self.dec_weight().dot(&v) + self.dec_bias())
    }

    /// Mean power per complex element of the encoder output over `batch`.
    pub fn mean_power(&self, batch: &[Array1<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            total += self.encode(s.view())?.norm_sqr();
        }
        Ok(total / (batch.len() * self.antennas * self.block_len) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (c, n) = (self.code_dim(), self.source_dim);
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), Value::from("toy_codec"));
        ck.meta.insert("antennas".into(), Value::from(self.antennas));
        ck.meta.insert("block_len".into(), Value::from(self.block_len));
        ck.meta.insert("source_dim".into(), Value::from(n));
        ck.meta.insert("cbr".into(), Value::from(self.cbr()));
        ck.arrays.push(NamedArray::new("encoder.weight", vec![c, n], self.encoder[..c * n].to_vec()));
        ck.arrays.push(NamedArray::new("encoder.bias", vec![c], self.encoder[c * n..].to_vec()));
        ck.arrays.push(NamedArray::new("encoder.power_scale", vec![1], vec![self.power_scale]));
        ck.arrays.push(NamedArray::new("decoder.weight", vec![n, c], self.decoder[..c * n].to_vec()));
        ck.arrays.push(NamedArray::new("decoder.bias", vec![n], self.decoder[c * n..].to_vec()));
        ck.arrays.push(NamedArray::new("reference.mean", vec![n], self.ref_mean.to_vec()));
        ck.arrays.push(NamedArray::new(
            "reference.second_moment",
            vec![n, n],
            self.ref_second_moment.iter().copied().collect(),
        ));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "toy_codec" {
            return Err(Error::Checkpoint("not a codec checkpoint".into()));
        }
        let antennas = ck.meta_f64("antennas")? as usize;
        let block_len = ck.meta_f64("block_len")? as usize;
        let n = ck.meta_f64("source_dim")? as usize;
        let c = 2 * antennas * block_len;
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let a = ck.array(name)?;
            if a.shape != shape {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, want {shape:?}", a.shape)));
            }
            Ok(a.data.clone())
        };
        let mut encoder = get("encoder.weight", &[c, n])?;
        encoder.extend(get("encoder.bias", &[c])?);
        let mut decoder = get("decoder.weight", &[n, c])?;
        decoder.extend(get("decoder.bias", &[n])?);
        Ok(Self {
            antennas,
            block_len,
            source_dim: n,
            encoder,
            decoder,
            power_scale: get("encoder.power_scale", &[1])?[0],
            ref_mean: Array1::from(get("reference.mean", &[n])?),
            ref_second_moment: Array2::from_shape_vec((n, n), get("reference.second_moment", &[n, n])?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        })
    }
}

/// Draws a channel for one block, resampling Rayleigh draws that are
/// numerically singular.
fn draw_channel<R: Rng + ?Sized>(mode: &ChannelMode, m: usize, rng: &mut R) -> ChannelRealization {
    match mode {
        ChannelMode::Fixed(ch) => ch.clone(),
        ChannelMode::Rayleigh => loop {
            let ch = sample_rayleigh_channel(m, rng);
            if ch.degraded().is_empty() {
                break ch;
            }
        },
    }
}

/// Runs `z` through precoding, the channel and the equalizer.
pub fn pass_channel<R: Rng + ?Sized>(
    z: &SignalBlock,
    ch: &ChannelRealization,
    sigma_sq: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SignalBlock, SubchannelProfile)> {
    let y = transmit(&precode(z, ch)?, ch, sigma_sq, rng)?;
    let profile = build_profile(ch, sigma_sq, sched);
    let y_eq = equalize_with_fallback(&y, ch, &profile, rng)?;
    Ok((y_eq, profile))
}

/// Squared reconstruction error `sum_b ||s_b - D y_b - c||^2 / B` and the
/// gradients for the encoder and decoder, where `y_b = z_b + noise_b` is
/// the equalized channel output (equalization leaves the signal untouched,
/// so `dy / dz = I`).
pub(crate) struct Stage1Grad {
    pub loss: f64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

pub(crate) fn stage1_loss_and_grad(codec: &ToyCodec, sources: &[Array1<f64>], noise: &[Array1<f64>]) -> Stage1Grad {
    let (c, n) = (codec.code_dim(), codec.source_dim);
    let batch = sources.len() as f64;
    let (p, q) = codec.normalizer();
    let a = codec.enc_weight();
    let b = codec.enc_bias();
    let d = codec.dec_weight();

    let mut g_a = Array2::<f64>::zeros((c, n));
    let mut g_b = Array1::<f64>::zeros(c);
    let mut g_d = Array2::<f64>::zeros((n, c));
    let mut g_c = Array1::<f64>::zeros(n);
    let mut g_p = 0.0;
    let mut loss = 0.0;

    for (s, nz) in sources.iter().zip(noise) {
        let u = a.dot(s) + b;
        let y = &u * p + nz;
        let s_hat = d.dot(&y) + codec.dec_bias();
        let err = &s_hat - s;
        loss += err.dot(&err) / batch;
        let g_s = err * (2.0 / batch);
        let y_col = y.view().insert_axis(ndarray::Axis(0));
        g_d += &g_s.view().insert_axis(ndarray::Axis(1)).dot(&y_col);
        g_c += &g_s;
        let g_z = d.t().dot(&g_s);
        g_p += g_z.dot(&u);
        let g_u = &g_z * p;
        g_a += &g_u.view().insert_axis(ndarray::Axis(1)).dot(&s.view().insert_axis(ndarray::Axis(0)));
        g_b += &g_u;
    }

    // Through P = sqrt(Mk / Q): dP/dQ = -P / (2Q).
    let g_q = g_p * (-p / (2.0 * q));
    let dq_da = a.dot(&codec.ref_second_moment) * 2.0
        + b.view().insert_axis(ndarray::Axis(1)).dot(&codec.ref_mean.view().insert_axis(ndarray::Axis(0))) * 2.0;
    let dq_db = (a.dot(&codec.ref_mean) + b) * 2.0;
    g_a.scaled_add(g_q, &dq_da);
    g_b.scaled_add(g_q, &dq_db);

    let mut encoder: Vec<f64> = g_a.iter().copied().collect();
    encoder.extend(g_b.iter());
    let mut decoder: Vec<f64> = g_d.iter().copied().collect();
    decoder.extend(g_c.iter());
    Stage1Grad { loss, encoder, decoder }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsccTrainReport {
    /// Mean per-sample squared error `||s - s_hat||^2` per epoch.
    pub epoch_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

fn check_training_inputs(codec: &ToyCodec, sources: &[Array1<f64>], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument("empty source set".into()));
    }
    if sources.iter().any(|s| s.len() != codec.source_dim) {
        return Err(Error::InvalidArgument("source dimension mismatch".into()));
    }
    Ok(())
}

/// Stage 1: joint encoder/decoder training through the MIMO chain without
/// the denoiser, SNR drawn per sample from `snr`.
pub fn stage1_train<R: Rng + ?Sized>(
    codec: &ToyCodec,
    sources: &[Array1<f64>],
    snr: SnrRange,
    channel: &ChannelMode,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ToyCodec, JsccTrainReport)> {
    check_training_inputs(codec, sources, cfg)?;
    let sched = NoiseSchedule::default();
    let mut codec = codec.clone();
    let iters = sources.len().div_ceil(cfg.batch_size);
    let lr_sched = CosineWarmup {
        peak: cfg.learning_rate,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.epochs * iters,
    };
    let mut opt_enc = Adam::new(codec.encoder.len());
    let mut opt_dec = Adam::new(codec.decoder.len());
    let mut report = JsccTrainReport {
        epoch_loss: Vec::new(),
        learning_rate: Vec::new(),
    };
    let m = codec.antennas;
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..iters {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut noise = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let s = &sources[rng.random_range(0..sources.len())];
                let z = codec.encode(s.view())?;
                let ch = draw_channel(channel, m, rng);
                let sigma_sq = snr_to_noise_power(snr.sample(rng), m, 1.0);
                let (y_eq, _) = pass_channel(&z, &ch, sigma_sq, &sched, rng)?;
                noise.push(Array1::from(y_eq.sub(&z)?.to_real_pairs()));
                batch.push(s.clone());
            }
            let g = stage1_loss_and_grad(&codec, &batch, &noise);
            if !g.loss.is_finite() {
                return Err(Error::Diverged { iteration, loss: g.loss });
            }
            lr = lr_sched.lr(iteration);
            opt_enc.step(&mut codec.encoder, &g.encoder, lr);
            opt_dec.step(&mut codec.decoder, &g.decoder, lr);
            codec.power_scale = codec.normalizer().0;
            sum += g.loss;
            iteration += 1;
        }
        report.epoch_loss.push(sum / iters as f64);
        report.learning_rate.push(lr);
    }
    Ok((codec, report))
}

/// Everything one block needs to go through the link: channel, noise,
/// and the sampler's randomness, all from per-sample streams.
fn denoised_block<P: EpsilonPredictor + ?Sized>(
    codec: &ToyCodec,
    s: &Array1<f64>,
    dm: Option<&P>,
    snr_db: f64,
    channel: &ChannelMode,
    sched: &NoiseSchedule,
    link_rng: &mut SimRng,
    sampler_rng: &mut SimRng,
) -> Result<SignalBlock> {
    let m = codec.antennas;
    let z = codec.encode(s.view())?;
    let ch = draw_channel(channel, m, link_rng);
    let sigma_sq = snr_to_noise_power(snr_db, m, 1.0);
    let (y_eq, profile) = pass_channel(&z, &ch, sigma_sq, sched, link_rng)?;
    match dm {
        Some(model) => Ok(denoise_with_profile(&y_eq, &ch.lambdas, &profile, model, sched, sampler_rng)?.0),
        None => Ok(y_eq),
    }
}

/// Stage 3: retrains only the decoder with the joint sampler between the
/// equalizer and the decoder. The encoder is left bit-exactly unchanged.
pub fn stage3_retrain<P, R>(
    codec: &ToyCodec,
    model: &P,
    sources: &[Array1<f64>],
    snr: SnrRange,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ToyCodec, JsccTrainReport)>
where
    P: EpsilonPredictor + Sync + ?Sized,
    R: Rng + ?Sized,
{
    check_training_inputs(codec, sources, cfg)?;
    let mut codec = codec.clone();
    let iters = sources.len().div_ceil(cfg.batch_size);
    let lr_sched = CosineWarmup {
        peak: cfg.learning_rate,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.epochs * iters,
    };
    let mut opt = Adam::new(codec.decoder.len());
    let mut report = JsccTrainReport {
        epoch_loss: Vec::new(),
        learning_rate: Vec::new(),
    };
    let (c, n) = (codec.code_dim(), codec.source_dim);
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..iters {
            let picks: Vec<(usize, f64)> = (0..cfg.batch_size)
                .map(|_| (rng.random_range(0..sources.len()), snr.sample(rng)))
                .collect();
            let base = rng.next_u64();
            let inputs: Vec<Array1<f64>> = picks
                .par_iter()
                .enumerate()
                .map(|(j, &(idx, snr_db))| {
                    let mut link = rng::stream(base, "stage3-link", j as u64);
                    let mut samp = rng::stream(base, "stage3-sampler", j as u64);
                    let z_hat = denoised_block(
                        &codec,
                        &sources[idx],
                        Some(model),
                        snr_db,
                        &ChannelMode::Rayleigh,
                        sched,
                        &mut link,
                        &mut samp,
                    )?;
                    Ok(Array1::from(z_hat.to_real_pairs()))
                })
                .collect::<Result<_>>()?;

            let batch = picks.len() as f64;
            let mut g_d = Array2::<f64>::zeros((n, c));
            let mut g_c = Array1::<f64>::zeros(n);
            let mut loss = 0.0;
            for ((idx, _), y) in picks.iter().zip(&inputs) {
                let err = codec.dec_weight().dot(y) + codec.dec_bias() - &sources[*idx];
                loss += err.dot(&err) / batch;
                let g = err * (2.0 / batch);
                g_d += &g.view().insert_axis(ndarray::Axis(1)).dot(&y.view().insert_axis(ndarray::Axis(0)));
                g_c += &g;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration, loss });
            }
            let mut grad: Vec<f64> = g_d.iter().copied().collect();
            grad.extend(g_c.iter());
            lr = lr_sched.lr(iteration);
            opt.step(&mut codec.decoder, &grad, lr);
            sum += loss;
            iteration += 1;
        }
        report.epoch_loss.push(sum / iters as f64);
        report.learning_rate.push(lr);
    }
    Ok((codec, report))
}

/// Mean squared reconstruction error per source dimension at one SNR.
///
/// Sample `j` uses link stream `(seed, "eval-link", j)` and sampler stream
/// `(seed, "eval-sampler", j)`, so runs with and without the denoiser see
/// identical channels and noise.
pub fn reconstruction_mse<P>(
    codec: &ToyCodec,
    dm: Option<&P>,
    sources: &[Array1<f64>],
    snr_db: f64,
    channel: &ChannelMode,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64>
where
    P: EpsilonPredictor + Sync + ?Sized,
{
    let errors: Vec<f64> = sources
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut link = rng::stream(seed, "eval-link", j as u64);
            let mut samp = rng::stream(seed, "eval-sampler", j as u64);
            let z_hat = denoised_block(codec, s, dm, snr_db, channel, sched, &mut link, &mut samp)?;
            let err = codec.decode(&z_hat)? - s;
            Ok(err.dot(&err))
        })
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / (sources.len() * codec.source_dim) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorModel;
    use crate::rng::seeded;

    fn small_setup(n: usize, m: usize, k: usize) -> (SourceModel, Vec<Array1<f64>>, ToyCodec) {
        let src = SourceModel::correlated_gaussian(n, 10.0, 1);
        let reference = src.sample_set(REFERENCE_BATCH, &mut seeded(2));
        let codec = ToyCodec::new(m, k, &reference, 3).unwrap();
        (src, reference, codec)
    }

    #[test]
    fn source_covariance_has_requested_spectrum() {
        let src = SourceModel::correlated_gaussian(16, 10.0, 4);
        let cov = src.covariance();
        let trace: f64 = cov.diag().sum();
        assert!((trace / 16.0 - 1.0).abs() < 1e-12);
        // Empirical covariance agrees.
        let set = src.sample_set(40_000, &mut seeded(1));
        let mut emp = Array2::<f64>::zeros((16, 16));
        for s in &set {
            let c = s.view().insert_axis(ndarray::Axis(1));
            emp += &c.dot(&c.t());
        }
        emp /= set.len() as f64;
        let worst = (&emp - &cov).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(worst < 0.03, "worst entry {worst}");
    }

    #[test]
    fn mixture_keeps_unit_average_variance() {
        let src = SourceModel::gaussian_mixture(8, 10.0, 1.5, 3);
        let trace: f64 = src.covariance().diag().sum();
        assert!((trace / 8.0 - 1.0).abs() < 1e-9, "{trace}");
        assert_eq!(src.dim(), 8);
    }

    #[test]
    fn reference_power_is_unit_and_cbr_exact() {
        let (_, reference, codec) = small_setup(64, 2, 16);
        let p = codec.mean_power(&reference).unwrap();
        assert!((p - 1.0).abs() < 0.01, "power {p}");
        assert_eq!(codec.cbr(), 16.0 / 64.0);
    }

    #[test]
    fn encoder_is_affine() {
        let (src, _, codec) = small_setup(8, 2, 2);
        let mut rng = seeded(5);
        let s = src.sample(&mut rng);
        let zero = Array1::zeros(8);
        let e0 = codec.encode(zero.view()).unwrap();
        let es = codec.encode(s.view()).unwrap();
        let s3 = &s * 3.0;
        let e3 = codec.encode(s3.view()).unwrap();
        let lhs = e3.sub(&e0).unwrap();
        let rhs = es.sub(&e0).unwrap().scale(3.0);
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() < 1e-12);
        // Zero bias: zero source maps to zero.
        assert!(e0.frobenius_norm() == 0.0);
        assert!(codec.encode(Array1::zeros(7).view()).is_err());
    }

    #[test]
    fn decoder_zero_input_gives_bias() {
        let (_, _, mut codec) = small_setup(8, 2, 2);
        let bias: Array1<f64> = (0..8).map(|i| i as f64).collect();
        let w = Array2::from_elem((8, 8), 0.3);
        codec.set_decoder(w.view(), bias.view()).unwrap();
        let out = codec.decode(&CMatrix::zeros(2, 2)).unwrap();
        assert_eq!(out, bias);
        assert!(codec.decode(&CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn orthogonal_codec_round_trips_noiselessly() {
        let (src, reference, mut codec) = small_setup(8, 2, 2);
        let q = random_orthogonal(8, &mut seeded(9));
        codec.set_encoder(q.view(), Array1::zeros(8).view()).unwrap();
        codec.calibrate(&reference).unwrap();
        // Least-squares decoder of an orthogonal map is its scaled transpose.
        let d = q.t().to_owned() / codec.power_scale();
        codec.set_decoder(d.view(), Array1::zeros(8).view()).unwrap();
        let sched = NoiseSchedule::default();
        let test = src.sample_set(200, &mut seeded(10));
        let mse = reconstruction_mse::<PredictorModel>(&codec, None, &test, f64::INFINITY, &ChannelMode::Rayleigh, &sched, 1).unwrap();
        assert!(mse <= 1e-10, "mse {mse}");
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let (src, _, mut codec) = small_setup(5, 1, 2);
        let mut rng = seeded(11);
        let d = Array2::from_shape_fn((5, 4), |_| standard_normal(&mut rng) * 0.3);
        let c = Array1::from_shape_fn(5, |_| standard_normal(&mut rng) * 0.1);
        codec.set_decoder(d.view(), c.view()).unwrap();
        let b = Array1::from_shape_fn(4, |_| standard_normal(&mut rng) * 0.2);
        let a = codec.enc_weight().to_owned();
        codec.set_encoder(a.view(), b.view()).unwrap();
        let sources = src.sample_set(6, &mut rng);
        let noise: Vec<_> = (0..6).map(|_| Array1::from_shape_fn(4, |_| standard_normal(&mut rng) * 0.3)).collect();
        let g = stage1_loss_and_grad(&codec, &sources, &noise);

        let h = 1e-6;
        let loss_at = |codec: &ToyCodec| stage1_loss_and_grad(codec, &sources, &noise).loss;
        for i in 0..codec.encoder.len() {
            let mut up = codec.clone();
            up.encoder[i] += h;
            up.power_scale = up.normalizer().0;
            let mut dn = codec.clone();
            dn.encoder[i] -= h;
            dn.power_scale = dn.normalizer().0;
            let num = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let denom = num.abs().max(g.encoder[i].abs()).max(1e-6);
            assert!((num - g.encoder[i]).abs() / denom < 1e-5, "enc {i}: {num} vs {}", g.encoder[i]);
        }
        for i in 0..codec.decoder.len() {
            let mut up = codec.clone();
            up.decoder[i] += h;
            let mut dn = codec.clone();
            dn.decoder[i] -= h;
            let num = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let denom = num.abs().max(g.decoder[i].abs()).max(1e-6);
            assert!((num - g.decoder[i]).abs() / denom < 1e-5, "dec {i}");
        }
    }

    #[test]
    fn stage3_with_zero_epochs_keeps_decoder() {
        let (src, _, codec) = small_setup(8, 2, 2);
        let set = src.sample_set(16, &mut seeded(1));
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (out, report) = stage3_retrain(
            &codec,
            &PredictorModel::analytic(1.0),
            &set,
            SnrRange::new(0.0, 5.0).unwrap(),
            &cfg,
            &NoiseSchedule::default(),
            &mut seeded(2),
        )
        .unwrap();
        assert_eq!(out, codec);
        assert!(report.epoch_loss.is_empty());
    }

    #[test]
    fn stage3_never_touches_encoder_and_is_reproducible() {
        let (src, _, codec) = small_setup(8, 2, 2);
        let set = src.sample_set(32, &mut seeded(1));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            stage3_retrain(
                &codec,
                &PredictorModel::analytic(1.0),
                &set,
                SnrRange::new(0.0, 5.0).unwrap(),
                &cfg,
                &NoiseSchedule::default(),
                &mut seeded(2),
            )
            .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a.encoder_params(), codec.encoder_params());
        assert_eq!(a.power_scale(), codec.power_scale());
        assert_ne!(a.decoder_params(), codec.decoder_params());
    }

    #[test]
    fn snr_range_sampling() {
        let mut rng = seeded(1);
        assert_eq!(SnrRange::fixed(f64::INFINITY).sample(&mut rng), f64::INFINITY);
        assert_eq!(SnrRange::fixed(3.0).sample(&mut rng), 3.0);
        let r = SnrRange::new(0.0, 20.0).unwrap();
        for _ in 0..100 {
            let v = r.sample(&mut rng);
            assert!((0.0..=20.0).contains(&v));
        }
        assert!(SnrRange::new(5.0, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, _, codec) = small_setup(8, 2, 2);
        let back = ToyCodec::from_checkpoint(&Checkpoint::from_json(&codec.to_checkpoint().to_json()).unwrap()).unwrap();
        assert_eq!(back, codec);
    }
}
