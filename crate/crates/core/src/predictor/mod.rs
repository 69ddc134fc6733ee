//! Noise predictors `eps_theta(X_t, Sigma, t)`.
//!
//! Two kinds are provided: the closed-form posterior-mean predictor for an
//! i.i.d. complex Gaussian source, and a trainable feed-forward network
//! conditioned on the singular values and the diffusion step.

mod mlp;
mod train;

use ndarray::Array2;
use rand::Rng;
use serde_json::Value;

pub use mlp::{finite_difference_check, Activation, Mlp};
pub use train::{train_predictor, EpochStats, TrainConfig, TrainOutcome};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::complex::{CMatrix, SignalBlock};
use crate::error::{Error, Result};
use crate::rng::complex_gaussian;
use crate::schedule::NoiseSchedule;

/// One predictor evaluation: the full `M x k` state at step `t`.
#[derive(Debug, Clone, Copy)]
pub struct PredictorQuery<'a> {
    pub x_t: &'a SignalBlock,
    /// Singular values of the channel, descending.
    pub lambdas: &'a [f64],
    pub t: usize,
    pub alpha_bar_t: f64,
    pub total_steps: usize,
}

impl<'a> PredictorQuery<'a> {
    pub fn new(x_t: &'a SignalBlock, lambdas: &'a [f64], t: usize, sched: &NoiseSchedule) -> Self {
        Self {
            x_t,
            lambdas,
            t,
            alpha_bar_t: sched.alpha_bar(t),
            total_steps: sched.steps(),
        }
    }
}

pub trait EpsilonPredictor {
    fn predict_epsilon(&self, q: &PredictorQuery<'_>) -> Result<SignalBlock>;
}

/// Closed-form `E[eps | x_t]` when the clean signal is i.i.d.
/// `CN(0, source_power)`:
/// `sqrt(1 - ab) * x_t / (ab * source_power + 1 - ab)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticGaussian {
    pub source_power: f64,
}

impl AnalyticGaussian {
    pub fn gain(&self, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() / (alpha_bar * self.source_power + 1.0 - alpha_bar)
    }
}

impl EpsilonPredictor for AnalyticGaussian {
    fn predict_epsilon(&self, q: &PredictorQuery<'_>) -> Result<SignalBlock> {
        Ok(q.x_t.scale(self.gain(q.alpha_bar_t)))
    }
}

/// Feed-forward predictor for a fixed `M x k` block size.
///
/// Input: `x_t` as interleaved real pairs (`2Mk` values), then
/// `lambda_1..lambda_M`, `t / T` and `alpha_bar_t`. Output: `2Mk` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    net: Mlp,
    antennas: usize,
    block_len: usize,
}

impl FeedForward {
    pub fn new(antennas: usize, block_len: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let widths = Self::widths_for(antennas, block_len, hidden);
        Self {
            net: Mlp::new(&widths, activation, seed),
            antennas,
            block_len,
        }
    }

    pub fn from_net(net: Mlp, antennas: usize, block_len: usize) -> Result<Self> {
        let expected = Self::widths_for(antennas, block_len, &[]);
        if net.input_dim() != expected[0] || net.output_dim() != expected[1] {
            return Err(Error::InvalidArgument(format!(
                "network {:?} does not fit a {antennas}x{block_len} block",
                net.widths()
            )));
        }
        Ok(Self {
            net,
            antennas,
            block_len,
        })
    }

    fn widths_for(antennas: usize, block_len: usize, hidden: &[usize]) -> Vec<usize> {
        let signal = 2 * antennas * block_len;
        let mut w = vec![signal + antennas + 2];
        w.extend_from_slice(hidden);
        w.push(signal);
        w
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn check_query(&self, q: &PredictorQuery<'_>) -> Result<()> {
        q.x_t.check_shape("predict_epsilon", (self.antennas, self.block_len))?;
        if q.lambdas.len() != self.antennas {
            return Err(Error::DimensionMismatch {
                op: "predict_epsilon",
                expected: (self.antennas, 1),
                found: (q.lambdas.len(), 1),
            });
        }
        Ok(())
    }

    /// Writes the network input for `q` into `row`.
    fn encode_features(&self, q: &PredictorQuery<'_>, row: &mut [f64]) {
        let mut i = 0;
        for c in q.x_t.as_slice() {
            row[i] = c.re;
            row[i + 1] = c.im;
            i += 2;
        }
        for &l in q.lambdas {
            row[i] = l;
            i += 1;
        }
        row[i] = q.t as f64 / q.total_steps as f64;
        row[i + 1] = q.alpha_bar_t;
    }

    pub fn features(&self, queries: &[PredictorQuery<'_>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((queries.len(), self.net.input_dim()));
        for (q, mut row) in queries.iter().zip(x.rows_mut()) {
            self.check_query(q)?;
            self.encode_features(q, row.as_slice_mut().expect("row-major"));
        }
        Ok(x)
    }

    pub fn predict_batch(&self, queries: &[PredictorQuery<'_>]) -> Result<Vec<SignalBlock>> {
        let x = self.features(queries)?;
        let out = self.net.forward(x.view());
        out.rows()
            .into_iter()
            .map(|r| CMatrix::from_real_pairs(self.antennas, self.block_len, &r.to_vec()))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), Value::from("feed_forward"));
        ck.meta.insert("antennas".into(), Value::from(self.antennas));
        ck.meta.insert("block_len".into(), Value::from(self.block_len));
        ck.meta.insert("widths".into(), Value::from(self.net.widths().to_vec()));
        ck.meta.insert("activation".into(), Value::from(self.net.activation().name()));
        let w = self.net.widths();
        for l in 0..self.net.n_layers() {
            let (w_off, b_off) = self.net.offsets(l);
            let p = self.net.params();
            ck.arrays.push(NamedArray::new(
                format!("layer{l}.weight"),
                vec![w[l + 1], w[l]],
                p[w_off..b_off].to_vec(),
            ));
            ck.arrays.push(NamedArray::new(
                format!("layer{l}.bias"),
                vec![w[l + 1]],
                p[b_off..b_off + w[l + 1]].to_vec(),
            ));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "feed_forward" {
            return Err(Error::Checkpoint("not a feed-forward predictor".into()));
        }
        let widths = ck.meta_usizes("widths")?;
        let activation = Activation::from_name(ck.meta_str("activation")?)
            .ok_or_else(|| Error::Checkpoint("unknown activation".into()))?;
        let antennas = ck.meta_f64("antennas")? as usize;
        let block_len = ck.meta_f64("block_len")? as usize;
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Checkpoint(format!("bad widths {widths:?}")));
        }
        let mut params = Vec::new();
        for l in 0..widths.len() - 1 {
            let w = ck.array(&format!("layer{l}.weight"))?;
            let b = ck.array(&format!("layer{l}.bias"))?;
            if w.shape != [widths[l + 1], widths[l]] || b.shape != [widths[l + 1]] {
                return Err(Error::Checkpoint(format!("layer {l} shape mismatch")));
            }
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        let net = Mlp::from_params(&widths, activation, params)
            .ok_or_else(|| Error::Checkpoint("parameter count mismatch".into()))?;
        Self::from_net(net, antennas, block_len)
    }
}

impl EpsilonPredictor for FeedForward {
    fn predict_epsilon(&self, q: &PredictorQuery<'_>) -> Result<SignalBlock> {
        Ok(self.predict_batch(std::slice::from_ref(q))?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorModel {
    AnalyticGaussian(AnalyticGaussian),
    FeedForward(FeedForward),
}

impl PredictorModel {
    pub fn analytic(source_power: f64) -> Self {
        PredictorModel::AnalyticGaussian(AnalyticGaussian { source_power })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PredictorModel::AnalyticGaussian(_) => "analytic_gaussian",
            PredictorModel::FeedForward(_) => "feed_forward",
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            PredictorModel::AnalyticGaussian(a) => {
                let mut ck = Checkpoint::default();
                ck.meta.insert("kind".into(), Value::from("analytic_gaussian"));
                ck.meta.insert("source_power".into(), Value::from(a.source_power));
                ck
            }
            PredictorModel::FeedForward(f) => f.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta_str("kind")? {
            "analytic_gaussian" => Ok(Self::analytic(ck.meta_f64("source_power")?)),
            "feed_forward" => Ok(PredictorModel::FeedForward(FeedForward::from_checkpoint(ck)?)),
            other => Err(Error::Checkpoint(format!("unknown predictor kind `{other}`"))),
        }
    }
}

impl EpsilonPredictor for PredictorModel {
    fn predict_epsilon(&self, q: &PredictorQuery<'_>) -> Result<SignalBlock> {
        match self {
            PredictorModel::AnalyticGaussian(a) => a.predict_epsilon(q),
            PredictorModel::FeedForward(f) => f.predict_epsilon(q),
        }
    }
}

/// Monte Carlo estimate of the training objective
/// `E ||eps - eps_theta(X_t, Sigma, t)||^2`, normalized per complex element
/// and averaged over the batch.
pub fn training_loss<P: EpsilonPredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    z_batch: &[SignalBlock],
    lambdas_batch: &[Vec<f64>],
    t_batch: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if z_batch.is_empty() || z_batch.len() != lambdas_batch.len() || z_batch.len() != t_batch.len() {
        return Err(Error::InvalidArgument("batch must be nonempty and consistent".into()));
    }
    let mut total = 0.0;
    for ((z, lambdas), &t) in z_batch.iter().zip(lambdas_batch).zip(t_batch) {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let eps = CMatrix::from_fn(z.rows(), z.cols(), |_, _| complex_gaussian(rng, 1.0));
        let x_t = z.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?;
        let pred = model.predict_epsilon(&PredictorQuery::new(&x_t, lambdas, t, sched))?;
        total += eps.sub(&pred)?.norm_sqr() / (z.rows() * z.cols()) as f64;
    }
    Ok(total / z_batch.len() as f64)
}

/// Backpropagated vs finite-difference gradient of the squared-error loss
/// on `(queries, targets)`; returns the worst relative error.
pub fn gradient_check(model: &FeedForward, queries: &[PredictorQuery<'_>], targets: &[SignalBlock]) -> Result<f64> {
    if queries.len() != targets.len() || queries.is_empty() {
        return Err(Error::InvalidArgument("need one target per query".into()));
    }
    let x = model.features(queries)?;
    let mut y = Array2::zeros((targets.len(), model.net.output_dim()));
    for (t, mut row) in targets.iter().zip(y.rows_mut()) {
        t.check_shape("gradient_check", (model.antennas, model.block_len))?;
        row.as_slice_mut().unwrap().copy_from_slice(&t.to_real_pairs());
    }
    let scale = 1.0 / (queries.len() * model.antennas * model.block_len) as f64;
    Ok(finite_difference_check(&model.net, x.view(), y.view(), scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_rayleigh_channel;
    use crate::rng::seeded;

    fn gaussian_block<R: Rng>(rng: &mut R, m: usize, k: usize) -> CMatrix {
        CMatrix::from_fn(m, k, |_, _| complex_gaussian(rng, 1.0))
    }

    #[test]
    fn analytic_unit_source_is_sqrt_one_minus_alpha_bar() {
        let sched = NoiseSchedule::default();
        let mut rng = seeded(1);
        let x = gaussian_block(&mut rng, 2, 5);
        let lambdas = [1.5, 0.5];
        let model = PredictorModel::analytic(1.0);
        for t in [1, 10, 500, 1000] {
            let q = PredictorQuery::new(&x, &lambdas, t, &sched);
            let out = model.predict_epsilon(&q).unwrap();
            let expect = x.scale((1.0 - sched.alpha_bar(t)).sqrt());
            assert!(out.sub(&expect).unwrap().frobenius_norm() < 1e-14);
        }
        let zero = CMatrix::zeros(2, 5);
        let q = PredictorQuery::new(&zero, &lambdas, 3, &sched);
        assert_eq!(model.predict_epsilon(&q).unwrap(), zero);
    }

    #[test]
    fn analytic_gain_matches_regression_on_samples() {
        // Least-squares slope of eps on x_t over Monte Carlo pairs.
        let mut rng = seeded(2);
        for (power, ab) in [(1.0, 0.3), (2.5, 0.7), (0.4, 0.9)] {
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for _ in 0..1_000_000 {
                let z = complex_gaussian(&mut rng, power);
                let e = complex_gaussian(&mut rng, 1.0);
                let x = z * f64::sqrt(ab) + e * f64::sqrt(1.0 - ab);
                sxy += (x.conj() * e).re;
                sxx += x.norm_sqr();
            }
            let slope = sxy / sxx;
            let gain = AnalyticGaussian { source_power: power }.gain(ab);
            assert!((slope / gain - 1.0).abs() < 0.01, "slope {slope} gain {gain}");
        }
    }

    proptest::proptest! {
        #[test]
        fn analytic_predictor_is_linear(a in -5.0f64..5.0, t in 1usize..=1000, seed in 0u64..1000) {
            let sched = NoiseSchedule::default();
            let mut rng = seeded(seed);
            let x = gaussian_block(&mut rng, 2, 3);
            let lambdas = [1.0, 0.2];
            let model = PredictorModel::analytic(1.3);
            let ax = x.scale(a);
            let lhs = model.predict_epsilon(&PredictorQuery::new(&ax, &lambdas, t, &sched)).unwrap();
            let rhs = model.predict_epsilon(&PredictorQuery::new(&x, &lambdas, t, &sched)).unwrap().scale(a);
            proptest::prop_assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
        }
    }

    #[test]
    fn oracle_loss_equals_conditional_variance() {
        let sched = NoiseSchedule::default();
        let mut rng = seeded(3);
        for (power, t) in [(1.0, 200usize), (1.0, 600), (2.0, 300)] {
            let n = 4000;
            let zs: Vec<_> = (0..n)
                .map(|_| CMatrix::from_fn(2, 16, |_, _| complex_gaussian(&mut rng, power)))
                .collect();
            let lambdas = vec![vec![1.0, 0.5]; n];
            let ts = vec![t; n];
            let model = PredictorModel::analytic(power);
            let loss = training_loss(&model, &zs, &lambdas, &ts, &sched, &mut rng).unwrap();
            let ab = sched.alpha_bar(t);
            let expect = ab * power / (ab * power + 1.0 - ab);
            assert!((loss / expect - 1.0).abs() < 0.02, "t={t} loss={loss} expect={expect}");
        }
    }

    #[test]
    fn zero_model_loss_is_unit() {
        let sched = NoiseSchedule::default();
        let mut rng = seeded(4);
        let n = 4000;
        let zs: Vec<_> = (0..n).map(|_| gaussian_block(&mut rng, 2, 16)).collect();
        let lambdas = vec![vec![1.0, 0.5]; n];
        let ts: Vec<usize> = (0..n).map(|i| 1 + i % 1000).collect();
        let zero = FeedForward::from_net(Mlp::zeros(&[2 * 32 + 4, 8, 64], Activation::Silu), 2, 16).unwrap();
        let loss = training_loss(&zero, &zs, &lambdas, &ts, &sched, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.01, "loss {loss}");
        assert!(loss >= 0.0);
        assert!(training_loss(&zero, &[], &[], &[], &sched, &mut rng).is_err());
    }

    #[test]
    fn feed_forward_zero_weights_output_bias() {
        let mut ff = FeedForward::from_net(Mlp::zeros(&[2 * 2 * 3 + 4, 5, 12], Activation::Silu), 2, 3).unwrap();
        let (_, b_off) = ff.net.offsets(1);
        for (j, p) in ff.net.params_mut()[b_off..].iter_mut().enumerate() {
            *p = j as f64 * 0.1;
        }
        let sched = NoiseSchedule::default();
        let mut rng = seeded(5);
        let x = gaussian_block(&mut rng, 2, 3);
        let out = ff.predict_epsilon(&PredictorQuery::new(&x, &[1.0, 0.1], 7, &sched)).unwrap();
        let expect: Vec<f64> = (0..12).map(|j| j as f64 * 0.1).collect();
        assert_eq!(out.to_real_pairs(), expect);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let ff = FeedForward::new(2, 3, &[4], Activation::Silu, 0);
        let sched = NoiseSchedule::default();
        let x = CMatrix::zeros(2, 4);
        assert!(ff.predict_epsilon(&PredictorQuery::new(&x, &[1.0, 0.1], 7, &sched)).is_err());
        let x = CMatrix::zeros(2, 3);
        assert!(ff.predict_epsilon(&PredictorQuery::new(&x, &[1.0], 7, &sched)).is_err());
    }

    #[test]
    fn prediction_is_pure() {
        let ff = FeedForward::new(2, 4, &[16, 16], Activation::Silu, 8);
        let sched = NoiseSchedule::default();
        let mut rng = seeded(6);
        let x = gaussian_block(&mut rng, 2, 4);
        let q = PredictorQuery::new(&x, &[2.0, 0.3], 40, &sched);
        assert_eq!(ff.predict_epsilon(&q).unwrap(), ff.predict_epsilon(&q).unwrap());
    }

    #[test]
    fn gradient_check_on_small_network() {
        let ff = FeedForward::new(2, 2, &[8, 8], Activation::Silu, 21);
        let sched = NoiseSchedule::default();
        let mut rng = seeded(7);
        let xs: Vec<_> = (0..4).map(|_| gaussian_block(&mut rng, 2, 2)).collect();
        let targets: Vec<_> = (0..4).map(|_| gaussian_block(&mut rng, 2, 2)).collect();
        let chans: Vec<_> = (0..4).map(|_| sample_rayleigh_channel(2, &mut rng)).collect();
        let queries: Vec<_> = xs
            .iter()
            .zip(&chans)
            .enumerate()
            .map(|(i, (x, ch))| PredictorQuery::new(x, &ch.lambdas, 1 + 250 * i, &sched))
            .collect();
        let err = gradient_check(&ff, &queries, &targets).unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let ff = PredictorModel::FeedForward(FeedForward::new(2, 3, &[6, 5], Activation::Softplus, 4));
        let back = PredictorModel::from_checkpoint(&Checkpoint::from_json(&ff.to_checkpoint().to_json()).unwrap()).unwrap();
        assert_eq!(ff, back);
        let a = PredictorModel::analytic(0.8);
        assert_eq!(PredictorModel::from_checkpoint(&a.to_checkpoint()).unwrap(), a);
    }
}
