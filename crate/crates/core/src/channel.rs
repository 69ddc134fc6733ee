//! Rayleigh block-fading MIMO channel with SVD precoding and equalization.
//!
//! With `H = U diag(lambda) V^H`, transmitting `W = V Z` and equalizing
//! with `diag(1/lambda) U^H` turns the link into `M` parallel scalar
//! sub-channels `y'_i = z_i + n'_i` whose noise power is
//! `sigma^2 / lambda_i^2`.

use rand::Rng;

use crate::complex::{CMatrix, SignalBlock};
use crate::error::{Error, Result};
use crate::rng::complex_gaussian;
use crate::schedule::NoiseSchedule;
use crate::svd::svd;

/// Singular values below this mark a sub-channel as degraded.
pub const SINGULAR_THRESHOLD: f64 = 1e-9;

/// A channel matrix together with its singular value decomposition.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: CMatrix,
    pub u: CMatrix,
    pub v: CMatrix,
    /// Singular values, descending.
    pub lambdas: Vec<f64>,
}

impl ChannelRealization {
    pub fn from_matrix(h: CMatrix) -> Result<Self> {
        let s = svd(&h)?;
        Ok(Self {
            h,
            u: s.u,
            v: s.v,
            lambdas: s.singular,
        })
    }

    pub fn identity(m: usize) -> Self {
        Self::from_matrix(CMatrix::identity(m)).expect("identity decomposes")
    }

    pub fn antennas(&self) -> usize {
        self.lambdas.len()
    }

    /// Indices of sub-channels whose singular value is below
    /// [`SINGULAR_THRESHOLD`].
    pub fn degraded(&self) -> Vec<usize> {
        self.lambdas
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < SINGULAR_THRESHOLD)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draws `H` with i.i.d. `CN(0, 1)` entries and decomposes it.
pub fn sample_rayleigh_channel<R: Rng + ?Sized>(m: usize, rng: &mut R) -> ChannelRealization {
    assert!(m >= 1, "need at least one antenna");
    let h = CMatrix::from_fn(m, m, |_, _| complex_gaussian(rng, 1.0));
    ChannelRealization::from_matrix(h).expect("SVD of a finite Gaussian matrix")
}

/// Per-complex-element noise power for a channel SNR in dB, where the
/// signal power is `P_s = M * p_elem`. `+inf` dB gives a noiseless link.
pub fn snr_to_noise_power(snr_db: f64, m: usize, p_elem: f64) -> f64 {
    m as f64 * p_elem * 10f64.powf(-snr_db / 10.0)
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// `W = V Z`.
pub fn precode(z: &SignalBlock, ch: &ChannelRealization) -> Result<SignalBlock> {
    ch.v.matmul(z)
}

/// `Y = H W + N`, `N` i.i.d. `CN(0, sigma_sq)`.
pub fn transmit<R: Rng + ?Sized>(
    w: &SignalBlock,
    ch: &ChannelRealization,
    sigma_sq: f64,
    rng: &mut R,
) -> Result<SignalBlock> {
    if !(sigma_sq >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise power {sigma_sq} < 0")));
    }
    let mut y = ch.h.matmul(w)?;
    if sigma_sq > 0.0 {
        for v in y.as_mut_slice() {
            *v += complex_gaussian(rng, sigma_sq);
        }
    }
    Ok(y)
}

fn equalize_rows(y: &SignalBlock, ch: &ChannelRealization) -> Result<SignalBlock> {
    let m = ch.antennas();
    if y.rows() != m {
        return Err(Error::DimensionMismatch {
            op: "equalize",
            expected: (m, y.cols()),
            found: y.shape(),
        });
    }
    let mut out = ch.u.adjoint().matmul(y)?;
    for (i, &l) in ch.lambdas.iter().enumerate() {
        let inv = if l < SINGULAR_THRESHOLD { 0.0 } else { 1.0 / l };
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// `Y' = diag(1/lambda) U^H Y`. Fails if any sub-channel is degraded.
pub fn equalize(y: &SignalBlock, ch: &ChannelRealization) -> Result<SignalBlock> {
    let degraded = ch.degraded();
    if !degraded.is_empty() {
        return Err(Error::SingularChannel { subchannels: degraded });
    }
    equalize_rows(y, ch)
}

/// Like [`equalize`], but rows of degraded sub-channels are replaced by a
/// pure-noise surrogate `sqrt(1 + sigma_c^2) * CN(0, 1)`, where `sigma_c^2`
/// is the clamped effective noise power from `profile`. After
/// normalization such a row is a unit complex Gaussian, the input the
/// sampler expects at step `T`.
pub fn equalize_with_fallback<R: Rng + ?Sized>(
    y: &SignalBlock,
    ch: &ChannelRealization,
    profile: &SubchannelProfile,
    rng: &mut R,
) -> Result<SignalBlock> {
    let mut out = equalize_rows(y, ch)?;
    for i in 0..profile.len() {
        if profile.degraded[i] {
            let scale = (1.0 + profile.sigma_sq_eff[i]).sqrt();
            for v in out.row_mut(i) {
                *v = complex_gaussian(rng, 1.0) * scale;
            }
        }
    }
    Ok(out)
}

/// Per-sub-channel noise statistics and sampler entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct SubchannelProfile {
    /// Effective noise power `sigma^2 / lambda_i^2` per complex element.
    pub sigma_sq_eff: Vec<f64>,
    /// `1 / sqrt(1 + sigma_i^2)`.
    pub norm_factor: Vec<f64>,
    /// Effective sampling step per sub-channel, in `1..=T`.
    pub m_steps: Vec<usize>,
    pub degraded: Vec<bool>,
}

impl SubchannelProfile {
    pub fn from_lambdas(lambdas: &[f64], sigma_sq: f64, sched: &NoiseSchedule) -> Self {
        let t_max = sched.steps();
        let mut p = Self {
            sigma_sq_eff: Vec::with_capacity(lambdas.len()),
            norm_factor: Vec::with_capacity(lambdas.len()),
            m_steps: Vec::with_capacity(lambdas.len()),
            degraded: Vec::with_capacity(lambdas.len()),
        };
        for &l in lambdas {
            let degraded = l < SINGULAR_THRESHOLD;
            let s = if degraded {
                sched.noise_to_signal(t_max)
            } else {
                sigma_sq / (l * l)
            };
            p.sigma_sq_eff.push(s);
            p.norm_factor.push(1.0 / (1.0 + s).sqrt());
            p.m_steps.push(if degraded { t_max } else { sched.effective_step(s) });
            p.degraded.push(degraded);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.m_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_steps.is_empty()
    }

    pub fn m_max(&self) -> usize {
        self.m_steps.iter().copied().max().unwrap_or(1)
    }
}

pub fn build_profile(ch: &ChannelRealization, sigma_sq: f64, sched: &NoiseSchedule) -> SubchannelProfile {
    SubchannelProfile::from_lambdas(&ch.lambdas, sigma_sq, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use num_complex::Complex64;

    fn random_block<R: Rng>(rng: &mut R, m: usize, k: usize) -> CMatrix {
        CMatrix::from_fn(m, k, |_, _| complex_gaussian(rng, 1.0))
    }

    fn naive_matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..a.cols() {
                    acc += a[(i, l)] * b[(l, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_noise_power(0.0, 1, 1.0), 1.0);
        assert!((snr_to_noise_power(10.0, 2, 1.0) - 0.2).abs() < 1e-15);
        assert!((snr_to_noise_power(20.0, 2, 1.0) - 0.02).abs() < 1e-15);
        assert_eq!(snr_to_noise_power(f64::INFINITY, 2, 1.0), 0.0);
        assert!((db(10.0) - 10.0).abs() < 1e-15);
        assert!((db(100.0) - 20.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_channel() {
        let mut rng = seeded(2);
        let ch = sample_rayleigh_channel(1, &mut rng);
        let h = ch.h[(0, 0)];
        assert!((ch.lambdas[0] - h.norm()).abs() < 1e-14);
        assert_eq!(ch.v[(0, 0)], Complex64::new(1.0, 0.0));
        assert!((ch.u[(0, 0)].norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn precoding_is_unitary_and_matches_naive_product() {
        let mut rng = seeded(3);
        let ch = sample_rayleigh_channel(2, &mut rng);
        let z = random_block(&mut rng, 2, 4);
        let w = precode(&z, &ch).unwrap();
        assert!(w.sub(&naive_matmul(&ch.v, &z)).unwrap().frobenius_norm() < 1e-14);
        assert!((w.frobenius_norm() - z.frobenius_norm()).abs() <= 1e-10 * z.frobenius_norm());

        let id = ChannelRealization::identity(2);
        assert_eq!(precode(&z, &id).unwrap(), z);
        assert!(precode(&random_block(&mut rng, 3, 4), &ch).is_err());
    }

    #[test]
    fn noiseless_transmission_is_exact_and_round_trips() {
        let mut rng = seeded(4);
        let ch = sample_rayleigh_channel(3, &mut rng);
        let z = random_block(&mut rng, 3, 8);
        let w = precode(&z, &ch).unwrap();
        let y = transmit(&w, &ch, 0.0, &mut rng).unwrap();
        assert_eq!(y, ch.h.matmul(&w).unwrap());
        let zr = equalize(&y, &ch).unwrap();
        assert!(zr.sub(&z).unwrap().frobenius_norm() <= 1e-9 * z.frobenius_norm());
        assert!(transmit(&w, &ch, -1.0, &mut rng).is_err());
    }

    #[test]
    fn transmission_is_reproducible() {
        let mut a = seeded(9);
        let mut b = seeded(9);
        let ch = sample_rayleigh_channel(2, &mut a);
        let _ = sample_rayleigh_channel(2, &mut b);
        let w = CMatrix::identity(2);
        assert_eq!(
            transmit(&w, &ch, 0.3, &mut a).unwrap(),
            transmit(&w, &ch, 0.3, &mut b).unwrap()
        );
    }

    #[test]
    fn pure_noise_output_has_requested_variance() {
        let mut rng = seeded(10);
        let ch = sample_rayleigh_channel(2, &mut rng);
        let w = CMatrix::zeros(2, 60_000);
        let y = transmit(&w, &ch, 0.7, &mut rng).unwrap();
        let var = y.norm_sqr() / 120_000.0;
        assert!((var / 0.7 - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn equalization_identity_holds() {
        let mut rng = seeded(12);
        for _ in 0..200 {
            let ch = sample_rayleigh_channel(2, &mut rng);
            let z = random_block(&mut rng, 2, 6);
            let n = CMatrix::from_fn(2, 6, |_, _| complex_gaussian(&mut rng, 0.5));
            let y = ch.h.matmul(&precode(&z, &ch).unwrap()).unwrap().add(&n).unwrap();
            let lhs = equalize(&y, &ch).unwrap().sub(&z).unwrap();
            let uh_n = ch.u.adjoint().matmul(&n).unwrap();
            let rhs = CMatrix::from_fn(2, 6, |i, j| uh_n[(i, j)] / ch.lambdas[i]);
            let diff = lhs.sub(&rhs).unwrap().frobenius_norm();
            assert!(diff <= 1e-9 * rhs.frobenius_norm().max(1.0), "diff {diff}");
        }
    }

    #[test]
    fn per_subchannel_residual_matches_closed_form() {
        let mut rng = seeded(13);
        let ch = sample_rayleigh_channel(2, &mut rng);
        let sigma_sq = 0.3;
        let k = 100_000;
        let z = random_block(&mut rng, 2, k);
        let y = transmit(&precode(&z, &ch).unwrap(), &ch, sigma_sq, &mut rng).unwrap();
        let r = equalize(&y, &ch).unwrap().sub(&z).unwrap();
        for i in 0..2 {
            let emp = r.row_norm_sqr(i) / k as f64;
            let expect = sigma_sq / (ch.lambdas[i] * ch.lambdas[i]);
            assert!((emp / expect - 1.0).abs() < 0.02, "row {i}: {emp} vs {expect}");
        }
    }

    #[test]
    fn profile_for_simple_channels() {
        let sched = NoiseSchedule::default();
        let p = build_profile(&ChannelRealization::identity(2), 0.0, &sched);
        assert_eq!(p.m_steps, vec![1, 1]);
        assert_eq!(p.norm_factor, vec![1.0, 1.0]);

        let p = build_profile(&ChannelRealization::identity(2), 0.1, &sched);
        assert_eq!(p.sigma_sq_eff, vec![0.1, 0.1]);

        let p = SubchannelProfile::from_lambdas(&[2.0, 1.0], 1.0, &sched);
        assert_eq!(p.sigma_sq_eff, vec![0.25, 1.0]);
        assert!(p.m_steps[0] < p.m_steps[1]);
        assert!((p.norm_factor[1] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn singular_channel_is_flagged_and_clamped() {
        let sched = NoiseSchedule::default();
        let c = |re| Complex64::new(re, 0.0);
        let h = CMatrix::from_vec(2, 2, vec![c(1.0), c(2.0), c(2.0), c(4.0)]).unwrap();
        let ch = ChannelRealization::from_matrix(h).unwrap();
        assert_eq!(ch.degraded(), vec![1]);

        let y = CMatrix::zeros(2, 3);
        match equalize(&y, &ch) {
            Err(Error::SingularChannel { subchannels }) => assert_eq!(subchannels, vec![1]),
            other => panic!("expected SingularChannel, got {other:?}"),
        }

        let p = build_profile(&ch, 0.1, &sched);
        assert_eq!(p.degraded, vec![false, true]);
        assert_eq!(p.m_steps[1], 1000);
        assert_eq!(p.sigma_sq_eff[1], sched.noise_to_signal(1000));
        assert!(p.norm_factor[1] > 0.0 && p.norm_factor[1] <= 1.0);

        let mut rng = seeded(1);
        let y = CMatrix::zeros(2, 40_000);
        let eq = equalize_with_fallback(&y, &ch, &p, &mut rng).unwrap();
        assert!(eq.row(0).iter().all(|v| v.norm() == 0.0));
        let normalized_power = eq.row_norm_sqr(1) * p.norm_factor[1].powi(2) / 40_000.0;
        assert!((normalized_power - 1.0).abs() < 0.02);
    }
}
