//! Joint sampling over sub-channels with different effective noise power.
//!
//! Every sub-channel enters the reverse process at its own step `m_i`.
//! Sampling starts at `m_max = max_i m_i`; while the current step is still
//! above a row's entry point, that row is re-noised from its normalized
//! equalized observation so the joint state keeps the marginal of the
//! forward process. Rows at or below their entry point follow the
//! deterministic reverse update driven by one joint predictor call over
//! the whole `M x k` state.

use std::fmt::Write as _;

use rand::Rng;

use crate::channel::{build_profile, ChannelRealization, SubchannelProfile};
use crate::complex::SignalBlock;
use crate::error::{Error, Result};
use crate::predictor::{EpsilonPredictor, PredictorQuery};
use crate::rng::complex_gaussian;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    NoiseAdd,
    Reverse,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::NoiseAdd => "noise_add",
            Branch::Reverse => "reverse",
        }
    }
}

/// What happened at step `t`: the branch taken by every row and the row
/// norms of the resulting state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub branches: Vec<Branch>,
    pub row_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerTrace {
    pub steps: Vec<StepRecord>,
}

impl SamplerTrace {
    /// `t,subchannel,branch,row_norm` rows; sub-channels are 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,subchannel,branch,row_norm\n");
        for rec in &self.steps {
            for (i, (b, n)) in rec.branches.iter().zip(&rec.row_norms).enumerate() {
                writeln!(s, "{},{},{},{:.12e}", rec.t, i + 1, b.as_str(), n).unwrap();
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    pub t: usize,
    pub x: SignalBlock,
    pub profile: SubchannelProfile,
    pub y_bar: SignalBlock,
    pub lambdas: Vec<f64>,
}

/// Scales row `i` of `Y'` by `1 / sqrt(1 + sigma_i^2)`.
pub fn normalize_equalized(y_eq: &SignalBlock, profile: &SubchannelProfile) -> Result<SignalBlock> {
    if y_eq.rows() != profile.len() {
        return Err(Error::DimensionMismatch {
            op: "normalize_equalized",
            expected: (profile.len(), y_eq.cols()),
            found: y_eq.shape(),
        });
    }
    let mut out = y_eq.clone();
    for (i, &f) in profile.norm_factor.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= f;
        }
    }
    Ok(out)
}

/// Re-noise coefficients `(sqrt(ab_t / ab_m), sqrt(1 - ab_t / ab_m))` that
/// carry an observation matched to step `m` forward to step `t >= m`.
fn renoise_coefficients(sched: &NoiseSchedule, t: usize, m: usize) -> (f64, f64) {
    let ratio = sched.alpha_bar(t) / sched.alpha_bar(m);
    (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt())
}

fn renoise_row<R: Rng + ?Sized>(x: &mut SignalBlock, y_bar: &SignalBlock, i: usize, coef: (f64, f64), rng: &mut R) {
    let (a, b) = coef;
    for (xv, &yv) in x.row_mut(i).iter_mut().zip(y_bar.row(i)) {
        *xv = yv * a;
        if b > 0.0 {
            *xv += complex_gaussian(rng, 1.0) * b;
        }
    }
}

fn row_norms(x: &SignalBlock) -> Vec<f64> {
    (0..x.rows()).map(|i| x.row_norm_sqr(i).sqrt()).collect()
}

/// Initial state at `t = m_max`; every row is re-noised from `y_bar`, so
/// rows with `m_i = m_max` equal `y_bar` exactly.
pub fn init_state<R: Rng + ?Sized>(
    y_bar: &SignalBlock,
    profile: &SubchannelProfile,
    lambdas: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SamplerState, StepRecord)> {
    if y_bar.rows() != profile.len() || lambdas.len() != profile.len() {
        return Err(Error::DimensionMismatch {
            op: "init_state",
            expected: (profile.len(), y_bar.cols()),
            found: y_bar.shape(),
        });
    }
    let t = profile.m_max();
    sched.check_step(t)?;
    let mut x = y_bar.clone();
    for (i, &m) in profile.m_steps.iter().enumerate() {
        renoise_row(&mut x, y_bar, i, renoise_coefficients(sched, t, m), rng);
    }
    let record = StepRecord {
        t,
        branches: vec![Branch::NoiseAdd; profile.len()],
        row_norms: row_norms(&x),
    };
    let state = SamplerState {
        t,
        x,
        profile: profile.clone(),
        y_bar: y_bar.clone(),
        lambdas: lambdas.to_vec(),
    };
    Ok((state, record))
}

/// Advances the state from step `t` to `t - 1`.
pub fn sampling_step<P, R>(
    state: &mut SamplerState,
    model: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepRecord>
where
    P: EpsilonPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let t = state.t;
    if t < 2 {
        return Err(Error::InvalidArgument(format!("sampling step needs t >= 2, got {t}")));
    }
    let branches: Vec<Branch> = state
        .profile
        .m_steps
        .iter()
        .map(|&m| if m < t { Branch::NoiseAdd } else { Branch::Reverse })
        .collect();

    let eps_hat = if branches.contains(&Branch::Reverse) {
        let q = PredictorQuery::new(&state.x, &state.lambdas, t, sched);
        Some(model.predict_epsilon(&q)?)
    } else {
        None
    };

    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let mut next = state.x.clone();
    for (i, b) in branches.iter().enumerate() {
        match b {
            Branch::NoiseAdd => {
                let coef = renoise_coefficients(sched, t - 1, state.profile.m_steps[i]);
                renoise_row(&mut next, &state.y_bar, i, coef, rng);
            }
            Branch::Reverse => {
                let eps = eps_hat.as_ref().expect("predicted for reverse rows");
                let (c_sig, c_eps) = ((ab_prev / ab_t).sqrt(), (1.0 - ab_prev).sqrt());
                let c_t = (1.0 - ab_t).sqrt();
                for ((nv, &xv), &ev) in next.row_mut(i).iter_mut().zip(state.x.row(i)).zip(eps.row(i)) {
                    *nv = (xv - ev * c_t) * c_sig + ev * c_eps;
                }
            }
        }
    }
    state.x = next;
    state.t = t - 1;
    Ok(StepRecord {
        t,
        branches,
        row_norms: row_norms(&state.x),
    })
}

/// `Z_hat = (X_1 - sqrt(1 - ab_1) eps_theta(X_1, Sigma, 1)) / sqrt(ab_1)`.
pub fn final_step<P: EpsilonPredictor + ?Sized>(
    state: &SamplerState,
    model: &P,
    sched: &NoiseSchedule,
) -> Result<SignalBlock> {
    if state.t != 1 {
        return Err(Error::InvalidArgument(format!("final step needs t = 1, got {}", state.t)));
    }
    let ab = sched.alpha_bar(1);
    let eps = model.predict_epsilon(&PredictorQuery::new(&state.x, &state.lambdas, 1, sched))?;
    Ok(state.x.sub(&eps.scale((1.0 - ab).sqrt()))?.scale(1.0 / ab.sqrt()))
}

/// Runs the whole sampler on an equalized block for a known profile.
pub fn denoise_with_profile<P, R>(
    y_eq: &SignalBlock,
    lambdas: &[f64],
    profile: &SubchannelProfile,
    model: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SignalBlock, SamplerTrace)>
where
    P: EpsilonPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let y_bar = normalize_equalized(y_eq, profile)?;
    let (mut state, first) = init_state(&y_bar, profile, lambdas, sched, rng)?;
    let mut trace = SamplerTrace { steps: vec![first] };
    while state.t >= 2 {
        trace.steps.push(sampling_step(&mut state, model, sched, rng)?);
    }
    let z_hat = final_step(&state, model, sched)?;
    trace.steps.push(StepRecord {
        t: 1,
        branches: vec![Branch::Reverse; profile.len()],
        row_norms: row_norms(&z_hat),
    });
    Ok((z_hat, trace))
}

/// `Z_hat = g_theta(Y')` for channel `ch` and noise power `sigma_sq`.
pub fn denoise<P, R>(
    y_eq: &SignalBlock,
    ch: &ChannelRealization,
    sigma_sq: f64,
    model: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SignalBlock, SamplerTrace)>
where
    P: EpsilonPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let profile = build_profile(ch, sigma_sq, sched);
    denoise_with_profile(y_eq, &ch.lambdas, &profile, model, sched, rng)
}
