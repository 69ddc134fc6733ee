//! Diffusion-model denoising for SVD-equalized MIMO links.
//!
//! The receiver equalizes a Rayleigh block-fading channel into parallel
//! sub-channels, picks a diffusion entry step per sub-channel from its
//! effective noise power, and runs a joint reverse sampler that re-noises
//! clean sub-channels while denoising noisy ones with a shared noise
//! predictor.

pub mod channel;
pub mod checkpoint;
pub mod complex;
pub mod error;
pub mod jscc;
pub mod optim;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod svd;

pub use channel::{ChannelRealization, SubchannelProfile};
pub use complex::{CMatrix, SignalBlock};
pub use error::{Error, Result};
pub use predictor::{EpsilonPredictor, PredictorModel, PredictorQuery};
pub use schedule::{NoiseSchedule, ScheduleParams};
