//! Audio-conditioned flow-matching video diffusion at desk scale.
//!
//! The crate covers the whole loop: a synthetic talking-blob world with
//! measurable lip sync, a lossless patch codec, fixed filterbank audio
//! features, a small diffusion transformer with audio cross-attention, flow
//! matching training with masked losses, and an inference stack with dual
//! classifier-free guidance, bidirectional latent fusion over sliding
//! windows, a hybrid video/image conditioning switch, residual caching and
//! colour unification.

pub mod audio;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod inference;
pub mod io;
pub mod oracle;
pub mod error;
pub mod eval;
pub mod training;
pub mod world;

pub use audio::{AudioTokens, FeatureStats};
pub use codec::{ConditionInputs, LatentMask, LatentVideo, Task};
pub use denoiser::{DenoiseInput, DenoiserConfig, ModelParams};
pub use error::{Error, Result};
pub use world::{AudioSignal, SceneSpec, TextTag, TripletSample, VideoClip};
pub use training::TrainConfig;
pub use inference::{CfgMode, CfgSchedule, SamplerConfig, WindowPlan};
pub use eval::EvalReport;
pub use ndarray;
