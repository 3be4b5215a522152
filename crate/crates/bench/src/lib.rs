//! Fixtures shared by the benchmarks.

use talkflow_core::audio::featurize;
use talkflow_core::inference::WindowConditions;
use talkflow_core::training::{fit_audio_stats, TrainExample};
use talkflow_core::world::gen_triplet;
use talkflow_core::{AudioTokens, DenoiserConfig, ModelParams, SamplerConfig, TripletSample};

pub const FPS: f32 = 16.0;
pub const SIZE: usize = 32;

/// The toy model shape used for the end-to-end experiments.
pub fn toy_config() -> DenoiserConfig {
    DenoiserConfig { heads: 2, ..DenoiserConfig::with_width_depth(64, 2) }
}

pub struct Fixture {
    pub params: ModelParams,
    pub sample: TripletSample,
    pub tokens: AudioTokens,
    pub examples: Vec<TrainExample>,
}

impl Fixture {
    pub fn new(frames: usize) -> Self {
        let cfg = toy_config();
        let samples: Vec<TripletSample> = (0..4).map(|i| gen_triplet(i, frames, FPS, SIZE, SIZE).unwrap()).collect();
        let stats = fit_audio_stats(&samples, &cfg).unwrap();
        let examples = samples.iter().map(|s| TrainExample::from_triplet(s, &stats, &cfg).unwrap()).collect();
        let sample = samples[0].clone();
        let raw = featurize(&sample.audio, FPS, frames, cfg.tokens_per_frame, cfg.audio_dim).unwrap();
        let tokens = stats.normalize(&raw).unwrap();
        Self { params: ModelParams::init(cfg, 0).unwrap(), sample, tokens, examples }
    }

    pub fn conditions(&self, cfg: &SamplerConfig) -> WindowConditions {
        let plan = cfg.plan(self.sample.video.len()).unwrap();
        WindowConditions::animation(&self.sample.video.slice_frames(0, 1), &plan, self.params.config().patch).unwrap()
    }
}
