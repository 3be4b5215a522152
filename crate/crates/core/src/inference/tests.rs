use ndarray::Array2;

use super::*;
use crate::denoiser::DenoiserConfig;
use crate::world::gen_triplet;

struct Setup {
    params: ModelParams,
    source: VideoClip,
    boxes: Vec<PixelBox>,
    audio: AudioTokens,
}

fn setup(frames: usize) -> Setup {
    let params = ModelParams::random(DenoiserConfig::with_width_depth(24, 1), 3, 0.2).unwrap();
    let sample = gen_triplet(11, frames, 16.0, 32, 32).unwrap();
    let cfg = params.config();
    let tokens = Array2::from_shape_fn((frames * cfg.tokens_per_frame, cfg.audio_dim), |(i, j)| ((i * 7 + j) as f32).sin());
    let audio = AudioTokens::new(tokens, cfg.tokens_per_frame).unwrap();
    let boxes = vec![sample.scene.mouth_box(32, 32); frames];
    Setup { params, source: sample.video, boxes, audio }
}

fn run(s: &Setup, cfg: &SamplerConfig, with_video: bool) -> Generation {
    let plan = cfg.plan(s.source.len()).unwrap();
    let mut conds = WindowConditions::animation(&s.source, &plan, 4).unwrap();
    if with_video {
        conds = conds.with_video(&s.source, &s.boxes, &plan, 4).unwrap();
    }
    let req = GenerationRequest { conds: &conds, audio: &s.audio, text: Some(1), frames: s.source.len(), height: 32, width: 32, fps: 16.0 };
    generate(&s.params, &req, cfg).unwrap()
}

#[test]
fn hybrid_counts_and_reductions() {
    let s = setup(6);
    let base = SamplerConfig { steps: 5, window: 4, overlap: 2, ..SamplerConfig::default() };
    let plan = base.plan(6).unwrap();
    for n in 0..=5 {
        let g = run(&s, &SamplerConfig { hybrid_switch: n, ..base.clone() }, true);
        assert_eq!(g.stats.video_condition_steps, vec![n; plan.len()]);
        assert_eq!(g.stats.denoiser_calls, 5 * plan.len() * 3);
    }
    let image_only = run(&s, &base, false);
    assert_eq!(run(&s, &SamplerConfig { hybrid_switch: 0, ..base.clone() }, true).latent, image_only.latent);

    // N = steps is the pure video-conditioned sampler
    let full = run(&s, &SamplerConfig { hybrid_switch: 5, ..base.clone() }, true);
    let mut conds = WindowConditions::animation(&s.source, &plan, 4).unwrap().with_video(&s.source, &s.boxes, &plan, 4).unwrap();
    conds.image = conds.video.clone().unwrap();
    let req = GenerationRequest { conds: &conds, audio: &s.audio, text: Some(1), frames: 6, height: 32, width: 32, fps: 16.0 };
    assert_eq!(generate(&s.params, &req, &base).unwrap().latent, full.latent);
}

#[test]
fn hybrid_requires_video_and_valid_n() {
    let s = setup(4);
    let plan = WindowPlan::single(4);
    let conds = WindowConditions::animation(&s.source, &plan, 4).unwrap();
    let req = GenerationRequest { conds: &conds, audio: &s.audio, text: None, frames: 4, height: 32, width: 32, fps: 16.0 };
    assert!(generate(&s.params, &req, &SamplerConfig { steps: 3, hybrid_switch: 2, ..SamplerConfig::default() }).is_err());
    assert!(generate(&s.params, &req, &SamplerConfig { steps: 3, hybrid_switch: 4, ..SamplerConfig::default() }).is_err());
}

#[test]
fn cache_alpha_zero_is_exact_and_large_alpha_skips() {
    let s = setup(4);
    let base = SamplerConfig { steps: 6, ..SamplerConfig::default() };
    let plain = run(&s, &base, false);
    assert_eq!(plain.stats.skipped_calls, 0);
    let big = run(&s, &SamplerConfig { cache_alpha: 1e30, ..base.clone() }, false);
    assert_eq!(big.stats.skipped_calls, 4 * 3);
    assert_eq!(big.stats.skips_per_step[0], 0);
    assert_eq!(big.stats.skips_per_step[5], 0);
}

#[test]
fn generation_is_deterministic() {
    let s = setup(6);
    let cfg = SamplerConfig { steps: 3, window: 4, overlap: 2, seed: 9, ..SamplerConfig::default() };
    assert_eq!(run(&s, &cfg, false).latent, run(&s, &cfg, false).latent);
    let other = SamplerConfig { seed: 10, ..cfg.clone() };
    assert_ne!(run(&s, &cfg, false).latent, run(&s, &other, false).latent);
}

#[test]
fn sampler_config_kv_roundtrip() {
    let cfg = SamplerConfig {
        steps: 12,
        cfg_mode: CfgMode::Literal,
        cfg_schedule: CfgSchedule::LinearRamp { start_frac: 0.5, end_frac: 1.5 },
        window: 8,
        overlap: 4,
        fusion: FusionRule::Literal,
        ..SamplerConfig::default()
    };
    let mut back = SamplerConfig::default();
    back.apply_prefixed("sampler", &crate::config::parse_kv(&cfg.render("sampler")).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(SamplerConfig { overlap: 1, ..SamplerConfig::default() }.validate().is_err());
}
