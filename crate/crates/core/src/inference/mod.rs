//! Sampling: Euler integration with dual guidance, sliding windows with
//! bidirectional latent fusion, the hybrid video/image conditioning switch,
//! residual caching and colour unification.

mod cache;
mod cfg;
mod color;
mod sampler;
mod windows;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use cache::{cached_forward, CacheState};
pub use cfg::{cfg_combine, CfgMode, CfgSchedule};
pub use color::color_unify;
pub use sampler::{blf_sample, euler_sample, StepInfo, VelocityField};
pub use windows::{fuse_overlap, fusion_weight, plan_windows, FusionRule, WindowPlan};

use crate::audio::AudioTokens;
use crate::codec::{build_condition_inputs, decode_with_fps, ConditionInputs, LatentVideo, Task};
use crate::config::{parse_value, unknown_key, KvConfig};
use crate::denoiser::{DenoiseInput, ModelParams};
use crate::error::{ensure, Result};
use crate::world::{PixelBox, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_audio: f64,
    pub cfg_text: f64,
    pub cfg_mode: CfgMode,
    pub cfg_schedule: CfgSchedule,
    /// Window length in latent frames; 0 samples the whole sequence at once.
    pub window: usize,
    pub overlap: usize,
    /// Number of noisiest steps that use the video (editing) conditions.
    pub hybrid_switch: usize,
    /// Residual-cache threshold; 0 disables the cache.
    pub cache_alpha: f64,
    pub fusion: FusionRule,
    pub color_unify: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_audio: 4.5,
            cfg_text: 1.0,
            cfg_mode: CfgMode::Normalized,
            cfg_schedule: CfgSchedule::Constant,
            window: 0,
            overlap: 0,
            hybrid_switch: 0,
            cache_alpha: 0.0,
            fusion: FusionRule::Convex,
            color_unify: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be at least 1");
        ensure!(self.cfg_audio.is_finite() && self.cfg_text.is_finite(), "guidance scales must be finite");
        ensure!(self.hybrid_switch <= self.steps, "hybrid switch {} exceeds {} steps", self.hybrid_switch, self.steps);
        ensure!(self.cache_alpha >= 0.0 && !self.cache_alpha.is_nan(), "cache_alpha must be non-negative");
        ensure!(self.overlap != 1, "overlap of 1 frame cannot be fused");
        if self.window > 0 {
            ensure!(self.overlap < self.window, "overlap {} must be smaller than window {}", self.overlap, self.window);
        }
        Ok(())
    }

    /// Window plan for `l` latent frames; windows longer than `l` shrink to one window.
    pub fn plan(&self, l: usize) -> Result<WindowPlan> {
        if self.window == 0 || self.window >= l {
            Ok(WindowPlan::single(l))
        } else {
            plan_windows(l, self.window, self.overlap)
        }
    }
}

impl KvConfig for SamplerConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "cfg_audio" => self.cfg_audio = parse_value(key, value)?,
            "cfg_text" => self.cfg_text = parse_value(key, value)?,
            "cfg_mode" => self.cfg_mode = value.parse()?,
            "cfg_schedule" => self.cfg_schedule = value.parse()?,
            "window" => self.window = parse_value(key, value)?,
            "overlap" => self.overlap = parse_value(key, value)?,
            "hybrid_switch" => self.hybrid_switch = parse_value(key, value)?,
            "cache_alpha" => self.cache_alpha = parse_value(key, value)?,
            "fusion" => {
                self.fusion = match value {
                    "convex" => FusionRule::Convex,
                    "literal" => FusionRule::Literal,
                    _ => return Err(crate::error::invalid(format!("unknown fusion rule {value:?}"))),
                }
            }
            "color_unify" => self.color_unify = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("cfg_audio", self.cfg_audio.to_string()),
            ("cfg_text", self.cfg_text.to_string()),
            ("cfg_mode", self.cfg_mode.to_string()),
            ("cfg_schedule", self.cfg_schedule.to_string()),
            ("window", self.window.to_string()),
            ("overlap", self.overlap.to_string()),
            ("hybrid_switch", self.hybrid_switch.to_string()),
            ("cache_alpha", self.cache_alpha.to_string()),
            ("fusion", match self.fusion { FusionRule::Convex => "convex", FusionRule::Literal => "literal" }.into()),
            ("color_unify", self.color_unify.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Conditions for every window of a plan.
///
/// Image conditions put the reference frame at each window's frame 0.
/// Video conditions are editing inputs built from the window's slice of a
/// source video.
#[derive(Debug, Clone)]
pub struct WindowConditions {
    pub image: Vec<ConditionInputs>,
    pub video: Option<Vec<ConditionInputs>>,
}

impl WindowConditions {
    pub fn animation(reference: &VideoClip, plan: &WindowPlan, patch: usize) -> Result<Self> {
        let image = plan
            .windows
            .iter()
            .map(|&(s, e)| build_condition_inputs(Task::Animation, reference, None, e - s, patch))
            .collect::<Result<_>>()?;
        Ok(Self { image, video: None })
    }

    /// Adds editing conditions from `source` (`plan.length` frames) with one
    /// mouth box per frame.
    pub fn with_video(mut self, source: &VideoClip, boxes: &[PixelBox], plan: &WindowPlan, patch: usize) -> Result<Self> {
        ensure!(source.len() == plan.length, "source has {} frames, plan needs {}", source.len(), plan.length);
        ensure!(boxes.len() == plan.length, "need one mouth box per frame");
        let video = plan
            .windows
            .iter()
            .map(|&(s, e)| build_condition_inputs(Task::Editing, &source.slice_frames(s, e), Some(&boxes[s..e]), e - s, patch))
            .collect::<Result<_>>()?;
        self.video = Some(video);
        Ok(self)
    }
}

/// Counters collected while sampling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub denoiser_calls: usize,
    pub skipped_calls: usize,
    /// Per window: steps that used the video conditions.
    pub video_condition_steps: Vec<usize>,
    /// Per step (index 0 is the noisiest): skipped calls across all windows.
    pub skips_per_step: Vec<usize>,
}

impl SamplerStats {
    pub fn skip_rate(&self) -> f64 {
        if self.denoiser_calls == 0 {
            0.0
        } else {
            self.skipped_calls as f64 / self.denoiser_calls as f64
        }
    }
}

/// Branch index of the guidance evaluations.
const BRANCHES: usize = 3;

/// The trained model as a windowed velocity field: three guidance branches
/// per call, per-window conditions and audio, the hybrid switch and one
/// residual cache per (window, branch).
pub struct GuidedDenoiser<'a> {
    params: &'a ModelParams,
    conds: &'a WindowConditions,
    audio: Vec<AudioTokens>,
    text: Option<usize>,
    cfg: SamplerConfig,
    caches: Vec<[CacheState; BRANCHES]>,
    pub stats: SamplerStats,
}

impl<'a> GuidedDenoiser<'a> {
    pub fn new(
        params: &'a ModelParams,
        conds: &'a WindowConditions,
        audio: &AudioTokens,
        text: Option<usize>,
        plan: &WindowPlan,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(conds.image.len() == plan.len(), "conditions cover {} windows, plan has {}", conds.image.len(), plan.len());
        ensure!(
            cfg.hybrid_switch == 0 || conds.video.is_some(),
            "hybrid switch needs video conditions"
        );
        ensure!(
            audio.tokens_per_frame == params.config().tokens_per_frame,
            "audio has {} tokens per frame, model expects {}",
            audio.tokens_per_frame,
            params.config().tokens_per_frame
        );
        ensure!(
            audio.frames() >= plan.length,
            "audio covers {} frames, need {}",
            audio.frames(),
            plan.length
        );
        let audio = plan.windows.iter().map(|&(s, e)| audio.slice_frames(s, e)).collect::<Result<_>>()?;
        Ok(Self {
            params,
            conds,
            audio,
            text,
            cfg: cfg.clone(),
            caches: vec![Default::default(); plan.len()],
            stats: SamplerStats {
                video_condition_steps: vec![0; plan.len()],
                skips_per_step: vec![0; cfg.steps],
                ..Default::default()
            },
        })
    }
}

impl VelocityField<f32> for GuidedDenoiser<'_> {
    fn velocity(&mut self, info: &StepInfo, z: &Array4<f32>) -> Result<Array4<f32>> {
        let w = info.window;
        let use_video = info.step <= self.cfg.hybrid_switch;
        let cond = match (&self.conds.video, use_video) {
            (Some(v), true) => &v[w],
            _ => &self.conds.image[w],
        };
        if use_video {
            self.stats.video_condition_steps[w] += 1;
        }
        let z_t = LatentVideo { data: z.clone(), patch: self.params.config().patch };
        let t = info.t as f32;
        let inputs = [
            DenoiseInput { z_t: &z_t, t, text: self.text, cond: Some(cond), audio: Some(&self.audio[w]) },
            DenoiseInput { z_t: &z_t, t, text: self.text, cond: Some(cond), audio: None },
            DenoiseInput { z_t: &z_t, t, text: None, cond: None, audio: None },
        ];
        let mut outs = Vec::with_capacity(BRANCHES);
        for (b, input) in inputs.iter().enumerate() {
            let cache = &mut self.caches[w][b];
            let before = cache.skips;
            outs.push(cached_forward(cache, self.params, input, self.cfg.cache_alpha, info.step, info.steps)?.data);
            let skipped = cache.skips - before;
            self.stats.denoiser_calls += 1;
            self.stats.skipped_calls += skipped;
            self.stats.skips_per_step[info.step - 1] += skipped;
        }
        let wa = self.cfg.cfg_schedule.eval(info.t, self.cfg.cfg_audio);
        let wt = self.cfg.cfg_schedule.eval(info.t, self.cfg.cfg_text);
        cfg_combine(self.cfg.cfg_mode, &outs[0], &outs[1], &outs[2], wa, wt)
    }
}

/// Initial noise for `frames` latent frames of `shape` `(C, h, w)`.
pub fn initial_noise(seed: u64, frames: usize, shape: (usize, usize, usize)) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((frames, shape.0, shape.1, shape.2), || StandardNormal.sample(&mut rng))
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub latent: LatentVideo,
    /// Decoded, clamped and optionally colour-unified frames.
    pub video: VideoClip,
    pub plan: WindowPlan,
    pub stats: SamplerStats,
}

/// What to generate; `conds` must have been built for `cfg.plan(frames)`.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub conds: &'a WindowConditions,
    pub audio: &'a AudioTokens,
    pub text: Option<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
}

pub fn generate(params: &ModelParams, req: &GenerationRequest<'_>, cfg: &SamplerConfig) -> Result<Generation> {
    cfg.validate()?;
    ensure!(req.frames >= 1, "need at least one frame");
    let p = params.config().patch;
    ensure!(req.height.is_multiple_of(p) && req.width.is_multiple_of(p), "frame size not divisible by patch {p}");
    let plan = cfg.plan(req.frames)?;
    let shape = (params.config().latent_channels(), req.height / p, req.width / p);
    let z_init = initial_noise(cfg.seed, req.frames, shape);
    let mut field = GuidedDenoiser::new(params, req.conds, req.audio, req.text, &plan, cfg)?;
    let z = blf_sample(&mut field, &z_init, &plan, cfg.steps, cfg.fusion)?;
    let latent = LatentVideo { data: z, patch: p };
    let mut video = decode_with_fps(&latent, req.fps)?.clamped();
    if cfg.color_unify {
        video = color_unify(&video, plan.window.max(1));
    }
    Ok(Generation { latent, video, plan, stats: field.stats })
}

#[cfg(test)]
mod tests;
