//! DiT-lite velocity predictor.
//!
//! Latent pixels become tokens with features `[z_t, cond_latent, cond_mask]`
//! concatenated along channels. Missing conditions are substituted inside the
//! same code path: a zero latent and mask for `cond`, a learned null vector
//! repeated to the right length for audio, and a reserved table row for text.

mod model;
mod ops;
mod params;
mod rope;

use ndarray::{Array2, Array4, NdFloat};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioTokens, DEFAULT_AUDIO_DIM, DEFAULT_TOKENS_PER_FRAME};
use crate::codec::{ConditionInputs, LatentVideo, DEFAULT_PATCH};
use crate::error::{ensure, Result};
use crate::world::TEXT_TAGS;

pub use params::{ModelParams, CHECKPOINT_MAGIC};
pub use rope::{axis_pairs, rope_rotate, RopeTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks that carry an audio cross-attention.
    pub audio_xattn_layers: Vec<usize>,
    pub text_vocab: usize,
    pub patch: usize,
    pub tokens_per_frame: usize,
    pub audio_dim: usize,
    pub rope_base: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::with_width_depth(64, 4)
    }
}

impl DenoiserConfig {
    /// Default config with every block carrying audio cross-attention.
    pub fn with_width_depth(width: usize, depth: usize) -> Self {
        Self {
            width,
            depth,
            heads: 4,
            mlp_ratio: 4,
            audio_xattn_layers: (0..depth).collect(),
            text_vocab: TEXT_TAGS.len(),
            patch: DEFAULT_PATCH,
            tokens_per_frame: DEFAULT_TOKENS_PER_FRAME,
            audio_dim: DEFAULT_AUDIO_DIM,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, "depth must be at least 1");
        ensure!(self.heads >= 1, "heads must be at least 1");
        ensure!(
            self.width.is_multiple_of(2 * self.heads),
            "width {} must be divisible by 2 * heads = {}",
            self.width,
            2 * self.heads
        );
        ensure!(self.head_dim() >= 6, "head dim {} leaves fewer than 3 RoPE pairs", self.head_dim());
        ensure!(self.mlp_ratio >= 1, "mlp_ratio must be at least 1");
        ensure!(self.text_vocab >= 1, "text_vocab must be at least 1");
        ensure!(self.patch >= 1 && self.tokens_per_frame >= 1 && self.audio_dim >= 1, "patch, r and audio dim must be positive");
        ensure!(self.rope_base.is_finite() && self.rope_base > 1.0, "rope_base must exceed 1");
        for &l in &self.audio_xattn_layers {
            ensure!(l < self.depth, "audio layer {l} outside depth {}", self.depth);
        }
        let mut sorted = self.audio_xattn_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(sorted.len() == self.audio_xattn_layers.len(), "duplicate audio layers");
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels() + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// One denoiser call; `None` selects the null branch of that condition.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    pub z_t: &'a LatentVideo,
    pub t: f32,
    pub text: Option<usize>,
    pub cond: Option<&'a ConditionInputs>,
    pub audio: Option<&'a AudioTokens>,
}

/// Test-harness switches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    pub skip_self_attn: bool,
    pub skip_text_attn: bool,
    /// Added to every temporal position (video frames and audio tokens alike).
    pub position_offset: i64,
}

pub fn forward(input: &DenoiseInput<'_>, params: &ModelParams) -> Result<LatentVideo> {
    forward_with(input, params, &ForwardOptions::default())
}

pub fn forward_with(input: &DenoiseInput<'_>, params: &ModelParams, opts: &ForwardOptions) -> Result<LatentVideo> {
    let stages = ForwardStages::new(params, input, opts)?;
    let hidden = stages.run_blocks();
    Ok(stages.head(&hidden))
}

/// Generic-precision forward returning `[T, C, h, w]`.
pub fn forward_generic<S: NdFloat>(input: &DenoiseInput<'_>, params: &ModelParams<S>) -> Result<Array4<S>> {
    let prep = model::prepare::<S>(&params.config, input)?;
    let (frames, h, w) = (prep.frames, prep.h, prep.w);
    let (out, _) = model::forward_tape(params, prep, &ForwardOptions::default());
    Ok(model::tokens_to_latent(&out, frames, h, w))
}

/// Runs the forward pass, hands the prediction to `loss` (which returns the
/// loss and its gradient w.r.t. the prediction) and returns the loss together
/// with the gradient w.r.t. every parameter.
pub fn loss_and_grad<S: NdFloat>(
    input: &DenoiseInput<'_>,
    params: &ModelParams<S>,
    loss: impl FnOnce(&Array4<S>) -> (S, Array4<S>),
) -> Result<(S, Vec<S>)> {
    let mut grads = vec![S::zero(); params.len()];
    let value = accumulate_grad(input, params, loss, &mut grads)?;
    Ok((value, grads))
}

/// Like [`loss_and_grad`] but adds into an existing gradient buffer.
pub fn accumulate_grad<S: NdFloat>(
    input: &DenoiseInput<'_>,
    params: &ModelParams<S>,
    loss: impl FnOnce(&Array4<S>) -> (S, Array4<S>),
    grads: &mut [S],
) -> Result<S> {
    ensure!(grads.len() == params.len(), "gradient buffer has {} entries, model {}", grads.len(), params.len());
    let prep = model::prepare::<S>(&params.config, input)?;
    let (frames, h, w) = (prep.frames, prep.h, prep.w);
    let (out, tape) = model::forward_tape(params, prep, &ForwardOptions::default());
    let pred = model::tokens_to_latent(&out, frames, h, w);
    let (value, dpred) = loss(&pred);
    ensure!(dpred.dim() == pred.dim(), "loss gradient shape mismatch");
    model::backward(params, &tape, &model::latent_grad_to_tokens(&dpred), grads);
    Ok(value)
}

/// Audio cross-attention logits, indexed `[layer][head]`, each `[N_video, L_audio]`.
pub fn audio_attention_logits(
    input: &DenoiseInput<'_>,
    params: &ModelParams,
    opts: &ForwardOptions,
) -> Result<Vec<Vec<Array2<f32>>>> {
    let prep = model::prepare::<f32>(&params.config, input)?;
    let (_, tape) = model::forward_tape(params, prep, opts);
    Ok(tape.audio_logits(params.config.heads))
}

/// The forward pass split at the points the residual cache needs:
/// prelude (done in `new`), the block stack, and the output head.
pub struct ForwardStages<'p> {
    params: &'p ModelParams,
    ctx: model::Context<f32>,
    opts: ForwardOptions,
    patch: usize,
}

impl<'p> ForwardStages<'p> {
    pub fn new(params: &'p ModelParams, input: &DenoiseInput<'_>, opts: &ForwardOptions) -> Result<Self> {
        let prep = model::prepare::<f32>(&params.config, input)?;
        let (ctx, _) = model::prelude(params, prep, opts);
        Ok(Self { params, ctx, opts: *opts, patch: params.config.patch })
    }

    /// Token embeddings entering block 0, `[N, d]`.
    pub fn input_tokens(&self) -> &Array2<f32> {
        &self.ctx.x0
    }

    /// Block 0's timestep-modulated normalized input.
    pub fn modulated_input(&self) -> Array2<f32> {
        model::modulated_input(self.params, &self.ctx)
    }

    /// Hidden state after the last block.
    pub fn run_blocks(&self) -> Array2<f32> {
        let mut x = self.ctx.x0.clone();
        for bi in 0..self.params.config.depth {
            x = model::block_forward(self.params, bi, &self.ctx, x, &self.opts).0;
        }
        x
    }

    pub fn head(&self, hidden: &Array2<f32>) -> LatentVideo {
        let (out, _) = model::head_forward(self.params, &self.ctx, hidden);
        LatentVideo { data: model::tokens_to_latent(&out, self.ctx.frames, self.ctx.h, self.ctx.w), patch: self.patch }
    }
}
