//! Lossless patch codec and task-specific conditioning inputs.
//!
//! Each `p x p x 3` pixel patch becomes one latent pixel with `3p^2`
//! channels. Channel index is `ch * p^2 + row * p + col` (colour channel
//! major, then patch row, then patch column). Time is not compressed, so a
//! latent frame is a video frame.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::world::{PixelBox, VideoClip};

pub const DEFAULT_PATCH: usize = 4;

/// `[T, C, h, w]` latent with `C = 3p^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array4<f32>,
    pub patch: usize,
}

impl LatentVideo {
    pub fn new(data: Array4<f32>, patch: usize) -> Result<Self> {
        ensure!(patch >= 1, "patch size must be positive");
        let c = data.dim().1;
        ensure!(c == 3 * patch * patch, "latent has {c} channels, patch {patch} needs {}", 3 * patch * patch);
        Ok(Self { data, patch })
    }

    pub fn zeros(frames: usize, patch: usize, h: usize, w: usize) -> Self {
        Self { data: Array4::zeros((frames, 3 * patch * patch, h, w)), patch }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    /// `(T, C, h, w)`
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> LatentVideo {
        LatentVideo { data: self.data.slice(s![start..end, .., .., ..]).to_owned(), patch: self.patch }
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.data.dim() == other.data.dim()
    }
}

/// Binary `[T, 1, h, w]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub data: Array4<f32>,
}

impl LatentMask {
    pub fn zeros(frames: usize, h: usize, w: usize) -> Self {
        Self { data: Array4::zeros((frames, 1, h, w)) }
    }

    pub fn ones(frames: usize, h: usize, w: usize) -> Self {
        Self { data: Array4::ones((frames, 1, h, w)) }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> LatentMask {
        LatentMask { data: self.data.slice(s![start..end, .., .., ..]).to_owned() }
    }

    /// Number of ones in frame `k`.
    pub fn frame_sum(&self, k: usize) -> f32 {
        self.data.index_axis(Axis(0), k).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Reference image followed by empty frames.
    Animation,
    /// Source video with the lower face masked out after frame 0.
    Editing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    pub cond_latent: LatentVideo,
    pub cond_mask: LatentMask,
    pub task: Task,
}

impl ConditionInputs {
    pub fn slice_frames(&self, start: usize, end: usize) -> ConditionInputs {
        ConditionInputs {
            cond_latent: self.cond_latent.slice_frames(start, end),
            cond_mask: self.cond_mask.slice_frames(start, end),
            task: self.task,
        }
    }
}

fn check_divisible(height: usize, width: usize, p: usize) -> Result<()> {
    ensure!(p >= 1, "patch size must be positive");
    ensure!(
        height.is_multiple_of(p) && width.is_multiple_of(p),
        "frame size {height}x{width} is not divisible by patch {p}"
    );
    Ok(())
}

pub fn encode(clip: &VideoClip, p: usize) -> Result<LatentVideo> {
    let (t, height, width, _) = clip.frames.dim();
    check_divisible(height, width, p)?;
    let (h, w) = (height / p, width / p);
    let mut data = Array4::zeros((t, 3 * p * p, h, w));
    for ((k, c, y, x), v) in data.indexed_iter_mut() {
        let (ch, rem) = (c / (p * p), c % (p * p));
        *v = clip.frames[[k, y * p + rem / p, x * p + rem % p, ch]];
    }
    Ok(LatentVideo { data, patch: p })
}

/// Exact inverse of [`encode`]; values are not clamped.
pub fn decode(z: &LatentVideo) -> Result<VideoClip> {
    let p = z.patch;
    let (t, c, h, w) = z.data.dim();
    ensure!(c == 3 * p * p, "latent has {c} channels, patch {p} needs {}", 3 * p * p);
    let mut frames = Array4::zeros((t, h * p, w * p, 3));
    for ((k, i, j, ch), v) in frames.indexed_iter_mut() {
        let (y, py, x, px) = (i / p, i % p, j / p, j % p);
        *v = z.data[[k, ch * p * p + py * p + px, y, x]];
    }
    Ok(VideoClip { frames, fps: crate::world::DEFAULT_FPS })
}

/// Decodes and sets the frame rate.
pub fn decode_with_fps(z: &LatentVideo, fps: f32) -> Result<VideoClip> {
    let mut clip = decode(z)?;
    clip.fps = fps;
    Ok(clip)
}

/// Per-frame max pooling over `p x p` blocks of a binary `[T, H, W]` mask.
pub fn pool_mask(pixel_mask: ArrayView3<'_, f32>, p: usize) -> Result<LatentMask> {
    let (t, height, width) = pixel_mask.dim();
    check_divisible(height, width, p)?;
    ensure!(pixel_mask.iter().all(|&v| v == 0.0 || v == 1.0), "mask must be binary");
    let (h, w) = (height / p, width / p);
    let mut data = Array4::zeros((t, 1, h, w));
    for ((k, i, j), &v) in pixel_mask.indexed_iter() {
        if v == 1.0 {
            data[[k, 0, i / p, j / p]] = 1.0;
        }
    }
    Ok(LatentMask { data })
}

/// Pixel mask that is one inside `b` on every frame.
pub fn box_mask(frames: usize, height: usize, width: usize, b: &PixelBox) -> Array3<f32> {
    Array3::from_shape_fn((frames, height, width), |(_, i, j)| if b.contains(i, j) { 1.0 } else { 0.0 })
}

/// Conditioning video, mask and latent for one task.
///
/// Animation uses frame 0 of `source` as the reference followed by zero
/// frames. Editing keeps frame 0 of `source` and zeroes the pixels inside
/// `boxes[k]` on every later frame; `boxes` is indexed by frame and entry 0
/// is ignored.
pub fn build_condition_inputs(
    task: Task,
    source: &VideoClip,
    boxes: Option<&[PixelBox]>,
    target_frames: usize,
    p: usize,
) -> Result<ConditionInputs> {
    ensure!(target_frames >= 1, "target length must be at least one frame");
    let (n, height, width, _) = source.frames.dim();
    check_divisible(height, width, p)?;
    let mut frames = Array4::zeros((target_frames, height, width, 3));
    let mut mask = Array3::zeros((target_frames, height, width));
    match task {
        Task::Animation => {
            ensure!(n >= 1, "animation needs a reference frame");
            frames.index_axis_mut(Axis(0), 0).assign(&source.frame(0));
            mask.index_axis_mut(Axis(0), 0).fill(1.0);
        }
        Task::Editing => {
            ensure!(n == target_frames, "editing needs {target_frames} source frames, got {n}");
            let boxes = boxes.ok_or_else(|| crate::error::invalid("editing requires mouth boxes"))?;
            ensure!(boxes.len() == target_frames, "expected {target_frames} boxes, got {}", boxes.len());
            frames.assign(&source.frames);
            mask.index_axis_mut(Axis(0), 0).fill(1.0);
            for (k, b) in boxes.iter().enumerate().skip(1) {
                ensure!(b.bottom <= height && b.right <= width, "box {b:?} exceeds frame");
                for i in b.top..b.bottom {
                    for j in b.left..b.right {
                        frames.slice_mut(s![k, i, j, ..]).fill(0.0);
                        mask[[k, i, j]] = 1.0;
                    }
                }
            }
        }
    }
    let clip = VideoClip { frames, fps: source.fps };
    Ok(ConditionInputs { cond_latent: encode(&clip, p)?, cond_mask: pool_mask(mask.view(), p)?, task })
}
