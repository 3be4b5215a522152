//! Synthetic "talking blob" world.
//!
//! Audio is a carrier tone gated by random syllable segments. Video is a disk
//! on a tag-coloured background whose mouth opens with the per-frame audio
//! envelope, so lip motion is known exactly and can be measured back out of
//! any frame. The data-quality funnel lives here too.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayViewMut3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FPS: f32 = 16.0;
/// Spatial dimensions must be divisible by this (the smallest codec patch).
pub const DIM_MULTIPLE: usize = 4;
/// Lag search range for sync scoring, in frames.
pub const SYNC_MAX_LAG: i32 = 4;

const PEAK: f64 = 0.95;
const MOUTH_COLOR: [f32; 3] = [0.12, 0.04, 0.06];

/// Fixed tag set used as the text condition.
pub const TEXT_TAGS: [&str; 4] = ["studio", "garden", "office", "night"];
const BACKGROUNDS: [[f32; 3]; 4] = [
    [0.20, 0.25, 0.38],
    [0.18, 0.42, 0.20],
    [0.55, 0.55, 0.50],
    [0.05, 0.06, 0.16],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(!samples.is_empty(), "audio must contain at least one sample");
        ensure!(sample_rate > 0, "sample rate must be positive");
        ensure!(
            samples.iter().all(|x| x.is_finite() && x.abs() <= 1.0),
            "audio samples must be finite and within [-1, 1]"
        );
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of whole video frames this signal covers at `fps`.
    pub fn frame_count(&self, fps: f32) -> usize {
        (self.samples.len() as f64 * fps as f64 / self.sample_rate as f64 + 1e-9).floor() as usize
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }
}

/// Pixel-space clip, `frames` is `[T, H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, fps: f32) -> Result<Self> {
        let (t, _, _, c) = frames.dim();
        ensure!(t >= 1, "video needs at least one frame");
        ensure!(c == 3, "video frames must have 3 channels, got {c}");
        ensure!(fps > 0.0, "fps must be positive");
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, k: usize) -> ArrayView3<'_, f32> {
        self.frames.slice(s![k, .., .., ..])
    }

    /// Frames `start..end` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> VideoClip {
        VideoClip { frames: self.frames.slice(s![start..end, .., .., ..]).to_owned(), fps: self.fps }
    }

    pub fn clamped(&self) -> VideoClip {
        VideoClip { frames: self.frames.mapv(|v| v.clamp(0.0, 1.0)), fps: self.fps }
    }
}

/// Index into [`TEXT_TAGS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextTag(pub u8);

impl TextTag {
    pub fn name(self) -> &'static str {
        TEXT_TAGS[self.0 as usize % TEXT_TAGS.len()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TEXT_TAGS.iter().position(|t| *t == name).map(|i| TextTag(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn background(self) -> [f32; 3] {
        BACKGROUNDS[self.0 as usize % BACKGROUNDS.len()]
    }
}

/// Scene layout; all lengths are fractions of the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub text_tag: TextTag,
    /// (row, col) as fractions of (H, W).
    pub blob_center: (f32, f32),
    /// Fraction of min(H, W).
    pub blob_radius: f32,
    pub mouth_gain: f32,
    /// Maximum downward head offset as a fraction of H.
    pub head_bob_gain: f32,
    pub seed: u64,
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, bottom: height, right: width }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Pixel geometry of a scene at a particular resolution.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    cy: f64,
    cx: f64,
    radius: f64,
    mouth_row: f64,
    mouth_width: f64,
    mouth_max_open: f64,
    max_bob: f64,
}

impl SceneSpec {
    /// Scene drawn from the default toy-world distribution.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ee_d000_0001);
        Self {
            text_tag: TextTag(rng.random_range(0..TEXT_TAGS.len()) as u8),
            blob_center: (rng.random_range(0.44..0.52), rng.random_range(0.42..0.58)),
            blob_radius: rng.random_range(0.30..0.36),
            mouth_gain: rng.random_range(0.75..1.0),
            head_bob_gain: rng.random_range(0.0..0.02),
            seed,
        }
    }

    pub fn blob_color(&self) -> [f32; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xb10b_c010_0000_0002);
        [rng.random_range(0.70..0.95), rng.random_range(0.50..0.80), rng.random_range(0.40..0.70)]
    }

    fn geometry(&self, height: usize, width: usize) -> Geometry {
        let (h, w) = (height as f64, width as f64);
        let radius = self.blob_radius as f64 * h.min(w);
        let cy = self.blob_center.0 as f64 * h;
        Geometry {
            cy,
            cx: self.blob_center.1 as f64 * w,
            radius,
            mouth_row: cy + 0.35 * radius,
            mouth_width: 0.7 * radius,
            mouth_max_open: 0.4 * radius,
            max_bob: self.head_bob_gain as f64 * h,
        }
    }

    /// Box that contains the mouth for every aperture and head offset.
    pub fn mouth_box(&self, height: usize, width: usize) -> PixelBox {
        let g = self.geometry(height, width);
        let top = (g.mouth_row - g.mouth_max_open / 2.0).floor().max(0.0) as usize;
        let bottom = ((g.mouth_row + g.max_bob + g.mouth_max_open / 2.0).ceil() as usize).min(height);
        let left = (g.cx - g.mouth_width / 2.0).floor().max(0.0) as usize;
        let right = ((g.cx + g.mouth_width / 2.0).ceil() as usize).min(width);
        PixelBox { top, left, bottom, right }
    }

    /// Checks the blob stays inside the frame and covers the mouth box at
    /// every head offset.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        ensure!(self.mouth_gain > 0.0 && self.mouth_gain <= 1.0, "mouth_gain must be in (0, 1]");
        ensure!(self.head_bob_gain >= 0.0, "head_bob_gain must be non-negative");
        ensure!(self.blob_radius > 0.0, "blob_radius must be positive");
        let g = self.geometry(height, width);
        ensure!(
            g.cy - g.radius >= 0.0
                && g.cy + g.max_bob + g.radius <= height as f64
                && g.cx - g.radius >= 0.0
                && g.cx + g.radius <= width as f64,
            "blob leaves the {height}x{width} frame"
        );
        let b = self.mouth_box(height, width);
        for bob in [0.0, g.max_bob] {
            for (r, c) in [(b.top, b.left), (b.top, b.right), (b.bottom, b.left), (b.bottom, b.right)] {
                let dy = r as f64 - (g.cy + bob);
                let dx = c as f64 - g.cx;
                ensure!(
                    (dy * dy + dx * dx).sqrt() <= g.radius - 0.75,
                    "mouth box is not covered by the blob"
                );
            }
        }
        Ok(())
    }
}

/// Paired audio/video with the envelope that drove the mouth.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub audio: AudioSignal,
    pub video: VideoClip,
    pub scene: SceneSpec,
    pub envelope: Vec<f32>,
}

/// Carrier tone gated by random 100-400 ms on/off segments with 20 ms ramps,
/// peak-normalised to 0.95.
pub fn gen_audio(seed: u64, duration_s: f64, sample_rate: u32) -> Result<AudioSignal> {
    ensure!(duration_s > 0.0 && duration_s.is_finite(), "duration must be positive, got {duration_s}");
    ensure!(sample_rate > 0, "sample rate must be positive");
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let carrier_hz: f64 = rng.random_range(160.0..420.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut gate = vec![0.0f64; n];
    let mut on = rng.random_bool(0.5);
    let mut pos = 0usize;
    while pos < n {
        let seg = (rng.random_range(0.1..0.4) * sr).round() as usize;
        let end = (pos + seg.max(1)).min(n);
        if on {
            gate[pos..end].iter_mut().for_each(|g| *g = 1.0);
        }
        pos = end;
        on = !on;
    }
    let gate = box_smooth(&gate, ((0.02 * sr).round() as usize).max(1));

    let mut x: Vec<f64> = gate
        .iter()
        .enumerate()
        .map(|(i, g)| g * (std::f64::consts::TAU * carrier_hz * i as f64 / sr + phase).sin())
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(AudioSignal { samples: x.into_iter().map(|v| (v as f32).clamp(-1.0, 1.0)).collect(), sample_rate })
}

/// Centered moving average of width `w` using prefix sums; edges average the
/// available neighbours.
fn box_smooth(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let before = (w - 1) / 2;
    let after = w - 1 - before;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Sample range covered by frame `k`.
fn frame_span(k: usize, fps: f32, sample_rate: u32) -> (usize, usize) {
    let spf = sample_rate as f64 / fps as f64;
    ((k as f64 * spf).round() as usize, ((k + 1) as f64 * spf).round() as usize)
}

/// Per-frame RMS, 3-frame moving average, max-normalised to [0, 1].
pub fn audio_envelope(audio: &AudioSignal, fps: f32, frames: usize) -> Result<Vec<f32>> {
    ensure!(frames >= 1, "need at least one frame");
    let (_, end) = frame_span(frames - 1, fps, audio.sample_rate);
    ensure!(
        end <= audio.samples.len(),
        "audio has {} samples but {frames} frames need {end}",
        audio.samples.len()
    );
    let rms: Vec<f64> = (0..frames)
        .map(|k| {
            let (a, b) = frame_span(k, fps, audio.sample_rate);
            let seg = &audio.samples[a..b];
            (seg.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / seg.len().max(1) as f64).sqrt()
        })
        .collect();
    let smooth = box_smooth(&rms, 3);
    let max = smooth.iter().cloned().fold(0.0f64, f64::max);
    Ok(smooth.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect())
}

/// Trailing 8-frame mean of the envelope, scaled by the bob gain.
fn head_offsets(envelope: &[f32], gain: f32) -> Vec<f32> {
    (0..envelope.len())
        .map(|k| {
            let lo = k.saturating_sub(7);
            let win = &envelope[lo..=k];
            gain * win.iter().sum::<f32>() / win.len() as f32
        })
        .collect()
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn paint_frame(
    mut out: ArrayViewMut3<'_, f32>,
    scene: &SceneSpec,
    g: &Geometry,
    aperture: f32,
    bob_frac: f32,
) {
    let (height, width, _) = out.dim();
    let bg = scene.text_tag.background();
    let blob = scene.blob_color();
    let bob = bob_frac as f64 * height as f64;
    let cy = g.cy + bob;
    let open = aperture.clamp(0.0, 1.0) as f64 * g.mouth_max_open;
    let (m_top, m_bot) = (g.mouth_row + bob - open / 2.0, g.mouth_row + bob + open / 2.0);
    let (m_left, m_right) = (g.cx - g.mouth_width / 2.0, g.cx + g.mouth_width / 2.0);
    for i in 0..height {
        for j in 0..width {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - g.cx;
            let cover = (g.radius - (dy * dy + dx * dx).sqrt() + 0.5).clamp(0.0, 1.0) as f32;
            let mouth = (overlap(i as f64, i as f64 + 1.0, m_top, m_bot)
                * overlap(j as f64, j as f64 + 1.0, m_left, m_right)) as f32;
            for c in 0..3 {
                let skin = bg[c] + cover * (blob[c] - bg[c]);
                out[[i, j, c]] = skin + mouth * (MOUTH_COLOR[c] - skin);
            }
        }
    }
}

/// One frame with an explicit aperture in [0, 1] and head offset (fraction of H).
pub fn render_frame(scene: &SceneSpec, aperture: f32, bob_frac: f32, height: usize, width: usize) -> Array3<f32> {
    let g = scene.geometry(height, width);
    let mut frame = Array3::zeros((height, width, 3));
    paint_frame(frame.view_mut(), scene, &g, aperture, bob_frac);
    frame
}

/// Renders the clip driven by `audio`; frame count is the number of whole
/// frames the audio covers.
pub fn render_video(audio: &AudioSignal, scene: &SceneSpec, fps: f32, height: usize, width: usize) -> Result<TripletSample> {
    ensure!(
        height.is_multiple_of(DIM_MULTIPLE) && width.is_multiple_of(DIM_MULTIPLE) && height > 0 && width > 0,
        "frame size {height}x{width} is not divisible by {DIM_MULTIPLE}"
    );
    ensure!(fps > 0.0, "fps must be positive");
    scene.validate(height, width)?;
    let frames = audio.frame_count(fps);
    ensure!(frames >= 1, "audio is shorter than one frame");
    let envelope = audio_envelope(audio, fps, frames)?;
    let bob = head_offsets(&envelope, scene.head_bob_gain);
    let g = scene.geometry(height, width);
    let mut data = Array4::zeros((frames, height, width, 3));
    for k in 0..frames {
        paint_frame(data.slice_mut(s![k, .., .., ..]), scene, &g, scene.mouth_gain * envelope[k], bob[k]);
    }
    Ok(TripletSample {
        audio: audio.clone(),
        video: VideoClip { frames: data, fps },
        scene: scene.clone(),
        envelope,
    })
}

/// Generates audio for `seed` and renders it with [`SceneSpec::random`].
pub fn gen_triplet(seed: u64, frames: usize, fps: f32, height: usize, width: usize) -> Result<TripletSample> {
    let duration = frames as f64 / fps as f64;
    let audio = gen_audio(seed, duration, DEFAULT_SAMPLE_RATE)?;
    render_video(&audio, &SceneSpec::random(seed), fps, height, width)
}

/// Open-mouth area inside the analytic mouth box, normalised so that a
/// rendered aperture `a` measures as `a`.
pub fn mouth_aperture(frame: ArrayView3<'_, f32>, scene: &SceneSpec) -> f32 {
    let (height, width, _) = frame.dim();
    let g = scene.geometry(height, width);
    let b = scene.mouth_box(height, width);
    let skin = scene.blob_color();
    let dir: Vec<f32> = (0..3).map(|c| skin[c] - MOUTH_COLOR[c]).collect();
    let norm2: f32 = dir.iter().map(|d| d * d).sum();
    let mut open = 0.0f64;
    for i in b.top..b.bottom {
        for j in b.left..b.right {
            let proj: f32 = (0..3).map(|c| (skin[c] - frame[[i, j, c]]) * dir[c]).sum::<f32>() / norm2;
            open += proj.clamp(0.0, 1.0) as f64;
        }
    }
    (open / (g.mouth_width * g.mouth_max_open)) as f32
}

/// Lip-sync score: best lagged correlation and the lag achieving it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncScore {
    pub sync_c: f64,
    /// Positive when the video trails the audio.
    pub sync_d: i32,
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-18 || vb <= 1e-18 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Maximum Pearson correlation of `aperture[k]` against `envelope[k - lag]`
/// over `lag` in `[-max_lag, max_lag]`. Zero-variance input scores `(0, 0)`.
pub fn lagged_sync(aperture: &[f32], envelope: &[f32], max_lag: i32) -> SyncScore {
    let n = aperture.len().min(envelope.len());
    let (aperture, envelope) = (&aperture[..n], &envelope[..n]);
    let flat = |x: &[f32]| x.iter().all(|&v| (v - x[0]).abs() <= 1e-9);
    if n < 2 || flat(aperture) || flat(envelope) {
        return SyncScore { sync_c: 0.0, sync_d: 0 };
    }
    let mut best = SyncScore { sync_c: f64::NEG_INFINITY, sync_d: 0 };
    let mut lags = vec![0i32];
    for d in 1..=max_lag {
        lags.push(d);
        lags.push(-d);
    }
    for lag in lags {
        let m = lag.unsigned_abs() as usize;
        if m + 2 > n {
            continue;
        }
        let c = if lag >= 0 {
            pearson(&aperture[m..], &envelope[..n - m])
        } else {
            pearson(&aperture[..n - m], &envelope[m..])
        };
        if c > best.sync_c {
            best = SyncScore { sync_c: c, sync_d: lag };
        }
    }
    best
}

pub fn measure_apertures(video: &VideoClip, scene: &SceneSpec) -> Vec<f32> {
    (0..video.len()).map(|k| mouth_aperture(video.frame(k), scene)).collect()
}

pub fn sync_confidence(video: &VideoClip, audio: &AudioSignal, scene: &SceneSpec) -> Result<SyncScore> {
    ensure!(video.len() >= 8, "sync scoring needs at least 8 frames, got {}", video.len());
    let envelope = audio_envelope(audio, video.fps, video.len())?;
    let aperture = measure_apertures(video, scene);
    Ok(lagged_sync(&aperture, &envelope, SYNC_MAX_LAG))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub name: String,
    pub remaining: usize,
}

/// Per-stage survivor counts of [`filter_pool`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub input: usize,
    pub stages: Vec<FunnelStage>,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<TripletSample>,
    pub scores: Vec<SyncScore>,
    pub report: FunnelReport,
}

/// Keeps samples with `sync_c >= min_sync_c` and `|sync_d| <= max_abs_sync_d`,
/// in their original order.
pub fn filter_pool(samples: Vec<TripletSample>, min_sync_c: f64, max_abs_sync_d: u32) -> Result<FilterOutcome> {
    ensure!(!min_sync_c.is_nan(), "min_sync_c must not be NaN");
    let input = samples.len();
    let scored: Vec<(TripletSample, SyncScore)> = samples
        .into_iter()
        .map(|s| {
            let score = sync_confidence(&s.video, &s.audio, &s.scene)?;
            Ok((s, score))
        })
        .collect::<Result<_>>()?;
    let stage1: Vec<_> = scored.into_iter().filter(|(_, sc)| sc.sync_c >= min_sync_c).collect();
    let after_confidence = stage1.len();
    let stage2: Vec<_> = stage1.into_iter().filter(|(_, sc)| sc.sync_d.unsigned_abs() <= max_abs_sync_d).collect();
    let report = FunnelReport {
        input,
        stages: vec![
            FunnelStage { name: "sync_confidence".into(), remaining: after_confidence },
            FunnelStage { name: "sync_offset".into(), remaining: stage2.len() },
        ],
    };
    let (kept, scores) = stage2.into_iter().unzip();
    Ok(FilterOutcome { kept, scores, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneSpec {
        SceneSpec::random(11)
    }

    #[test]
    fn gen_audio_peak_and_length() {
        let a = gen_audio(7, 1.0, 16_000).unwrap();
        assert_eq!(a.samples.len(), 16_000);
        let peak = a.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.95).abs() < 1e-6, "peak {peak}");
    }

    #[test]
    fn gen_audio_deterministic_and_seed_dependent() {
        let a = gen_audio(7, 1.0, 16_000).unwrap();
        let b = gen_audio(7, 1.0, 16_000).unwrap();
        assert_eq!(a, b);
        let c = gen_audio(8, 1.0, 16_000).unwrap();
        let on = |x: &AudioSignal| audio_envelope(x, 16.0, 16).unwrap().iter().map(|&v| v > 0.5).collect::<Vec<_>>();
        assert_ne!(on(&a), on(&c));
    }

    #[test]
    fn gen_audio_rejects_bad_duration() {
        assert!(gen_audio(1, 0.0, 16_000).is_err());
        assert!(gen_audio(1, -1.0, 16_000).is_err());
    }

    #[test]
    fn silent_audio_closed_mouth_no_bob() {
        let audio = AudioSignal::silent(16_000, 16_000);
        let mut sc = scene();
        sc.head_bob_gain = 0.02;
        let t = render_video(&audio, &sc, 16.0, 32, 32).unwrap();
        assert!(t.envelope.iter().all(|&e| e == 0.0));
        let still = render_frame(&sc, 0.0, 0.0, 32, 32);
        for k in 0..t.video.len() {
            assert_eq!(t.video.frame(k), still.view());
            assert!(mouth_aperture(t.video.frame(k), &sc).abs() <= 0.02);
        }
    }

    #[test]
    fn constant_audio_envelope_is_one() {
        let audio = AudioSignal::new(vec![0.9; 16_000], 16_000).unwrap();
        let env = audio_envelope(&audio, 16.0, 16).unwrap();
        assert!(env.iter().all(|&e| (e - 1.0).abs() < 1e-6));
    }

    #[test]
    fn render_rejects_indivisible_dims() {
        let audio = gen_audio(1, 1.0, 16_000).unwrap();
        assert!(render_video(&audio, &scene(), 16.0, 30, 32).is_err());
    }

    #[test]
    fn render_measure_roundtrip_correlates() {
        let audio = gen_audio(7, 1.0, 16_000).unwrap();
        let t = render_video(&audio, &scene(), 16.0, 32, 32).unwrap();
        assert_eq!(t.video.len(), 16);
        let measured = measure_apertures(&t.video, &t.scene);
        assert!(pearson(&measured, &t.envelope) >= 0.99);
    }

    #[test]
    fn aperture_measurement_endpoints_and_monotone() {
        let sc = scene();
        assert!(mouth_aperture(render_frame(&sc, 0.0, 0.0, 32, 32).view(), &sc).abs() <= 0.02);
        let full = mouth_aperture(render_frame(&sc, sc.mouth_gain, 0.0, 32, 32).view(), &sc);
        assert!((full - sc.mouth_gain).abs() <= 0.05 * sc.mouth_gain, "{full}");
        let m: Vec<f32> =
            [0.2, 0.5, 0.9].iter().map(|&a| mouth_aperture(render_frame(&sc, a, 0.01, 32, 32).view(), &sc)).collect();
        assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
    }

    #[test]
    fn sync_matched_vs_mismatched() {
        let t = gen_triplet(21, 48, 16.0, 32, 32).unwrap();
        let own = sync_confidence(&t.video, &t.audio, &t.scene).unwrap();
        assert!(own.sync_c >= 0.95 && own.sync_d == 0, "{own:?}");
        let other = gen_audio(22, 3.0, 16_000).unwrap();
        let cross = sync_confidence(&t.video, &other, &t.scene).unwrap();
        assert!(cross.sync_c.abs() < own.sync_c);
    }

    #[test]
    fn sync_zero_variance_and_short_clip() {
        let sc = scene();
        let frame = render_frame(&sc, 0.4, 0.0, 32, 32);
        let frames = Array4::from_shape_fn((10, 32, 32, 3), |(_, i, j, c)| frame[[i, j, c]]);
        let v = VideoClip::new(frames, 16.0).unwrap();
        let audio = gen_audio(3, 1.0, 16_000).unwrap();
        let sc_ = sync_confidence(&v, &audio, &sc).unwrap();
        assert_eq!((sc_.sync_c, sc_.sync_d), (0.0, 0));
        assert!(sync_confidence(&v.slice_frames(0, 7), &audio, &sc).is_err());
    }

    #[test]
    fn sync_lag_detected() {
        let env: Vec<f32> = (0..40).map(|k| ((k as f32) * 0.7).sin().abs()).collect();
        let delayed: Vec<f32> = (0..40).map(|k| if k >= 2 { env[k - 2] } else { 0.0 }).collect();
        let s = lagged_sync(&delayed, &env, 4);
        assert_eq!(s.sync_d, 2);
        assert!(s.sync_c > 0.99);
    }

    #[test]
    fn filter_pool_vacuous_and_impossible() {
        let pool: Vec<_> = (0..3).map(|i| gen_triplet(100 + i, 16, 16.0, 32, 32).unwrap()).collect();
        let all = filter_pool(pool.clone(), -1.0, u32::MAX).unwrap();
        assert_eq!(all.kept, pool);
        let none = filter_pool(pool, 1.01, 0).unwrap();
        assert!(none.kept.is_empty());
        assert_eq!(none.report.stages[0].remaining, 0);
    }

    #[test]
    fn filter_pool_separates_matched_from_shuffled() {
        let matched: Vec<_> = (0..10).map(|i| gen_triplet(200 + i, 48, 16.0, 32, 32).unwrap()).collect();
        let mut pool = matched.clone();
        for i in 0..10 {
            let mut s = matched[i].clone();
            s.audio = matched[(i + 3) % 10].audio.clone();
            pool.push(s);
        }
        let out = filter_pool(pool, 0.5, 1).unwrap();
        let kept_matched = out.kept.iter().filter(|s| matched.contains(s)).count();
        assert_eq!(kept_matched, 10);
        assert!(out.kept.len() - kept_matched <= 2, "{:?}", out.report);
    }
}
