//! Flow-matching training with the weighted joint loss, the gated lip loss,
//! task sampling, condition dropout and Adam.
//!
//! Every step draws from its own ChaCha8 stream keyed by `(seed, step)`, so a
//! run resumed from a checkpoint (parameters plus optimizer state) replays the
//! exact trajectory of an uninterrupted run.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use ndarray::{Array4, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{featurize, AudioTokens, FeatureStats};
use crate::codec::{box_mask, build_condition_inputs, encode, pool_mask, LatentMask, LatentVideo, Task};
use crate::config::{parse_value, unknown_key, KvConfig};
use crate::denoiser::{accumulate_grad, DenoiseInput, DenoiserConfig, ModelParams};
use crate::error::{ensure, Error, Result};
use crate::world::{PixelBox, TripletSample, VideoClip};

fn check_pair(a: &LatentVideo, b: &LatentVideo) -> Result<()> {
    ensure!(a.same_shape(b) && a.patch == b.patch, "latent shapes differ: {:?} vs {:?}", a.dim(), b.dim());
    Ok(())
}

/// `(1 - t) z0 + t z1`; `z0` is noise, `z1` data.
pub fn interpolate(z0: &LatentVideo, z1: &LatentVideo, t: f64) -> Result<LatentVideo> {
    check_pair(z0, z1)?;
    ensure!((0.0..=1.0).contains(&t), "t must be in [0, 1], got {t}");
    let mut data = z0.data.clone();
    data.zip_mut_with(&z1.data, |a, &b| *a = ((1.0 - t) * *a as f64 + t * b as f64) as f32);
    Ok(LatentVideo { data, patch: z0.patch })
}

/// `z1 - z0`, the constant velocity of the interpolation path.
pub fn velocity_target(z0: &LatentVideo, z1: &LatentVideo) -> Result<LatentVideo> {
    check_pair(z0, z1)?;
    Ok(LatentVideo { data: &z1.data - &z0.data, patch: z0.patch })
}

fn check_mask(pred: &LatentVideo, target: &LatentVideo, mask: &LatentMask) -> Result<()> {
    check_pair(pred, target)?;
    let (t, _, h, w) = pred.dim();
    ensure!(mask.data.dim() == (t, 1, h, w), "mask shape {:?} does not fit latent {:?}", mask.data.dim(), pred.dim());
    Ok(())
}

/// Weighted squared error `mean[(w1 m + w2 (1 - m)) (pred - target)^2]` and
/// its gradient w.r.t. `pred`; `mask` is `[T, 1, h, w]` broadcast over channels.
pub fn joint_loss_grad<S: NdFloat>(
    pred: &Array4<S>,
    target: &Array4<S>,
    mask: &Array4<f32>,
    w1: f64,
    w2: f64,
) -> (S, Array4<S>) {
    let n = S::from(pred.len()).expect("count");
    let (w1, w2) = (S::from(w1).expect("w1"), S::from(w2).expect("w2"));
    let mut loss = S::zero();
    let mut grad = Array4::zeros(pred.raw_dim());
    for (((k, _, y, x), g), (&p, &q)) in grad.indexed_iter_mut().zip(pred.iter().zip(target.iter())) {
        let m = S::from(mask[[k, 0, y, x]]).expect("mask");
        let wt = w1 * m + w2 * (S::one() - m);
        let d = p - q;
        loss += wt * d * d;
        *g = (S::one() + S::one()) * wt * d / n;
    }
    (loss / n, grad)
}

/// Plain MSE when `restricted` is false, otherwise the mean over the lip
/// mask's elements (broadcast over channels). The flag is true when a
/// restricted loss met an empty mask, in which case the loss is zero.
pub fn face_loss_grad<S: NdFloat>(
    pred: &Array4<S>,
    target: &Array4<S>,
    lip: &Array4<f32>,
    restricted: bool,
) -> (S, Array4<S>, bool) {
    let channels = pred.dim().1;
    let count = if restricted { lip.iter().filter(|&&v| v != 0.0).count() * channels } else { pred.len() };
    let mut grad = Array4::zeros(pred.raw_dim());
    if count == 0 {
        return (S::zero(), grad, true);
    }
    let n = S::from(count).expect("count");
    let mut loss = S::zero();
    for (((k, _, y, x), g), (&p, &q)) in grad.indexed_iter_mut().zip(pred.iter().zip(target.iter())) {
        let m = if restricted { S::from(lip[[k, 0, y, x]]).expect("mask") } else { S::one() };
        let d = p - q;
        loss += m * d * d;
        *g = (S::one() + S::one()) * m * d / n;
    }
    (loss / n, grad, false)
}

fn to_f64(z: &LatentVideo) -> Array4<f64> {
    z.data.mapv(f64::from)
}

/// Spatially weighted MSE with weight `w1` inside `mask` and `w2` outside.
pub fn loss_joint(pred: &LatentVideo, target: &LatentVideo, mask: &LatentMask, w1: f64, w2: f64) -> Result<f64> {
    check_mask(pred, target, mask)?;
    ensure!(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite(), "loss weights must be non-negative");
    Ok(joint_loss_grad(&to_f64(pred), &to_f64(target), &mask.data, w1, w2).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceLoss {
    pub value: f64,
    /// The lip-restricted branch was taken (`u < p_mask`).
    pub restricted: bool,
    /// Restricted branch with an empty lip mask; the value is zero.
    pub empty_mask: bool,
}

/// Gated lip loss: full MSE when `u >= p_mask`, else MSE inside `lip`.
pub fn loss_face(pred: &LatentVideo, target: &LatentVideo, lip: &LatentMask, u: f64, p_mask: f64) -> Result<FaceLoss> {
    check_mask(pred, target, lip)?;
    let restricted = u < p_mask;
    let (value, _, empty_mask) = face_loss_grad(&to_f64(pred), &to_f64(target), &lip.data, restricted);
    if empty_mask {
        log::warn!("lip mask is empty; face loss set to zero");
    }
    Ok(FaceLoss { value, restricted, empty_mask })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub lambda_face: f64,
    pub p_mask: f64,
    /// Use the joint loss on even steps and the face loss on odd steps
    /// instead of summing them.
    pub alternate_face: bool,
    /// Drop probability of each condition (reference/video, audio, text).
    pub dropout_p: f64,
    /// Fraction of editing tasks in the joint stage; 0.5 is a 1:1 mix.
    pub editing_ratio: f64,
    /// Steps `0..stage1_steps` train the animation task only.
    pub stage1_steps: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Training crops this many frames from longer clips.
    pub clip_frames: usize,
    pub seed: u64,
    pub log_interval: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w1: 2.0,
            w2: 1.0,
            lambda_face: 1.0,
            p_mask: 0.5,
            alternate_face: false,
            dropout_p: 0.15,
            editing_ratio: 0.5,
            stage1_steps: 0,
            batch_size: 4,
            steps: 1000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            clip_frames: 16,
            seed: 0,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        ensure!(self.w1 >= 0.0 && self.w2 >= 0.0, "w1 and w2 must be non-negative");
        ensure!(self.lambda_face >= 0.0, "lambda_face must be non-negative");
        ensure!(unit(self.p_mask) && unit(self.dropout_p) && unit(self.editing_ratio), "probabilities must be in [0, 1]");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        ensure!(unit(self.beta1) && unit(self.beta2) && self.adam_eps > 0.0, "bad Adam hyperparameters");
        ensure!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        ensure!(self.clip_frames >= 1, "clip_frames must be at least 1");
        ensure!(self.log_interval >= 1, "log_interval must be at least 1");
        Ok(())
    }

    fn step_rng(&self, step: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * step + stream);
        rng
    }
}

impl KvConfig for TrainConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "w1" => self.w1 = parse_value(key, value)?,
            "w2" => self.w2 = parse_value(key, value)?,
            "lambda_face" => self.lambda_face = parse_value(key, value)?,
            "p_mask" => self.p_mask = parse_value(key, value)?,
            "alternate_face" => self.alternate_face = parse_value(key, value)?,
            "dropout_p" => self.dropout_p = parse_value(key, value)?,
            "editing_ratio" => self.editing_ratio = parse_value(key, value)?,
            "stage1_steps" => self.stage1_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "clip_frames" => self.clip_frames = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_interval" => self.log_interval = parse_value(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("w1", self.w1.to_string()),
            ("w2", self.w2.to_string()),
            ("lambda_face", self.lambda_face.to_string()),
            ("p_mask", self.p_mask.to_string()),
            ("alternate_face", self.alternate_face.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("editing_ratio", self.editing_ratio.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("clip_frames", self.clip_frames.to_string()),
            ("seed", self.seed.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ]
    }
}

/// One triplet in training form.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video: VideoClip,
    pub latent: LatentVideo,
    /// Normalized tokens for the whole clip.
    pub audio: AudioTokens,
    pub text: usize,
    pub mouth_box: PixelBox,
}

/// Raw (unnormalized) audio tokens of a triplet under `cfg`.
pub fn raw_audio_tokens(sample: &TripletSample, cfg: &DenoiserConfig) -> Result<AudioTokens> {
    featurize(&sample.audio, sample.video.fps, sample.video.len(), cfg.tokens_per_frame, cfg.audio_dim)
}

/// Feature statistics over a training pool.
pub fn fit_audio_stats(samples: &[TripletSample], cfg: &DenoiserConfig) -> Result<FeatureStats> {
    let raw: Vec<AudioTokens> = samples.iter().map(|s| raw_audio_tokens(s, cfg)).collect::<Result<_>>()?;
    FeatureStats::fit(&raw)
}

impl TrainExample {
    pub fn from_triplet(sample: &TripletSample, stats: &FeatureStats, cfg: &DenoiserConfig) -> Result<Self> {
        let (height, width) = (sample.video.height(), sample.video.width());
        Ok(Self {
            video: sample.video.clone(),
            latent: encode(&sample.video, cfg.patch)?,
            audio: stats.normalize(&raw_audio_tokens(sample, cfg)?)?,
            text: sample.scene.text_tag.index(),
            mouth_box: sample.scene.mouth_box(height, width),
        })
    }
}

/// Per-step diagnostics; counters are summed over the batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_joint: f64,
    pub loss_face: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub animation_tasks: usize,
    pub editing_tasks: usize,
    pub dropped_cond: usize,
    pub dropped_audio: usize,
    pub dropped_text: usize,
    /// Denoiser calls with every condition null.
    pub all_null_calls: usize,
    pub lip_restricted: usize,
    pub empty_lip_masks: usize,
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

const ADAM_MAGIC: &[u8; 8] = b"TKFLOWAD";

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = self.beta1 * self.m[i] as f64 + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] as f64 + (1.0 - self.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let upd = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - upd) as f32;
        }
    }

    /// `magic | u64 step | u64 len | f64 lr, beta1, beta2, eps | m | v | crc32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56 + 8 * self.m.len() + 4);
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for h in [self.lr, self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, message: &str| Error::Decode { offset: offset as u64, message: message.into() };
        if bytes.len() < 60 || &bytes[..8] != ADAM_MAGIC {
            return Err(bad(0, "not an optimizer state file"));
        }
        let body = bytes.len() - 4;
        let crc = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != crc {
            return Err(bad(body, "checksum mismatch"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let step = u64_at(8);
        let len = u64_at(16) as usize;
        if body != 56 + 8 * len {
            return Err(bad(16, "length does not match payload"));
        }
        let floats: Vec<f32> = bytes[56..body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (m, v) = floats.split_at(len);
        Ok(Self { lr: f64_at(24), beta1: f64_at(32), beta2: f64_at(40), eps: f64_at(48), step, m: m.to_vec(), v: v.to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Example indices for `step`, drawn with replacement.
pub fn select_batch(len: usize, cfg: &TrainConfig, step: u64) -> Vec<usize> {
    let mut rng = cfg.step_rng(step, 0);
    (0..cfg.batch_size).map(|_| rng.random_range(0..len)).collect()
}

/// One optimizer step on `batch`; all randomness comes from `(cfg.seed, step)`.
pub fn train_step(
    batch: &[&TrainExample],
    params: &mut ModelParams,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    ensure!(!batch.is_empty(), "batch must not be empty");
    let mcfg = params.config().clone();
    let mut rng = cfg.step_rng(step, 1);
    let mut grads = vec![0f32; params.len()];
    let mut metrics = StepMetrics { step, ..StepMetrics::default() };
    let scale = 1.0 / batch.len() as f64;
    let (use_joint, use_face) = match (cfg.alternate_face, step % 2) {
        (false, _) => (true, true),
        (true, 0) => (true, false),
        (true, _) => (false, true),
    };

    for ex in batch {
        let total = ex.latent.frames();
        let n = cfg.clip_frames.min(total);
        let start = if total > n { rng.random_range(0..=total - n) } else { 0 };
        let video = ex.video.slice_frames(start, start + n);
        let z1 = ex.latent.slice_frames(start, start + n);
        let audio = ex.audio.slice_frames(start, start + n)?;

        let task = if step < cfg.stage1_steps || !rng.random_bool(cfg.editing_ratio) {
            Task::Animation
        } else {
            Task::Editing
        };
        let boxes = vec![ex.mouth_box; n];
        let cond = build_condition_inputs(task, &video, Some(&boxes), n, mcfg.patch)?;
        let drop_cond = rng.random_bool(cfg.dropout_p);
        let drop_audio = rng.random_bool(cfg.dropout_p);
        let drop_text = rng.random_bool(cfg.dropout_p);
        let t: f64 = rng.random();
        let u: f64 = rng.random();
        let noise = z1.data.mapv(|_| rng.sample::<f32, _>(StandardNormal));
        let z0 = LatentVideo { data: noise, patch: z1.patch };
        let z_t = interpolate(&z0, &z1, t)?;
        let target = velocity_target(&z0, &z1)?.data;
        let (height, width) = (video.height(), video.width());
        let lip = pool_mask(box_mask(n, height, width, &ex.mouth_box).view(), mcfg.patch)?;

        match task {
            Task::Animation => metrics.animation_tasks += 1,
            Task::Editing => metrics.editing_tasks += 1,
        }
        metrics.dropped_cond += drop_cond as usize;
        metrics.dropped_audio += drop_audio as usize;
        metrics.dropped_text += drop_text as usize;
        metrics.all_null_calls += (drop_cond && drop_audio && drop_text) as usize;
        let restricted = u < cfg.p_mask;
        metrics.lip_restricted += restricted as usize;

        let input = DenoiseInput {
            z_t: &z_t,
            t: t as f32,
            text: (!drop_text).then_some(ex.text),
            cond: (!drop_cond).then_some(&cond),
            audio: (!drop_audio).then_some(&audio),
        };
        let mut parts = (0.0, 0.0, false);
        accumulate_grad(
            &input,
            params,
            |pred| {
                let mut g = Array4::zeros(pred.raw_dim());
                let mut total = 0.0f32;
                if use_joint {
                    let (l, gj) = joint_loss_grad(pred, &target, &cond.cond_mask.data, cfg.w1, cfg.w2);
                    parts.0 = l as f64;
                    total += l;
                    g += &gj;
                }
                if use_face {
                    let (l, gf, empty) = face_loss_grad(pred, &target, &lip.data, restricted);
                    parts.1 = l as f64;
                    parts.2 = empty;
                    total += cfg.lambda_face as f32 * l;
                    g.scaled_add(cfg.lambda_face as f32, &gf);
                }
                g.mapv_inplace(|v| v * scale as f32);
                (total, g)
            },
            &mut grads,
        )?;
        metrics.loss_joint += parts.0 * scale;
        metrics.loss_face += parts.1 * scale;
        if parts.2 {
            metrics.empty_lip_masks += 1;
            log::warn!("step {step}: empty lip mask");
        }
    }
    metrics.loss = metrics.loss_joint + cfg.lambda_face * metrics.loss_face;
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    metrics.grad_norm = norm;
    if !metrics.loss.is_finite() || !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: loss_joint {} loss_face {} grad_norm {norm}",
            metrics.loss_joint, metrics.loss_face
        )));
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let k = (cfg.grad_clip / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    opt.update(params.as_mut_slice(), &grads);
    Ok(metrics)
}

#[derive(Debug, Serialize)]
struct LogRow {
    step: u64,
    loss: f64,
    loss_joint: f64,
    loss_face: f64,
    grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    /// Metrics of every step run in this call.
    pub history: Vec<StepMetrics>,
}

/// Optimizer state path paired with a checkpoint path.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("adam")
}

fn save_pair(params: &ModelParams, opt: &Adam, path: &Path) -> Result<()> {
    params.save(path)?;
    opt.save(optimizer_path(path))
}

/// Runs steps until `cfg.steps`, logging every `log_interval` steps to
/// `out_dir/metrics.csv` and checkpointing to `out_dir`. With `resume`, the
/// parameters and optimizer state are loaded from that checkpoint and the
/// run continues at the step after it.
pub fn train_loop(
    data: &[TrainExample],
    init: ModelParams,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "training set is empty");
    std::fs::create_dir_all(out_dir)?;
    let (mut params, mut opt) = match resume {
        Some(path) => {
            let p = ModelParams::load_expecting(path, init.config())?;
            let o = Adam::load(optimizer_path(path))?;
            ensure!(o.m.len() == p.len(), "optimizer state does not match the model");
            (p, o)
        }
        None => {
            let n = init.len();
            (init, Adam::new(n, cfg))
        }
    };
    let metrics_csv = out_dir.join("metrics.csv");
    let fresh = resume.is_none() || !metrics_csv.exists();
    let file = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&metrics_csv)?;
    let mut log = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);

    let mut history = Vec::new();
    for step in opt.step..cfg.steps {
        let batch: Vec<&TrainExample> = select_batch(data.len(), cfg, step).into_iter().map(|i| &data[i]).collect();
        let m = train_step(&batch, &mut params, &mut opt, cfg, step)?;
        if (step + 1) % cfg.log_interval == 0 {
            log.serialize(LogRow {
                step: step + 1,
                loss: m.loss,
                loss_joint: m.loss_joint,
                loss_face: m.loss_face,
                grad_norm: m.grad_norm,
            })
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            log.flush()?;
            log::info!("step {} loss {:.5} (joint {:.5}, face {:.5})", step + 1, m.loss, m.loss_joint, m.loss_face);
        }
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            save_pair(&params, &opt, &out_dir.join(format!("step_{:06}.ckpt", step + 1)))?;
        }
        history.push(m);
    }
    log.flush()?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_pair(&params, &opt, &final_checkpoint)?;
    Ok(TrainOutcome { params, final_checkpoint, metrics_csv, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::gen_triplet;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::Rng;

    fn latent(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> LatentVideo {
        LatentVideo { data: Array4::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0)), patch: 1 }
    }

    fn random_mask(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> LatentMask {
        let mut m = LatentMask::zeros(t, h, w);
        m.data.mapv_inplace(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        m
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (latent(&mut rng, (2, 3, 2, 2)), latent(&mut rng, (2, 3, 2, 2)));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.data.iter().zip(a.data.iter()).zip(b.data.iter()) {
            assert_eq!(*m, ((*x as f64 + *y as f64) / 2.0) as f32);
        }
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &latent(&mut rng, (1, 3, 2, 2)), 0.5).is_err());
    }

    #[test]
    fn velocity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (latent(&mut rng, (2, 3, 2, 2)), latent(&mut rng, (2, 3, 2, 2)));
        assert!(velocity_target(&a, &a).unwrap().data.iter().all(|&v| v == 0.0));
        let zero = LatentVideo { data: Array4::zeros(a.data.raw_dim()), patch: 1 };
        assert_eq!(velocity_target(&zero, &b).unwrap(), b);
    }

    #[test]
    fn joint_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, q) = (latent(&mut rng, (3, 4, 2, 3)), latent(&mut rng, (3, 4, 2, 3)));
        let m = random_mask(&mut rng, 3, 2, 3);
        assert_eq!(loss_joint(&p, &p, &m, 2.0, 1.0).unwrap(), 0.0);
        let mut oracle = 0.0;
        let mut plain = 0.0;
        for k in 0..3 {
            for c in 0..4 {
                for y in 0..2 {
                    for x in 0..3 {
                        let d = p.data[[k, c, y, x]] as f64 - q.data[[k, c, y, x]] as f64;
                        oracle += 2.0 * m.data[[k, 0, y, x]] as f64 * d * d;
                        plain += d * d;
                    }
                }
            }
        }
        let n = p.data.len() as f64;
        assert!((loss_joint(&p, &q, &m, 2.0, 0.0).unwrap() - oracle / n).abs() < 1e-12);
        assert!((loss_joint(&p, &q, &m, 1.0, 1.0).unwrap() - plain / n).abs() < 1e-12);
        assert!(loss_joint(&p, &q, &m, -1.0, 1.0).is_err());
    }

    #[test]
    fn face_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, q) = (latent(&mut rng, (2, 3, 3, 3)), latent(&mut rng, (2, 3, 3, 3)));
        let ones = LatentMask::ones(2, 3, 3);
        let mse = loss_joint(&p, &q, &ones, 1.0, 1.0).unwrap();
        let open = loss_face(&p, &q, &random_mask(&mut rng, 2, 3, 3), 1.0, 0.5).unwrap();
        assert!(!open.restricted && (open.value - mse).abs() < 1e-12);
        assert!((loss_face(&p, &q, &ones, 0.0, 0.5).unwrap().value - mse).abs() < 1e-12);

        let m = random_mask(&mut rng, 2, 3, 3);
        let (mut num, mut den) = (0.0, 0.0);
        for ((k, c, y, x), &a) in p.data.indexed_iter() {
            let w = m.data[[k, 0, y, x]] as f64;
            let d = a as f64 - q.data[[k, c, y, x]] as f64;
            num += w * d * d;
            den += w;
        }
        let f = loss_face(&p, &q, &m, 0.0, 0.5).unwrap();
        assert!(f.restricted && (f.value - num / den).abs() < 1e-12);

        let empty = loss_face(&p, &q, &LatentMask::zeros(2, 3, 3), 0.1, 0.5).unwrap();
        assert_eq!((empty.value, empty.empty_mask), (0.0, true));
    }

    #[test]
    fn gate_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hits = (0..10_000).filter(|_| rng.random::<f64>() < 0.5).count();
        assert!((4_800..=5_200).contains(&hits), "{hits}");
    }

    proptest! {
        #[test]
        fn joint_loss_nonnegative_and_zero_iff_equal(seed in 0u64..1000, w1 in 0.01f64..3.0, w2 in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, mut q) = (latent(&mut rng, (2, 2, 2, 2)), latent(&mut rng, (2, 2, 2, 2)));
            let m = random_mask(&mut rng, 2, 2, 2);
            prop_assert!(loss_joint(&p, &q, &m, w1, w2).unwrap() > 0.0);
            q.data.assign(&p.data);
            prop_assert_eq!(loss_joint(&p, &q, &m, w1, w2).unwrap(), 0.0);
        }

        #[test]
        fn velocity_is_linear(seed in 0u64..1000, a in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z0, z1) = (latent(&mut rng, (1, 2, 2, 2)), latent(&mut rng, (1, 2, 2, 2)));
            let s = |z: &LatentVideo| LatentVideo { data: z.data.mapv(|v| v * a), patch: 1 };
            let lhs = velocity_target(&s(&z0), &s(&z1)).unwrap().data;
            let rhs = velocity_target(&z0, &z1).unwrap().data.mapv(|v| v * a);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }

    fn tiny_setup() -> (Vec<TrainExample>, ModelParams) {
        let cfg = DenoiserConfig { width: 12, depth: 1, heads: 2, ..DenoiserConfig::with_width_depth(12, 1) };
        let samples: Vec<TripletSample> = (0..2).map(|s| gen_triplet(s, 12, 16.0, 32, 32).unwrap()).collect();
        let stats = fit_audio_stats(&samples, &cfg).unwrap();
        let data = samples.iter().map(|s| TrainExample::from_triplet(s, &stats, &cfg).unwrap()).collect();
        (data, ModelParams::init(cfg, 0).unwrap())
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2, clip_frames: 8, steps: 6, log_interval: 2, ..TrainConfig::default() }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (data, init) = tiny_setup();
        let cfg = tiny_train_cfg();
        let run = || {
            let mut p = init.clone();
            let mut opt = Adam::new(p.len(), &cfg);
            for step in 0..4 {
                let batch: Vec<&TrainExample> = select_batch(data.len(), &cfg, step).into_iter().map(|i| &data[i]).collect();
                train_step(&batch, &mut p, &mut opt, &cfg, step).unwrap();
            }
            p.as_slice().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forced_dropout_nulls_everything() {
        let (data, mut p) = tiny_setup();
        let cfg = TrainConfig { dropout_p: 1.0, ..tiny_train_cfg() };
        let mut opt = Adam::new(p.len(), &cfg);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let m = train_step(&batch, &mut p, &mut opt, &cfg, 0).unwrap();
        assert_eq!(m.all_null_calls, batch.len());
    }

    #[test]
    fn stage_one_never_edits() {
        let (data, mut p) = tiny_setup();
        let cfg = TrainConfig { stage1_steps: 10, editing_ratio: 1.0, ..tiny_train_cfg() };
        let mut opt = Adam::new(p.len(), &cfg);
        for step in 0..5 {
            let batch: Vec<&TrainExample> = data.iter().collect();
            assert_eq!(train_step(&batch, &mut p, &mut opt, &cfg, step).unwrap().editing_tasks, 0);
        }
    }

    #[test]
    fn adam_state_roundtrip_and_corruption() {
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(5, &cfg);
        let mut p = vec![0.5f32; 5];
        opt.update(&mut p, &[0.1, -0.2, 0.3, 0.0, 1.0]);
        let bytes = opt.to_bytes();
        assert_eq!(Adam::from_bytes(&bytes).unwrap(), opt);
        let mut bad = bytes.clone();
        bad[60] ^= 1;
        assert!(matches!(Adam::from_bytes(&bad), Err(Error::Decode { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, init) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_interval: 3, ..tiny_train_cfg() };
        let full = train_loop(&data, init.clone(), &cfg, &dir.path().join("full"), None).unwrap();
        let rows = std::fs::read_to_string(&full.metrics_csv).unwrap().lines().count() - 1;
        assert_eq!(rows as u64, cfg.steps / cfg.log_interval);

        let first = train_loop(&data, init.clone(), &TrainConfig { steps: 3, ..cfg.clone() }, &dir.path().join("a"), None)
            .unwrap();
        let resumed = train_loop(&data, init, &cfg, &dir.path().join("b"), Some(&first.final_checkpoint)).unwrap();
        assert_eq!(resumed.history.len(), 3);
        assert_eq!(resumed.params.as_slice(), full.params.as_slice());
        assert_eq!(resumed.history[0], full.history[3]);
    }
}
