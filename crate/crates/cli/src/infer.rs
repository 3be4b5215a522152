//! `infer`: audio plus a reference image (animation) or video (editing) to
//! a generated clip.

use std::path::{Path, PathBuf};

use clap::Args;
use talkflow_core::audio::featurize;
use talkflow_core::audio::FeatureStats;
use talkflow_core::eval::seam_gap_ratio;
use talkflow_core::inference::{generate, GenerationRequest, WindowConditions};
use talkflow_core::io::{read_frames, read_png, read_wav, write_frames, write_gif};
use talkflow_core::world::{PixelBox, TextTag};
use talkflow_core::{Error, ModelParams, Result, SamplerConfig, VideoClip};

use crate::run::{need, flag, maybe_print, merge, read_json, write_json, RunManifest};
use crate::train::AUDIO_STATS_FILE;
use crate::Global;

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, required_unless_present = "print_config")]
    checkpoint: Option<PathBuf>,
    /// Driving audio (WAV).
    #[arg(long, required_unless_present = "print_config")]
    audio: Option<PathBuf>,
    /// Reference frame for animation (PNG).
    #[arg(long, conflicts_with = "ref_video")]
    ref_image: Option<PathBuf>,
    /// Directory of source frames for editing.
    #[arg(long)]
    ref_video: Option<PathBuf>,
    /// Mouth region of the source video as `top,left,bottom,right` pixels.
    #[arg(long, requires = "ref_video")]
    mouth_box: Option<String>,
    /// Text tag; omitted means no text condition.
    #[arg(long)]
    text: Option<String>,
    /// Output length in frames; defaults to the audio's length.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 16.0)]
    fps: f32,
    /// Defaults to `<checkpoint dir>/audio_stats.json`.
    #[arg(long)]
    audio_stats: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_audio: Option<f64>,
    #[arg(long)]
    cfg_text: Option<f64>,
    #[arg(long)]
    cfg_mode: Option<String>,
    /// Noisiest steps that use the source video; with --ref-video and no
    /// value anywhere, every step does.
    #[arg(long)]
    hybrid_n: Option<usize>,
    #[arg(long)]
    cache_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

pub fn parse_box(text: &str) -> Result<PixelBox> {
    let v: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad mouth box {text:?}"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [top, left, bottom, right] if top < bottom && left < right => Ok(PixelBox { top, left, bottom, right }),
        _ => Err(Error::InvalidArgument(format!("mouth box must be top,left,bottom,right, got {text:?}"))),
    }
}

pub fn load_stats(explicit: Option<&Path>, checkpoint: &Path) -> Result<FeatureStats> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(AUDIO_STATS_FILE),
    };
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("audio stats not found at {}", path.display())));
    }
    read_json(&path)
}

pub fn run(a: InferArgs, g: &Global) -> Result<()> {
    let mut cfg = merge(
        SamplerConfig::default(),
        "sampler",
        g,
        &[
            flag("window", &a.window),
            flag("overlap", &a.overlap),
            flag("steps", &a.steps),
            flag("cfg_audio", &a.cfg_audio),
            flag("cfg_text", &a.cfg_text),
            flag("cfg_mode", &a.cfg_mode),
            flag("hybrid_switch", &a.hybrid_n),
            flag("cache_alpha", &a.cache_alpha),
            flag("seed", &a.seed),
        ],
    )?;
    let hybrid_given = a.hybrid_n.is_some() || g.config.iter().any(|(k, _)| k == "sampler.hybrid_switch");
    if a.ref_video.is_some() && !hybrid_given {
        cfg.hybrid_switch = cfg.steps;
    }
    if maybe_print(g, &[("sampler", &cfg)]) {
        return Ok(());
    }
    let checkpoint = need(&a.checkpoint, "checkpoint")?;
    let audio_path = need(&a.audio, "audio")?;
    let out_dir = need(&a.out, "out")?;
    let params = ModelParams::load(checkpoint)?;
    let mcfg = params.config().clone();
    let stats = load_stats(a.audio_stats.as_deref(), checkpoint)?;
    let audio = read_wav(audio_path)?;
    let frames = a.frames.unwrap_or_else(|| audio.frame_count(a.fps));
    if frames == 0 {
        return Err(Error::InvalidArgument("audio is shorter than one frame".into()));
    }
    let text = match &a.text {
        Some(t) => Some(TextTag::from_name(t).ok_or_else(|| Error::InvalidArgument(format!("unknown text tag {t:?}")))?.index()),
        None => None,
    };
    let source = match (&a.ref_image, &a.ref_video) {
        (Some(p), None) => {
            let img = read_png(p)?;
            VideoClip::new(img.insert_axis(ndarray_axis0()), a.fps)?
        }
        (None, Some(dir)) => {
            let v = read_frames(dir, a.fps)?;
            if v.len() < frames {
                return Err(Error::InvalidArgument(format!("source video has {} frames, need {frames}", v.len())));
            }
            v.slice_frames(0, frames)
        }
        _ => return Err(Error::InvalidArgument("pass exactly one of --ref-image or --ref-video".into())),
    };
    let plan = cfg.plan(frames)?;
    let mut conds = WindowConditions::animation(&source.slice_frames(0, 1), &plan, mcfg.patch)?;
    if a.ref_video.is_some() {
        let b = a
            .mouth_box
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--ref-video needs --mouth-box".into()))
            .and_then(parse_box)?;
        conds = conds.with_video(&source, &vec![b; frames], &plan, mcfg.patch)?;
    }
    let tokens = stats.normalize(&featurize(&audio, a.fps, frames, mcfg.tokens_per_frame, mcfg.audio_dim)?)?;
    let req = GenerationRequest {
        conds: &conds,
        audio: &tokens,
        text,
        frames,
        height: source.height(),
        width: source.width(),
        fps: a.fps,
    };
    let started = std::time::Instant::now();
    let out = generate(&params, &req, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(out_dir)?;
    write_frames(out_dir.join("frames"), &out.video)?;
    write_gif(out_dir.join("preview.gif"), &out.video)?;
    let metrics = serde_json::json!({
        "frames": frames,
        "seconds": elapsed,
        "plan": out.plan,
        "seam_pairs": out.plan.seam_pairs(),
        "seam_gap_ratio": finite_or_string(seam_gap_ratio(&out.video, &out.plan)),
        "skip_rate": out.stats.skip_rate(),
        "cache": out.stats,
    });
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    let mut run = RunManifest::new("infer", &[("sampler", &cfg)]);
    run.outputs = vec!["frames".into(), "preview.gif".into(), "metrics.json".into()];
    run.write(out_dir)?;
    println!("{}", out_dir.display());
    Ok(())
}

fn ndarray_axis0() -> talkflow_core::ndarray::Axis {
    talkflow_core::ndarray::Axis(0)
}

pub fn finite_or_string(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}
