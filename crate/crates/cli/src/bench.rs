//! `bench`: wall time, call counts and fidelity across cache thresholds.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::Serialize;
use talkflow_core::audio::featurize;
use talkflow_core::eval::psnr;
use talkflow_core::inference::{generate, GenerationRequest, WindowConditions};
use talkflow_core::training::fit_audio_stats;
use talkflow_core::world::gen_triplet;
use talkflow_core::{Error, ModelParams, Result, SamplerConfig};

use crate::infer::{finite_or_string, load_stats};
use crate::run::{need, flag, maybe_print, merge, RunManifest};
use crate::Global;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, required_unless_present = "print_config")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated cache thresholds; 0 is always run first as the reference.
    #[arg(long, default_value = "0,0.02,0.05,0.1,0.2,0.4")]
    alphas: String,
    /// Synthetic clip length in frames.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long)]
    audio_stats: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; the table goes to `bench.csv`.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Row {
    alpha: f64,
    seconds: f64,
    denoiser_calls: usize,
    skipped_calls: usize,
    skip_rate: f64,
    psnr_db: f64,
}

pub fn run(a: BenchArgs, g: &Global) -> Result<()> {
    let cfg = merge(
        SamplerConfig::default(),
        "sampler",
        g,
        &[flag("window", &a.window), flag("overlap", &a.overlap), flag("steps", &a.steps), flag("seed", &a.seed)],
    )?;
    if maybe_print(g, &[("sampler", &cfg)]) {
        return Ok(());
    }
    let checkpoint = need(&a.checkpoint, "checkpoint")?;
    let out = need(&a.out, "out")?;
    let mut alphas: Vec<f64> = a
        .alphas
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad alpha {s:?}"))))
        .collect::<Result<_>>()?;
    alphas.retain(|&x| x != 0.0);
    alphas.insert(0, 0.0);

    let params = ModelParams::load(checkpoint)?;
    let mcfg = params.config().clone();
    let clip = gen_triplet(cfg.seed, a.frames, 16.0, 32, 32)?;
    let stats = match load_stats(a.audio_stats.as_deref(), checkpoint) {
        Ok(s) => s,
        Err(_) => {
            log::warn!("no audio stats beside the checkpoint; fitting on the benchmark clip");
            fit_audio_stats(std::slice::from_ref(&clip), &mcfg)?
        }
    };
    let tokens = stats.normalize(&featurize(&clip.audio, 16.0, a.frames, mcfg.tokens_per_frame, mcfg.audio_dim)?)?;
    let plan = cfg.plan(a.frames)?;
    let conds = WindowConditions::animation(&clip.video.slice_frames(0, 1), &plan, mcfg.patch)?;
    let req = GenerationRequest {
        conds: &conds,
        audio: &tokens,
        text: Some(clip.scene.text_tag.index()),
        frames: a.frames,
        height: 32,
        width: 32,
        fps: 16.0,
    };

    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut reference = None;
    let mut summary = Vec::new();
    for alpha in alphas {
        let c = SamplerConfig { cache_alpha: alpha, ..cfg.clone() };
        let started = Instant::now();
        let out = generate(&params, &req, &c)?;
        let seconds = started.elapsed().as_secs_f64();
        let base = reference.get_or_insert_with(|| out.video.clone());
        let row = Row {
            alpha,
            seconds,
            denoiser_calls: out.stats.denoiser_calls,
            skipped_calls: out.stats.skipped_calls,
            skip_rate: out.stats.skip_rate(),
            psnr_db: psnr(&out.video, base)?,
        };
        log::info!("alpha {alpha}: {seconds:.2}s, skip rate {:.3}, psnr {:.2} dB", row.skip_rate, row.psnr_db);
        summary.push(serde_json::json!({ "alpha": alpha, "skip_rate": row.skip_rate, "psnr_db": finite_or_string(row.psnr_db) }));
        w.serialize(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    let mut run = RunManifest::new("bench", &[("sampler", &cfg)]);
    run.outputs = vec!["bench.csv".into()];
    run.summary = serde_json::Value::Array(summary);
    run.write(out)?;
    println!("{}", out.join("bench.csv").display());
    Ok(())
}
