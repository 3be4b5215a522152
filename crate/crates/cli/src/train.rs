//! `train`: fit a denoiser on a generated dataset.

use std::path::PathBuf;

use clap::Args;
use talkflow_core::io::DatasetManifest;
use talkflow_core::training::{fit_audio_stats, train_loop, TrainExample};
use talkflow_core::{DenoiserConfig, ModelParams, Result, TrainConfig};

use crate::run::{need, flag, maybe_print, merge, write_json, RunManifest};
use crate::Global;

/// Audio normalisation stored next to every checkpoint.
pub const AUDIO_STATS_FILE: &str = "audio_stats.json";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, required_unless_present = "print_config")]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Continue from this checkpoint (its `.adam` file must sit beside it).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_frames: Option<usize>,
    #[arg(long)]
    stage1_steps: Option<u64>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

pub fn run(a: TrainArgs, g: &Global) -> Result<()> {
    let tcfg = merge(
        TrainConfig::default(),
        "train",
        g,
        &[
            flag("steps", &a.steps),
            flag("lr", &a.lr),
            flag("batch_size", &a.batch_size),
            flag("seed", &a.seed),
            flag("clip_frames", &a.clip_frames),
            flag("stage1_steps", &a.stage1_steps),
            flag("log_interval", &a.log_interval),
            flag("checkpoint_interval", &a.checkpoint_interval),
        ],
    )?;
    let mut mcfg = merge(
        DenoiserConfig::default(),
        "model",
        g,
        &[flag("width", &a.width), flag("depth", &a.depth), flag("heads", &a.heads), flag("patch", &a.patch)],
    )?;
    // a changed depth without an explicit layer list means every layer
    if !g.config.iter().any(|(k, _)| k == "model.audio_xattn_layers") {
        mcfg.audio_xattn_layers = (0..mcfg.depth).collect();
    }
    if maybe_print(g, &[("model", &mcfg), ("train", &tcfg)]) {
        return Ok(());
    }
    let data = need(&a.data, "data")?;
    let out = need(&a.out, "out")?;
    mcfg.validate()?;
    tcfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let samples = manifest.load_samples(data)?;
    let stats = match &manifest.audio_stats {
        Some(s) if s.mean.len() == mcfg.audio_dim => s.clone(),
        _ => fit_audio_stats(&samples, &mcfg)?,
    };
    let data: Vec<TrainExample> =
        samples.iter().map(|s| TrainExample::from_triplet(s, &stats, &mcfg)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join(AUDIO_STATS_FILE), &stats)?;
    let init = ModelParams::init(mcfg.clone(), tcfg.seed)?;
    log::info!("training {} parameters on {} clips", init.len(), data.len());
    let outcome = train_loop(&data, init, &tcfg, out, a.resume.as_deref())?;
    let last = outcome.history.last();
    let mut run = RunManifest::new("train", &[("model", &mcfg), ("train", &tcfg)]);
    run.outputs = vec!["final.ckpt".into(), "final.adam".into(), "metrics.csv".into(), AUDIO_STATS_FILE.into()];
    run.summary = serde_json::json!({
        "parameters": outcome.params.len(),
        "clips": data.len(),
        "final_loss": last.map(|m| m.loss),
    });
    run.write(out)?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}
