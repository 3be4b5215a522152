//! `gen-data`: synthetic triplets through the sync funnel onto disk.

use std::path::PathBuf;

use clap::Args;
use talkflow_core::config::KvConfig;
use talkflow_core::io::{write_sample, DatasetManifest, ManifestEntry};
use talkflow_core::training::fit_audio_stats;
use talkflow_core::world::{filter_pool, gen_triplet, TripletSample};
use talkflow_core::{DenoiserConfig, Error, Result};

use crate::run::{need, flag, maybe_print, merge, write_json, RunManifest};
use crate::Global;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Candidate clips before filtering.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    fps: Option<f32>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Clip `i` uses seed `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_sync_c: Option<f64>,
    #[arg(long)]
    max_sync_d: Option<u32>,
    /// Fraction of candidates whose audio is swapped for an unrelated clip.
    #[arg(long)]
    mismatch_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub frames: usize,
    pub fps: f32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub min_sync_c: f64,
    pub max_sync_d: u32,
    pub mismatch_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 200,
            frames: 32,
            fps: 16.0,
            height: 32,
            width: 32,
            seed: 0,
            min_sync_c: 0.5,
            max_sync_d: 1,
            mismatch_frac: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

impl KvConfig for DataConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "count" => self.count = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "min_sync_c" => self.min_sync_c = parse(key, value)?,
            "max_sync_d" => self.max_sync_d = parse(key, value)?,
            "mismatch_frac" => self.mismatch_frac = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("count", self.count.to_string()),
            ("frames", self.frames.to_string()),
            ("fps", self.fps.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("seed", self.seed.to_string()),
            ("min_sync_c", self.min_sync_c.to_string()),
            ("max_sync_d", self.max_sync_d.to_string()),
            ("mismatch_frac", self.mismatch_frac.to_string()),
        ]
    }
}

/// Candidate pool: clip `i` from seed `seed + i`; the first
/// `round(count * mismatch_frac)` get audio from seed `seed + count + i`.
pub fn candidates(cfg: &DataConfig) -> Result<Vec<TripletSample>> {
    let mismatched = (cfg.count as f64 * cfg.mismatch_frac).round() as usize;
    (0..cfg.count)
        .map(|i| {
            let seed = cfg.seed + i as u64;
            let mut s = gen_triplet(seed, cfg.frames, cfg.fps, cfg.height, cfg.width)?;
            if i < mismatched {
                let other = gen_triplet(cfg.seed + (cfg.count + i) as u64, cfg.frames, cfg.fps, cfg.height, cfg.width)?;
                s.audio = other.audio;
                s.envelope = other.envelope;
            }
            Ok(s)
        })
        .collect()
}

pub fn run(a: GenDataArgs, g: &Global) -> Result<()> {
    let cfg = merge(
        DataConfig::default(),
        "data",
        g,
        &[
            flag("count", &a.count),
            flag("frames", &a.frames),
            flag("fps", &a.fps),
            flag("height", &a.height),
            flag("width", &a.width),
            flag("seed", &a.seed),
            flag("min_sync_c", &a.min_sync_c),
            flag("max_sync_d", &a.max_sync_d),
            flag("mismatch_frac", &a.mismatch_frac),
        ],
    )?;
    let model = merge(DenoiserConfig::default(), "model", g, &[])?;
    if maybe_print(g, &[("data", &cfg), ("model", &model)]) {
        return Ok(());
    }
    let out = need(&a.out, "out")?;
    if !(0.0..=1.0).contains(&cfg.mismatch_frac) {
        return Err(Error::InvalidArgument("mismatch_frac must be in [0, 1]".into()));
    }
    if cfg.count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let outcome = filter_pool(candidates(&cfg)?, cfg.min_sync_c, cfg.max_sync_d)?;
    log::info!("kept {} of {} candidates", outcome.kept.len(), cfg.count);
    if outcome.kept.is_empty() {
        return Err(Error::InvalidArgument("no sample passed the sync filter".into()));
    }
    let audio_stats = fit_audio_stats(&outcome.kept, &model)?;
    let mut entries = Vec::with_capacity(outcome.kept.len());
    for (s, score) in outcome.kept.iter().zip(&outcome.scores) {
        let id = format!("s{:06}", s.scene.seed);
        let (audio, frames_dir) = write_sample(out, &id, s)?;
        entries.push(ManifestEntry {
            id,
            seed: s.scene.seed,
            scene: s.scene.clone(),
            audio,
            frames_dir,
            frames: s.video.len(),
            sync_c: score.sync_c,
            sync_d: score.sync_d,
        });
    }
    let manifest = DatasetManifest {
        fps: cfg.fps,
        height: cfg.height,
        width: cfg.width,
        sample_rate: outcome.kept[0].audio.sample_rate,
        audio_stats: Some(audio_stats),
        samples: entries,
    };
    manifest.save(out)?;
    write_json(&out.join("funnel.json"), &outcome.report)?;
    let mut run = RunManifest::new("gen-data", &[("data", &cfg), ("model", &model)]);
    run.outputs = vec!["manifest.json".into(), "funnel.json".into()];
    run.summary = serde_json::json!({ "candidates": cfg.count, "kept": manifest.samples.len() });
    run.write(out)?;
    println!("{}", serde_json::to_string(&outcome.report)?);
    Ok(())
}
