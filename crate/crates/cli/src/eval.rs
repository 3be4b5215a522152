//! `eval`: score one clip or every clip of a dataset.

use std::path::PathBuf;

use clap::Args;
use talkflow_core::config::KvConfig;
use talkflow_core::eval::{evaluate, write_reports_csv};
use talkflow_core::inference::{plan_windows, WindowPlan};
use talkflow_core::io::{read_frames, read_png, read_wav, DatasetManifest};
use talkflow_core::world::SceneSpec;
use talkflow_core::{Error, Result};

use crate::run::{need, flag, maybe_print, merge, read_json, write_json, RunManifest};
use crate::Global;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of generated frames (single-clip mode).
    #[arg(long, conflicts_with = "dataset")]
    video: Option<PathBuf>,
    #[arg(long, requires = "video")]
    audio: Option<PathBuf>,
    /// Scene JSON of the clip (single-clip mode).
    #[arg(long, requires = "video")]
    scene: Option<PathBuf>,
    /// Identity reference; defaults to the clip's first frame.
    #[arg(long)]
    ref_image: Option<PathBuf>,
    /// Dataset directory; every sample is scored (batch mode).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// In batch mode, read sample `<id>`'s frames from `<root>/<id>/frames`.
    #[arg(long, requires = "dataset")]
    generated_root: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    fps: Option<f32>,
    /// Report JSON (single) or CSV (batch).
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Window length used to locate seams; 0 means no seams.
    pub window: usize,
    pub overlap: usize,
    pub fps: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { window: 0, overlap: 0, fps: 16.0 }
    }
}

impl KvConfig for EvalConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidArgument(format!("bad value {value:?} for {key}"));
        match key {
            "window" => self.window = value.parse().map_err(|_| bad())?,
            "overlap" => self.overlap = value.parse().map_err(|_| bad())?,
            "fps" => self.fps = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![("window", self.window.to_string()), ("overlap", self.overlap.to_string()), ("fps", self.fps.to_string())]
    }
}

impl EvalConfig {
    fn plan(&self, frames: usize) -> Result<WindowPlan> {
        if self.window == 0 || self.window >= frames {
            Ok(WindowPlan::single(frames))
        } else {
            plan_windows(frames, self.window, self.overlap)
        }
    }
}

pub fn run(a: EvalArgs, g: &Global) -> Result<()> {
    let cfg = merge(
        EvalConfig::default(),
        "eval",
        g,
        &[flag("window", &a.window), flag("overlap", &a.overlap), flag("fps", &a.fps)],
    )?;
    if maybe_print(g, &[("eval", &cfg)]) {
        return Ok(());
    }
    let out = need(&a.out, "out")?;
    if let Some(dir) = &a.dataset {
        let manifest = DatasetManifest::load(dir)?;
        let mut rows = Vec::new();
        for e in &manifest.samples {
            let frames_dir = match &a.generated_root {
                Some(root) => root.join(&e.id).join("frames"),
                None => dir.join(&e.frames_dir),
            };
            let video = read_frames(&frames_dir, manifest.fps)?;
            let audio = read_wav(dir.join(&e.audio))?;
            let reference = match &a.ref_image {
                Some(p) => read_png(p)?,
                None => read_frames(dir.join(&e.frames_dir), manifest.fps)?.frame(0).to_owned(),
            };
            let report = evaluate(&video, &audio, reference.view(), &e.scene, &cfg.plan(video.len())?)?;
            rows.push((e.id.clone(), report));
        }
        write_reports_csv(out, &rows)?;
        let mean = |f: fn(&talkflow_core::EvalReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / rows.len().max(1) as f64;
        println!(
            "{}",
            serde_json::json!({ "clips": rows.len(), "mean_sync_c": mean(|r| r.sync_c), "mean_identity": mean(|r| r.identity_consistency) })
        );
        return Ok(());
    }
    let (Some(vdir), Some(apath), Some(spath)) = (&a.video, &a.audio, &a.scene) else {
        return Err(Error::InvalidArgument("pass --dataset, or --video with --audio and --scene".into()));
    };
    let video = read_frames(vdir, cfg.fps)?;
    let audio = read_wav(apath)?;
    let scene: SceneSpec = read_json(spath)?;
    let reference = match &a.ref_image {
        Some(p) => read_png(p)?,
        None => video.frame(0).to_owned(),
    };
    let report = evaluate(&video, &audio, reference.view(), &scene, &cfg.plan(video.len())?)?;
    write_json(out, &report)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        let mut run = RunManifest::new("eval", &[("eval", &cfg)]);
        run.outputs = vec![out.file_name().map(PathBuf::from).unwrap_or_default()];
        run.write(parent)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
