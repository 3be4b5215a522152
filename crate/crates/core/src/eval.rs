//! Metrics for generated clips: lip sync, identity preservation, seam
//! discontinuity and colour drift.

use std::path::Path;

use ndarray::{s, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::inference::WindowPlan;
use crate::world::{sync_confidence, AudioSignal, SceneSpec, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub sync_c: f64,
    pub sync_d: i32,
    /// 1 minus the mean absolute pixel difference to the reference frame,
    /// outside the mouth box.
    pub identity_consistency: f64,
    /// Largest adjacent-frame change across a window seam over the median
    /// adjacent-frame change.
    #[serde(with = "lenient_f64")]
    pub seam_gap_ratio: f64,
    /// Least-squares slope of mean luminance per frame.
    pub color_drift: f64,
}

/// Non-finite values as strings so reports survive a JSON roundtrip.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn mean_abs_diff(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

/// Mean absolute change between frames `a` and `a + 1`, for every `a`.
pub fn adjacent_l1(clip: &VideoClip) -> Vec<f64> {
    (1..clip.len()).map(|k| mean_abs_diff(clip.frame(k - 1), clip.frame(k))).collect()
}

/// Seam gap ratio for the seams of `plan`; 1.0 when there is no seam or
/// the clip is perfectly static.
pub fn seam_gap_ratio(clip: &VideoClip, plan: &WindowPlan) -> f64 {
    let diffs = adjacent_l1(clip);
    let seams = plan.seam_pairs();
    if diffs.is_empty() || seams.is_empty() {
        return 1.0;
    }
    let seam_max = seams.iter().filter_map(|&a| diffs.get(a)).fold(0.0f64, |m, &v| m.max(v));
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    match (seam_max == 0.0, median == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => seam_max / median,
    }
}

pub fn identity_consistency(clip: &VideoClip, reference: ArrayView3<'_, f32>, scene: &SceneSpec) -> f64 {
    let mouth = scene.mouth_box(clip.height(), clip.width());
    let mut total = 0.0;
    for k in 0..clip.len() {
        let frame = clip.frame(k);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for ((i, j, c), &v) in frame.indexed_iter() {
            if !mouth.contains(i, j) {
                sum += (v - reference[[i, j, c]]).abs() as f64;
                count += 1;
            }
        }
        total += if count == 0 { 0.0 } else { sum / count as f64 };
    }
    1.0 - total / clip.len() as f64
}

pub fn color_drift(clip: &VideoClip) -> f64 {
    let lum: Vec<f64> = clip
        .frames
        .axis_iter(Axis(0))
        .map(|f| {
            let ch = |c: usize| f.slice(s![.., .., c]).iter().map(|&v| v as f64).sum::<f64>() / (f.len() / 3) as f64;
            0.299 * ch(0) + 0.587 * ch(1) + 0.114 * ch(2)
        })
        .collect();
    let n = lum.len() as f64;
    if lum.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = lum.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, y) in lum.iter().enumerate() {
        let dx = k as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}

/// Peak signal-to-noise ratio in dB for signals in [0, 1]; infinite when
/// the clips are identical.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    ensure!(a.frames.dim() == b.frames.dim(), "clip shapes differ: {:?} vs {:?}", a.frames.dim(), b.frames.dim());
    let mse = a.frames.iter().zip(b.frames.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.frames.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Evaluates a generated clip. `reference` is the `[H, W, 3]` identity frame.
pub fn evaluate(
    generated: &VideoClip,
    audio: &AudioSignal,
    reference: ArrayView3<'_, f32>,
    scene: &SceneSpec,
    plan: &WindowPlan,
) -> Result<EvalReport> {
    let t = generated.len();
    ensure!(plan.length == t, "plan covers {} frames, clip has {t}", plan.length);
    ensure!(
        audio.frame_count(generated.fps) >= t,
        "audio covers {} frames, clip has {t}",
        audio.frame_count(generated.fps)
    );
    ensure!(
        reference.dim() == (generated.height(), generated.width(), 3),
        "reference frame shape {:?} does not match the clip",
        reference.dim()
    );
    let sync = sync_confidence(generated, audio, scene)?;
    Ok(EvalReport {
        frames: t,
        sync_c: sync.sync_c,
        sync_d: sync.sync_d,
        identity_consistency: identity_consistency(generated, reference, scene),
        seam_gap_ratio: seam_gap_ratio(generated, plan),
        color_drift: color_drift(generated),
    })
}

/// Batch output: one CSV row per clip.
pub fn write_reports_csv(path: impl AsRef<Path>, rows: &[(String, EvalReport)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        clip: &'a str,
        frames: usize,
        sync_c: f64,
        sync_d: i32,
        identity_consistency: f64,
        seam_gap_ratio: f64,
        color_drift: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (name, r) in rows {
        w.serialize(Row {
            clip: name,
            frames: r.frames,
            sync_c: r.sync_c,
            sync_d: r.sync_d,
            identity_consistency: r.identity_consistency,
            seam_gap_ratio: r.seam_gap_ratio,
            color_drift: r.color_drift,
        })
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
