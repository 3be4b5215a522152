//! Colour unification: match every frame's per-channel statistics to the
//! average statistics of the opening frames.

use ndarray::{s, Axis};

use crate::world::VideoClip;

fn channel_stats(clip: &VideoClip, k: usize) -> [(f64, f64); 3] {
    let frame = clip.frame(k);
    let mut out = [(0.0, 0.0); 3];
    for (c, o) in out.iter_mut().enumerate() {
        let ch = frame.slice(s![.., .., c]);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        *o = (mean, var.sqrt());
    }
    out
}

/// Affinely maps each frame's channel mean/std onto the mean statistics of
/// the first `ref_frames` frames, then clamps to `[0, 1]`. Frames with a
/// zero-variance channel are left as they are.
pub fn color_unify(clip: &VideoClip, ref_frames: usize) -> VideoClip {
    let t = clip.len();
    let n_ref = ref_frames.clamp(1, t.max(1));
    let stats: Vec<[(f64, f64); 3]> = (0..t).map(|k| channel_stats(clip, k)).collect();
    let mut target = [(0.0, 0.0); 3];
    for st in &stats[..n_ref] {
        for c in 0..3 {
            target[c].0 += st[c].0 / n_ref as f64;
            target[c].1 += st[c].1 / n_ref as f64;
        }
    }
    let mut out = clip.clone();
    for (k, mut frame) in out.frames.axis_iter_mut(Axis(0)).enumerate() {
        if stats[k].iter().any(|&(_, sd)| sd == 0.0) {
            continue;
        }
        for c in 0..3 {
            let (m, sd) = stats[k][c];
            let (tm, tsd) = target[c];
            frame
                .slice_mut(s![.., .., c])
                .mapv_inplace(|v| (((v as f64 - m) / sd * tsd + tm) as f32).clamp(0.0, 1.0));
        }
    }
    out
}
