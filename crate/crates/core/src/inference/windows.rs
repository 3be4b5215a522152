//! Sliding-window planning and overlap fusion.

use ndarray::{s, Array4, ArrayView4, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Windows `[s, e)` over latent frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub windows: Vec<(usize, usize)>,
    pub length: usize,
    pub window: usize,
    pub overlap: usize,
}

/// Plans windows of `f` frames over `l` frames, consecutive starts `f - o`
/// apart; the last window is clamped to end at `l`.
pub fn plan_windows(l: usize, f: usize, o: usize) -> Result<WindowPlan> {
    ensure!(f >= 1, "window must be at least one frame");
    ensure!(f <= l, "window {f} exceeds length {l}");
    ensure!(o < f, "overlap {o} must be smaller than window {f}");
    let mut windows = vec![(0, f)];
    let (mut s, mut e) = (0, f);
    while e != l {
        s += f - o;
        e = if s + f < l { s + f } else { l };
        windows.push((s, e));
    }
    Ok(WindowPlan { windows, length: l, window: f, overlap: o })
}

impl WindowPlan {
    /// One window over everything.
    pub fn single(l: usize) -> Self {
        Self { windows: vec![(0, l)], length: l, window: l, overlap: 0 }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Adjacent-frame pairs `(a, a + 1)` that straddle a window boundary:
    /// where each later window starts and where each earlier window ends.
    pub fn seam_pairs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for pair in self.windows.windows(2) {
            let (prev_end, next_start) = (pair[0].1, pair[1].0);
            for a in [next_start.checked_sub(1), prev_end.checked_sub(1)].into_iter().flatten() {
                if a + 1 < self.length && !out.contains(&a) {
                    out.push(a);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// How overlapping frames are blended.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// `w cur + (1 - w) prev`.
    #[default]
    Convex,
    /// `w cur + (w - 1) prev`, kept for comparison only.
    Literal,
}

/// Blend weight of overlap frame `i` (1-based) out of `o`.
pub fn fusion_weight(i: usize, o: usize) -> f64 {
    (i - 1) as f64 / (o - 1) as f64
}

/// Fuses the first `o` frames of the current window with the last `o`
/// frames of the previous one. Frame weight ramps from 0 (all `prev`) to 1
/// (all `cur`); equal inputs come back unchanged.
pub fn fuse_overlap<S: NdFloat>(
    cur_head: ArrayView4<'_, S>,
    prev_tail: ArrayView4<'_, S>,
    o: usize,
    rule: FusionRule,
) -> Result<Array4<S>> {
    ensure!(o >= 2, "overlap must be at least 2 frames to fuse, got {o}");
    ensure!(cur_head.dim() == prev_tail.dim(), "overlap shapes differ");
    ensure!(cur_head.dim().0 == o, "expected {o} overlap frames, got {}", cur_head.dim().0);
    let mut out = cur_head.to_owned();
    for (i, mut frame) in out.axis_iter_mut(Axis(0)).enumerate() {
        let w = S::from(fusion_weight(i + 1, o)).expect("weight");
        let prev = prev_tail.index_axis(Axis(0), i);
        frame.zip_mut_with(&prev, |c, &p| {
            *c = match rule {
                FusionRule::Convex if *c == p => p,
                FusionRule::Convex => w * *c + (S::one() - w) * p,
                FusionRule::Literal => w * *c + (w - S::one()) * p,
            }
        });
    }
    Ok(out)
}

/// Writes `fused` into the head of `cur` and the tail of `prev`.
pub(crate) fn write_back<S: NdFloat>(cur: &mut Array4<S>, prev: &mut Array4<S>, fused: &Array4<S>) {
    let o = fused.dim().0;
    let pl = prev.dim().0;
    cur.slice_mut(s![0..o, .., .., ..]).assign(fused);
    prev.slice_mut(s![pl - o.., .., .., ..]).assign(fused);
}
