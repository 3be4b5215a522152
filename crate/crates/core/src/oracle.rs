//! Independent reference computations used to pin expected values in tests.
//!
//! Everything here is written as plain nested loops over `Vec<f64>` without
//! reusing the production code paths, so agreement between the two is
//! evidence rather than tautology.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};

/// Window boundaries by direct index arithmetic: window `i` starts at
/// `i * (f - o)` and ends at `min(start + f, l)`, stopping at the first
/// window that reaches `l`.
pub fn window_trace(l: usize, f: usize, o: usize) -> Result<Vec<(usize, usize)>> {
    ensure!(f >= 1 && f <= l && o < f, "need 1 <= f <= l and o < f, got l={l} f={f} o={o}");
    let mut out = Vec::new();
    for i in 0.. {
        let start = i * (f - o);
        let end = (start + f).min(l);
        out.push((start, end));
        if end == l {
            break;
        }
    }
    Ok(out)
}

/// Fusion weights `(i - 1) / (o - 1)` for `i = 1..=o`.
pub fn fuse_weights(o: usize) -> Result<Vec<f64>> {
    ensure!(o >= 2, "overlap must be at least 2, got {o}");
    Ok((1..=o).map(|i| (i - 1) as f64 / (o - 1) as f64).collect())
}

/// Per-frame fusion of `cur` (the new window's head) with `prev` (the
/// previous window's tail). `literal` uses `w*cur + (w-1)*prev`.
pub fn fuse_frames(cur: &[Vec<f64>], prev: &[Vec<f64>], literal: bool) -> Result<Vec<Vec<f64>>> {
    ensure!(cur.len() == prev.len(), "overlap lengths differ");
    let weights = fuse_weights(cur.len())?;
    let mut out = Vec::with_capacity(cur.len());
    for i in 0..cur.len() {
        let w = weights[i];
        let mut frame = Vec::with_capacity(cur[i].len());
        for j in 0..cur[i].len() {
            let other = if literal { w - 1.0 } else { 1.0 - w };
            frame.push(w * cur[i][j] + other * prev[i][j]);
        }
        out.push(frame);
    }
    Ok(out)
}

/// Mock velocity field applied frame by frame: `v = A x + b`, with one `A`
/// and `b` shared by all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMock {
    pub n: usize,
    /// Row-major `n x n`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMock {
    /// Contractive-ish random field: entries of `A` are N(0, 1) scaled by
    /// `0.5 / sqrt(n)`, minus the identity; `b` is uniform in [-1, 1).
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.5 / (n as f64).sqrt();
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let g: f64 = rng.sample(StandardNormal);
                a[r * n + c] = g * scale - if r == c { 1.0 } else { 0.0 };
            }
        }
        let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { n, a, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for r in 0..self.n {
            for c in 0..self.n {
                out[r] += self.a[r * self.n + c] * x[c];
            }
        }
        out
    }

    /// The same field over a `[frames, C, h, w]` latent, frame by frame.
    pub fn apply_latent(&self, z: &Array4<f64>) -> Array4<f64> {
        let mut out = Array4::zeros(z.raw_dim());
        for k in 0..z.dim().0 {
            let x: Vec<f64> = z.index_axis(ndarray::Axis(0), k).iter().copied().collect();
            for (dst, v) in out.index_axis_mut(ndarray::Axis(0), k).iter_mut().zip(self.apply(&x)) {
                *dst = v;
            }
        }
        out
    }
}

/// Windowed Euler sampling under `mock`, written out longhand. `init` holds
/// one flattened latent frame per entry.
pub fn blf_reference(
    mock: &AffineMock,
    init: &[Vec<f64>],
    windows: &[(usize, usize)],
    overlap: usize,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    ensure!(steps >= 1, "need at least one step");
    ensure!(overlap != 1, "overlap of 1 cannot be fused");
    let dt = 1.0 / steps as f64;
    let mut lat: Vec<Vec<Vec<f64>>> = windows.iter().map(|&(s, e)| init[s..e].to_vec()).collect();
    for k in 1..=steps {
        for wi in 0..windows.len() {
            for frame in lat[wi].iter_mut() {
                let v = mock.apply(frame);
                for j in 0..frame.len() {
                    frame[j] += dt * v[j];
                }
            }
            if wi > 0 && k > 1 && overlap > 0 {
                let pl = lat[wi - 1].len();
                let prev_tail = lat[wi - 1][pl - overlap..].to_vec();
                let cur_head = lat[wi][..overlap].to_vec();
                let fused = fuse_frames(&cur_head, &prev_tail, false)?;
                for i in 0..overlap {
                    lat[wi][i] = fused[i].clone();
                    lat[wi - 1][pl - overlap + i] = fused[i].clone();
                }
            }
        }
    }
    let mut out = vec![Vec::new(); init.len()];
    for (wi, &(s, _)) in windows.iter().enumerate() {
        for (i, frame) in lat[wi].iter().enumerate() {
            out[s + i] = frame.clone();
        }
    }
    Ok(out)
}

/// A full affine BLF case: mock, initial latent and longhand result.
#[derive(Debug, Clone)]
pub struct BlfAffineCase {
    pub mock: AffineMock,
    pub init: Array4<f64>,
    pub windows: Vec<(usize, usize)>,
    pub expected: Array4<f64>,
}

pub fn blf_affine_case(
    seed: u64,
    (l, f, o): (usize, usize, usize),
    frame_shape: (usize, usize, usize),
    steps: usize,
) -> Result<BlfAffineCase> {
    let (c, h, w) = frame_shape;
    let n = c * h * w;
    let mock = AffineMock::random(seed, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let init = Array4::from_shape_simple_fn((l, c, h, w), || rng.sample::<f64, _>(StandardNormal));
    let frames: Vec<Vec<f64>> =
        init.outer_iter().map(|f| f.iter().copied().collect()).collect();
    let windows = window_trace(l, f, o)?;
    let out = blf_reference(&mock, &frames, &windows, o, steps)?;
    let expected = Array4::from_shape_vec((l, c, h, w), out.concat()).expect("shape");
    Ok(BlfAffineCase { mock, init, windows, expected })
}

/// Brute-force weighted MSE: weight `w1` where the mask is one, `w2`
/// elsewhere, averaged over every element. Shapes: `[T, C, h, w]` and mask
/// `[T, 1, h, w]`.
pub fn masked_mse(pred: &Array4<f64>, target: &Array4<f64>, mask: &Array4<f32>, w1: f64, w2: f64) -> f64 {
    let (t, c, h, w) = pred.dim();
    let mut sum = 0.0;
    for k in 0..t {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let m = mask[[k, 0, i, j]] as f64;
                    let d = pred[[k, ch, i, j]] - target[[k, ch, i, j]];
                    sum += (w1 * m + w2 * (1.0 - m)) * d * d;
                }
            }
        }
    }
    sum / (t * c * h * w) as f64
}

/// Brute-force mean squared error over the mask's support (all channels).
/// `None` for an empty mask.
pub fn masked_mean(pred: &Array4<f64>, target: &Array4<f64>, mask: &Array4<f32>) -> Option<f64> {
    let (t, c, h, w) = pred.dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..t {
        for i in 0..h {
            for j in 0..w {
                if mask[[k, 0, i, j]] == 1.0 {
                    for ch in 0..c {
                        let d = pred[[k, ch, i, j]] - target[[k, ch, i, j]];
                        sum += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Brute-force block max of a `[T, H, W]` pixel mask into `[T, 1, H/p, W/p]`.
pub fn block_max(mask: &Array3<f32>, p: usize) -> Array4<f32> {
    let (t, height, width) = mask.dim();
    let (h, w) = (height / p, width / p);
    let mut out = Array4::zeros((t, 1, h, w));
    for k in 0..t {
        for bi in 0..h {
            for bj in 0..w {
                let mut m = 0.0f32;
                for di in 0..p {
                    for dj in 0..p {
                        m = m.max(mask[[k, bi * p + di, bj * p + dj]]);
                    }
                }
                out[[k, 0, bi, bj]] = m;
            }
        }
    }
    out
}
