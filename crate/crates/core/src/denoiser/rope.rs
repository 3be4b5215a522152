//! Rotary position embeddings.
//!
//! Adjacent dimension pairs `(2i, 2i+1)` are rotated by `pos * base^(-2i/d)`.
//! Video tokens carry three positions `(t, y, x)`; the pairs of a head are
//! split into three near-equal groups, one per axis, each with its own
//! frequency ladder.

use ndarray::{Array2, ArrayView2, NdFloat};

use crate::error::{ensure, Result};

use super::ops::cst;

/// Per-token cos/sin of every rotation pair of one head, `[N, d_head / 2]`.
#[derive(Debug, Clone)]
pub struct RopeTable<S> {
    cos: Array2<S>,
    sin: Array2<S>,
}

/// Pair counts per axis for a head of `d_head` dims.
pub fn axis_pairs(d_head: usize) -> [usize; 3] {
    let pairs = d_head / 2;
    let base = pairs / 3;
    let rem = pairs % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

impl<S: NdFloat> RopeTable<S> {
    fn from_angles(rows: usize, pairs: usize, angle: impl Fn(usize, usize) -> f64) -> Self {
        let mut cos = Array2::zeros((rows, pairs));
        let mut sin = Array2::zeros((rows, pairs));
        for n in 0..rows {
            for i in 0..pairs {
                let a = angle(n, i);
                cos[[n, i]] = cst(a.cos());
                sin[[n, i]] = cst(a.sin());
            }
        }
        Self { cos, sin }
    }

    pub fn one_d(positions: &[i64], d_head: usize, base: f64) -> Self {
        let pairs = d_head / 2;
        Self::from_angles(positions.len(), pairs, |n, i| {
            positions[n] as f64 * base.powf(-2.0 * i as f64 / d_head as f64)
        })
    }

    /// Tokens in `(t, y, x)` raster order, temporal positions shifted by `t_offset`.
    pub fn three_d(frames: usize, h: usize, w: usize, d_head: usize, base: f64, t_offset: i64) -> Self {
        let groups = axis_pairs(d_head);
        let mut owner = Vec::with_capacity(d_head / 2);
        for (axis, &count) in groups.iter().enumerate() {
            for j in 0..count {
                owner.push((axis, j, 2 * count));
            }
        }
        Self::from_angles(frames * h * w, d_head / 2, |n, i| {
            let (axis, j, dim) = owner[i];
            let pos = match axis {
                0 => (n / (h * w)) as i64 + t_offset,
                1 => ((n / w) % h) as i64,
                _ => (n % w) as i64,
            };
            pos as f64 * base.powf(-2.0 * j as f64 / dim as f64)
        })
    }

    pub fn len(&self) -> usize {
        self.cos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotates every head of `x` (`[N, heads * d_head]`) in place; `inverse`
    /// applies the transpose rotation.
    pub fn apply(&self, x: &mut Array2<S>, heads: usize, inverse: bool) {
        let pairs = self.cos.ncols();
        let d_head = 2 * pairs;
        debug_assert_eq!(x.ncols(), heads * d_head);
        debug_assert_eq!(x.nrows(), self.len());
        for (n, mut row) in x.rows_mut().into_iter().enumerate() {
            for hh in 0..heads {
                for i in 0..pairs {
                    let (c, mut s) = (self.cos[[n, i]], self.sin[[n, i]]);
                    if inverse {
                        s = -s;
                    }
                    let (ia, ib) = (hh * d_head + 2 * i, hh * d_head + 2 * i + 1);
                    let (a, b) = (row[ia], row[ib]);
                    row[ia] = a * c - b * s;
                    row[ib] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotates rows of `x` (`[L, d_head]`) by their 1D `positions`.
pub fn rope_rotate<S: NdFloat>(x: ArrayView2<'_, S>, positions: &[i64], base: f64) -> Result<Array2<S>> {
    let d_head = x.ncols();
    ensure!(d_head.is_multiple_of(2), "RoPE head dim must be even, got {d_head}");
    ensure!(positions.len() == x.nrows(), "{} positions for {} rows", positions.len(), x.nrows());
    let mut out = x.to_owned();
    RopeTable::one_d(positions, d_head, base).apply(&mut out, 1, false);
    Ok(out)
}
