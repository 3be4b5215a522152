//! Layer primitives with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};

use super::rope::RopeTable;

const LN_EPS: f64 = 1e-6;

pub(crate) fn cst<S: NdFloat>(x: f64) -> S {
    S::from(x).expect("constant representable in scalar type")
}

pub(crate) fn linear<S: NdFloat>(x: &Array2<S>, w: ArrayView2<'_, S>, b: ArrayView1<'_, S>) -> Array2<S> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// `gw += x^T dy` on a mutable view.
pub(crate) fn accumulate_outer<S: NdFloat>(gw: &mut ndarray::ArrayViewMut2<'_, S>, x: &Array2<S>, dy: &Array2<S>) {
    general_mat_mul(S::one(), &x.t(), dy, S::one(), gw);
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<S> {
    pub y: Array2<S>,
    inv_std: Array1<S>,
}

/// Row-wise layer norm without affine parameters.
pub(crate) fn layer_norm<S: NdFloat>(x: &Array2<S>) -> LnCache<S> {
    let d: S = cst(x.ncols() as f64);
    let eps: S = cst(LN_EPS);
    let mut y = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in y.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(S::zero(), |a, &v| a + v * v) / d;
        *inv = S::one() / (var + eps).sqrt();
        let k = *inv;
        row.mapv_inplace(|v| v * k);
    }
    LnCache { y, inv_std }
}

pub(crate) fn layer_norm_backward<S: NdFloat>(c: &LnCache<S>, dy: &Array2<S>) -> Array2<S> {
    let d: S = cst(dy.ncols() as f64);
    let mut dx = dy.clone();
    Zip::from(dx.rows_mut()).and(c.y.rows()).and(&c.inv_std).for_each(|mut dxr, yr, &inv| {
        let mean_dy = dxr.sum() / d;
        let mean_dyy = dxr.iter().zip(yr.iter()).fold(S::zero(), |a, (&g, &v)| a + g * v) / d;
        Zip::from(&mut dxr).and(&yr).for_each(|g, &v| *g = inv * (*g - mean_dy - v * mean_dyy));
    });
    dx
}

fn sigmoid<S: NdFloat>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn silu<S: NdFloat>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward<S: NdFloat>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let sg = sigmoid(v);
        *g = *g * sg * (S::one() + v * (S::one() - sg));
    });
    dx
}

const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<S: NdFloat>(x: &Array2<S>) -> Array2<S> {
    let k: S = cst((2.0 / std::f64::consts::PI).sqrt());
    let c: S = cst(GELU_C);
    let half: S = cst(0.5);
    x.mapv(|v| half * v * (S::one() + (k * (v + c * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<S: NdFloat>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let k: S = cst((2.0 / std::f64::consts::PI).sqrt());
    let c: S = cst(GELU_C);
    let half: S = cst(0.5);
    let three: S = cst(3.0);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let th = (k * (v + c * v * v * v)).tanh();
        let d = half * (S::one() + th) + half * v * (S::one() - th * th) * k * (S::one() + three * c * v * v);
        *g *= d;
    });
    dx
}

/// `x * (1 + scale) + shift` with row-broadcast `scale`/`shift`.
pub(crate) fn modulate<S: NdFloat>(x: &Array2<S>, shift: ArrayView1<'_, S>, scale: ArrayView1<'_, S>) -> Array2<S> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row).and(&shift).and(&scale).for_each(|v, &sh, &sc| *v = *v * (S::one() + sc) + sh);
    }
    y
}

/// Returns `(dx, dshift, dscale)`.
pub(crate) fn modulate_backward<S: NdFloat>(
    x: &Array2<S>,
    scale: ArrayView1<'_, S>,
    dy: &Array2<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (dy * x).sum_axis(Axis(0));
    let mut dx = dy.clone();
    for mut row in dx.rows_mut() {
        Zip::from(&mut row).and(&scale).for_each(|g, &sc| *g *= S::one() + sc);
    }
    (dx, dshift, dscale)
}

fn softmax_rows<S: NdFloat>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.fold(S::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Everything attention backward needs; `q`/`k` are post-rotation.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache<S> {
    pub q: Array2<S>,
    pub k: Array2<S>,
    v: Array2<S>,
    probs: Vec<Array2<S>>,
    pub out: Array2<S>,
}

impl<S: NdFloat> AttnCache<S> {
    /// Pre-softmax logits of head `h`.
    pub fn logits(&self, heads: usize, h: usize) -> Array2<S> {
        let dh = self.q.ncols() / heads;
        let (a, b) = (h * dh, (h + 1) * dh);
        let scale: S = cst(1.0 / (dh as f64).sqrt());
        self.q.slice(s![.., a..b]).dot(&self.k.slice(s![.., a..b]).t()) * scale
    }
}

pub(crate) fn attention<S: NdFloat>(
    mut q: Array2<S>,
    mut k: Array2<S>,
    v: Array2<S>,
    heads: usize,
    rope_q: Option<&RopeTable<S>>,
    rope_k: Option<&RopeTable<S>>,
) -> AttnCache<S> {
    if let Some(r) = rope_q {
        r.apply(&mut q, heads, false);
    }
    if let Some(r) = rope_k {
        r.apply(&mut k, heads, false);
    }
    let dh = q.ncols() / heads;
    let scale: S = cst(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let mut p = q.slice(s![.., a..b]).dot(&k.slice(s![.., a..b]).t());
        p.mapv_inplace(|x| x * scale);
        softmax_rows(&mut p);
        general_mat_mul(S::one(), &p, &v.slice(s![.., a..b]), S::zero(), &mut out.slice_mut(s![.., a..b]));
        probs.push(p);
    }
    AttnCache { q, k, v, probs, out }
}

/// Gradients w.r.t. the pre-rotation `(q, k, v)`.
pub(crate) fn attention_backward<S: NdFloat>(
    c: &AttnCache<S>,
    dout: &Array2<S>,
    heads: usize,
    rope_q: Option<&RopeTable<S>>,
    rope_k: Option<&RopeTable<S>>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let dh = c.q.ncols() / heads;
    let scale: S = cst(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let p = &c.probs[h];
        let doh = dout.slice(s![.., a..b]);
        let mut dp = doh.dot(&c.v.slice(s![.., a..b]).t());
        general_mat_mul(S::one(), &p.t(), &doh, S::zero(), &mut dv.slice_mut(s![.., a..b]));
        Zip::from(dp.rows_mut()).and(p.rows()).for_each(|mut dr, pr| {
            let dot = dr.iter().zip(pr.iter()).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
            Zip::from(&mut dr).and(&pr).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
        });
        general_mat_mul(S::one(), &dp, &c.k.slice(s![.., a..b]), S::zero(), &mut dq.slice_mut(s![.., a..b]));
        general_mat_mul(S::one(), &dp.t(), &c.q.slice(s![.., a..b]), S::zero(), &mut dk.slice_mut(s![.., a..b]));
    }
    if let Some(r) = rope_q {
        r.apply(&mut dq, heads, true);
    }
    if let Some(r) = rope_k {
        r.apply(&mut dk, heads, true);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f`'s gradient at `x` given analytic `g`.
    fn check(x: &Array2<f64>, g: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) {
        let h = 1e-5;
        for idx in [(0usize, 0usize), (1, 2), (x.nrows() - 1, x.ncols() - 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - g[idx]).abs() <= 1e-6 * (1.0 + num.abs()), "{idx:?}: {num} vs {}", g[idx]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 6);
        let w = rand_mat(&mut rng, 3, 6);
        let g = layer_norm_backward(&layer_norm(&x), &w);
        check(&x, &g, |x| (&layer_norm(x).y * &w).sum());
    }

    #[test]
    fn activations_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 4) * 3.0;
        let w = rand_mat(&mut rng, 3, 4);
        check(&x, &gelu_backward(&x, &w), |x| (&gelu(x) * &w).sum());
        check(&x, &silu_backward(&x, &w), |x| (&silu(x) * &w).sum());
    }

    #[test]
    fn attention_gradient_with_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (nq, nk, d, heads) = (5, 4, 8, 2);
        let q = rand_mat(&mut rng, nq, d);
        let k = rand_mat(&mut rng, nk, d);
        let v = rand_mat(&mut rng, nk, d);
        let w = rand_mat(&mut rng, nq, d);
        let rq = RopeTable::one_d(&[0, 2, 4, 6, 8], d / heads, 100.0);
        let rk = RopeTable::one_d(&[0, 1, 2, 3], d / heads, 100.0);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (&attention(q.clone(), k.clone(), v.clone(), heads, Some(&rq), Some(&rk)).out * &w).sum()
        };
        let c = attention(q.clone(), k.clone(), v.clone(), heads, Some(&rq), Some(&rk));
        let (dq, dk, dv) = attention_backward(&c, &w, heads, Some(&rq), Some(&rk));
        check(&q, &dq, |q| loss(q, &k, &v));
        check(&k, &dk, |k| loss(&q, k, &v));
        check(&v, &dv, |v| loss(&q, &k, v));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = rand_mat(&mut rng, 4, 7) * 50.0;
        softmax_rows(&mut m);
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
