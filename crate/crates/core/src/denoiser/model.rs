//! DiT-lite forward and backward passes.
//!
//! Per block, with six timestep modulation vectors
//! `(shift1, scale1, gate1, shift2, scale2, gate2)`:
//!
//! ```text
//! x += gate1 * SelfAttn(LN(x) * (1 + scale1) + shift1)    // 3D RoPE
//! x += TextAttn(LN(x), text)
//! x += AudioAttn(LN(x), audio)                              // 1D RoPE
//! x += gate2 * MLP(LN(x) * (1 + scale2) + shift2)
//! ```

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis, NdFloat};

use super::ops::{
    accumulate_outer, attention, attention_backward, cst, gelu, gelu_backward, layer_norm, layer_norm_backward,
    linear, modulate, modulate_backward, silu, silu_backward, AttnCache, LnCache,
};
use super::params::{Grads, LinearSlot, ModelParams};
use super::rope::RopeTable;
use super::{DenoiseInput, DenoiserConfig, ForwardOptions};
use crate::error::{ensure, Result};

const TIME_SCALE: f64 = 1000.0;

/// Denoiser input flattened to tokens in `(t, y, x)` raster order.
pub(crate) struct Prepared<S> {
    pub x_in: Array2<S>,
    pub t: f64,
    pub text_row: usize,
    pub audio: Option<Array2<S>>,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn latent_to_tokens<S: NdFloat>(z: &Array4<f32>, out: &mut Array2<S>, col0: usize) {
    let (_, c, h, w) = z.dim();
    for ((k, ch, y, x), &v) in z.indexed_iter() {
        out[[(k * h + y) * w + x, col0 + ch]] = cst(v as f64);
    }
    let _ = c;
}

pub(crate) fn tokens_to_latent<S: NdFloat>(tokens: &Array2<S>, frames: usize, h: usize, w: usize) -> Array4<S> {
    let c = tokens.ncols();
    Array4::from_shape_fn((frames, c, h, w), |(k, ch, y, x)| tokens[[(k * h + y) * w + x, ch]])
}

pub(crate) fn latent_grad_to_tokens<S: NdFloat>(g: &Array4<S>) -> Array2<S> {
    let (frames, c, h, w) = g.dim();
    let mut out = Array2::zeros((frames * h * w, c));
    for ((k, ch, y, x), &v) in g.indexed_iter() {
        out[[(k * h + y) * w + x, ch]] = v;
    }
    out
}

pub(crate) fn prepare<S: NdFloat>(cfg: &DenoiserConfig, input: &DenoiseInput<'_>) -> Result<Prepared<S>> {
    let z = input.z_t;
    let (frames, c, h, w) = z.dim();
    ensure!(z.patch == cfg.patch, "latent patch {} does not match config patch {}", z.patch, cfg.patch);
    ensure!(c == cfg.latent_channels(), "latent has {c} channels, config expects {}", cfg.latent_channels());
    ensure!(frames >= 1 && h >= 1 && w >= 1, "latent must be non-empty");
    ensure!(input.t.is_finite() && (0.0..=1.0).contains(&input.t), "t must be in [0, 1], got {}", input.t);
    if !z.data.iter().all(|v| v.is_finite()) {
        return Err(crate::Error::NonFinite("denoiser input latent".into()));
    }
    let n = frames * h * w;
    let mut x_in = Array2::zeros((n, cfg.in_channels()));
    latent_to_tokens(&z.data, &mut x_in, 0);
    if let Some(cond) = input.cond {
        ensure!(cond.cond_latent.dim() == z.dim(), "condition latent shape {:?} != {:?}", cond.cond_latent.dim(), z.dim());
        ensure!(cond.cond_mask.data.dim() == (frames, 1, h, w), "condition mask shape mismatch");
        latent_to_tokens(&cond.cond_latent.data, &mut x_in, c);
        latent_to_tokens(&cond.cond_mask.data, &mut x_in, 2 * c);
    }
    let audio = match input.audio {
        Some(a) => {
            ensure!(a.dim() == cfg.audio_dim, "audio dim {} != config {}", a.dim(), cfg.audio_dim);
            ensure!(a.tokens_per_frame == cfg.tokens_per_frame, "audio tokens_per_frame mismatch");
            ensure!(a.len() == cfg.tokens_per_frame * frames, "{} audio tokens for {frames} frames", a.len());
            Some(a.tokens.mapv(|v| cst(v as f64)))
        }
        None => None,
    };
    let text_row = match input.text {
        Some(id) => {
            ensure!(id < cfg.text_vocab, "text id {id} outside vocabulary of {}", cfg.text_vocab);
            id
        }
        None => cfg.text_vocab,
    };
    Ok(Prepared { x_in, t: input.t as f64, text_row, audio, frames, h, w })
}

pub(crate) fn timestep_embedding<S: NdFloat>(t: f64, dim: usize) -> Array2<S> {
    let half = dim / 2;
    let mut e = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        e[[0, i]] = cst(arg.cos());
        e[[0, half + i]] = cst(arg.sin());
    }
    e
}

/// Per-call state shared by every block.
pub(crate) struct Context<S> {
    pub x0: Array2<S>,
    pub st: Array2<S>,
    pub text: Array2<S>,
    pub audio_h: Array2<S>,
    rope_self: RopeTable<S>,
    rope_vq: RopeTable<S>,
    rope_ak: RopeTable<S>,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) struct PreludeTape<S> {
    x_in: Array2<S>,
    temb_sin: Array2<S>,
    t1: Array2<S>,
    a1: Array2<S>,
    temb: Array2<S>,
    audio_in: Array2<S>,
    audio_null: bool,
    text_row: usize,
}

pub(crate) struct BlockTape<S> {
    mods: Array2<S>,
    ln1: LnCache<S>,
    h1: Array2<S>,
    self_attn: Option<(AttnCache<S>, Array2<S>)>,
    ln2: LnCache<S>,
    text_attn: Option<AttnCache<S>>,
    audio_attn: Option<(LnCache<S>, AttnCache<S>)>,
    ln4: LnCache<S>,
    h2: Array2<S>,
    m1: Array2<S>,
    g: Array2<S>,
    m2: Array2<S>,
}

pub(crate) struct HeadTape<S> {
    fmods: Array2<S>,
    lnf: LnCache<S>,
    hf: Array2<S>,
}

pub(crate) struct Tape<S> {
    ctx: Context<S>,
    pre: PreludeTape<S>,
    blocks: Vec<BlockTape<S>>,
    head: HeadTape<S>,
}

fn lin<S: NdFloat>(p: &ModelParams<S>, l: LinearSlot, x: &Array2<S>) -> Array2<S> {
    linear(x, p.mat(l.w), p.vec(l.b))
}

/// `dy W^T`
fn back<S: NdFloat>(p: &ModelParams<S>, l: LinearSlot, dy: &Array2<S>) -> Array2<S> {
    dy.dot(&p.mat(l.w).t())
}

impl<S: NdFloat> Grads<'_, S> {
    pub(crate) fn linear(&mut self, l: LinearSlot, x: &Array2<S>, dy: &Array2<S>) {
        accumulate_outer(&mut self.mat(l.w), x, dy);
        let mut b = self.vec(l.b);
        b += &dy.sum_axis(Axis(0));
    }
}

pub(crate) fn prelude<S: NdFloat>(
    p: &ModelParams<S>,
    prep: Prepared<S>,
    opts: &ForwardOptions,
) -> (Context<S>, PreludeTape<S>) {
    let cfg = &p.config;
    let l = &p.layout;
    let d = cfg.width;
    let dh = cfg.head_dim();
    let r = cfg.tokens_per_frame;
    let x0 = lin(p, l.input, &prep.x_in);
    let temb_sin = timestep_embedding::<S>(prep.t, d);
    let t1 = lin(p, l.time1, &temb_sin);
    let a1 = silu(&t1);
    let temb = lin(p, l.time2, &a1);
    let st = silu(&temb);

    let audio_len = r * prep.frames;
    let audio_null = prep.audio.is_none();
    let audio_in = prep.audio.unwrap_or_else(|| {
        let null = p.vec(l.null_audio);
        Array2::from_shape_fn((audio_len, cfg.audio_dim), |(_, k)| null[k])
    });
    let audio_h = lin(p, l.audio_in, &audio_in);
    let text = p.row(l.text_table, prep.text_row).to_owned().insert_axis(Axis(0));

    let off = opts.position_offset;
    let tokens = prep.frames * prep.h * prep.w;
    let rope_self = RopeTable::three_d(prep.frames, prep.h, prep.w, dh, cfg.rope_base, off);
    let vq: Vec<i64> =
        (0..tokens).map(|n| r as i64 * ((n / (prep.h * prep.w)) as i64 + off)).collect();
    let ak: Vec<i64> = (0..audio_len as i64).map(|j| j + r as i64 * off).collect();
    let ctx = Context {
        x0,
        st,
        text,
        audio_h,
        rope_self,
        rope_vq: RopeTable::one_d(&vq, dh, cfg.rope_base),
        rope_ak: RopeTable::one_d(&ak, dh, cfg.rope_base),
        frames: prep.frames,
        h: prep.h,
        w: prep.w,
    };
    let tape = PreludeTape { x_in: prep.x_in, temb_sin, t1, a1, temb, audio_in, audio_null, text_row: prep.text_row };
    (ctx, tape)
}

/// Block 0's modulated self-attention input; the cache change statistic.
pub(crate) fn modulated_input<S: NdFloat>(p: &ModelParams<S>, ctx: &Context<S>) -> Array2<S> {
    let d = p.config.width;
    let bs = &p.layout.blocks[0];
    let mods = lin(p, bs.modulation, &ctx.st);
    let ln = layer_norm(&ctx.x0);
    modulate(&ln.y, mods.slice(s![0, 0..d]), mods.slice(s![0, d..2 * d]))
}

fn cross_attention<S: NdFloat>(
    p: &ModelParams<S>,
    slots: &super::params::CrossSlots,
    queries: &Array2<S>,
    context: &Array2<S>,
    heads: usize,
    ropes: Option<(&RopeTable<S>, &RopeTable<S>)>,
) -> AttnCache<S> {
    let d = p.config.width;
    let q = lin(p, slots.q, queries);
    let kv = lin(p, slots.kv, context);
    let k = kv.slice(s![.., 0..d]).to_owned();
    let v = kv.slice(s![.., d..2 * d]).to_owned();
    attention(q, k, v, heads, ropes.map(|r| r.0), ropes.map(|r| r.1))
}

pub(crate) fn block_forward<S: NdFloat>(
    p: &ModelParams<S>,
    bi: usize,
    ctx: &Context<S>,
    mut x: Array2<S>,
    opts: &ForwardOptions,
) -> (Array2<S>, BlockTape<S>) {
    let cfg = &p.config;
    let d = cfg.width;
    let heads = cfg.heads;
    let bs = &p.layout.blocks[bi];
    let mods = lin(p, bs.modulation, &ctx.st);
    let m = |i: usize| mods.slice(s![0, i * d..(i + 1) * d]);

    let ln1 = layer_norm(&x);
    let h1 = modulate(&ln1.y, m(0), m(1));
    let self_attn = if opts.skip_self_attn {
        None
    } else {
        let qkv = lin(p, bs.qkv, &h1);
        let q = qkv.slice(s![.., 0..d]).to_owned();
        let k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
        let c = attention(q, k, v, heads, Some(&ctx.rope_self), Some(&ctx.rope_self));
        let ao = lin(p, bs.attn_out, &c.out);
        x += &(&ao * &m(2));
        Some((c, ao))
    };

    let ln2 = layer_norm(&x);
    let text_attn = if opts.skip_text_attn {
        None
    } else {
        let c = cross_attention(p, &bs.text, &ln2.y, &ctx.text, heads, None);
        x += &lin(p, bs.text.out, &c.out);
        Some(c)
    };

    let audio_attn = bs.audio.as_ref().map(|slots| {
        let ln3 = layer_norm(&x);
        let c = cross_attention(p, slots, &ln3.y, &ctx.audio_h, heads, Some((&ctx.rope_vq, &ctx.rope_ak)));
        x += &lin(p, slots.out, &c.out);
        (ln3, c)
    });

    let ln4 = layer_norm(&x);
    let h2 = modulate(&ln4.y, m(3), m(4));
    let m1 = lin(p, bs.mlp_in, &h2);
    let g = gelu(&m1);
    let m2 = lin(p, bs.mlp_out, &g);
    x += &(&m2 * &m(5));

    let tape = BlockTape { mods, ln1, h1, self_attn, ln2, text_attn, audio_attn, ln4, h2, m1, g, m2 };
    (x, tape)
}

pub(crate) fn head_forward<S: NdFloat>(p: &ModelParams<S>, ctx: &Context<S>, x: &Array2<S>) -> (Array2<S>, HeadTape<S>) {
    let d = p.config.width;
    let l = &p.layout;
    let fmods = lin(p, l.final_mod, &ctx.st);
    let lnf = layer_norm(x);
    let hf = modulate(&lnf.y, fmods.slice(s![0, 0..d]), fmods.slice(s![0, d..2 * d]));
    let out = lin(p, l.out, &hf);
    (out, HeadTape { fmods, lnf, hf })
}

pub(crate) fn forward_tape<S: NdFloat>(
    p: &ModelParams<S>,
    prep: Prepared<S>,
    opts: &ForwardOptions,
) -> (Array2<S>, Tape<S>) {
    let (ctx, pre) = prelude(p, prep, opts);
    let mut x = ctx.x0.clone();
    let mut blocks = Vec::with_capacity(p.config.depth);
    for bi in 0..p.config.depth {
        let (nx, bt) = block_forward(p, bi, &ctx, x, opts);
        x = nx;
        blocks.push(bt);
    }
    let (out, head) = head_forward(p, &ctx, &x);
    (out, Tape { ctx, pre, blocks, head })
}

impl<S: NdFloat> Tape<S> {
    /// Audio cross-attention logits of every audio layer, `[layer][head]`.
    pub(crate) fn audio_logits(&self, heads: usize) -> Vec<Vec<Array2<S>>> {
        self.blocks
            .iter()
            .filter_map(|b| b.audio_attn.as_ref())
            .map(|(_, c)| (0..heads).map(|h| c.logits(heads, h)).collect())
            .collect()
    }
}

fn block_backward<S: NdFloat>(
    p: &ModelParams<S>,
    bi: usize,
    ctx: &Context<S>,
    bt: &BlockTape<S>,
    mut dx: Array2<S>,
    g: &mut Grads<'_, S>,
    dst: &mut Array2<S>,
    dtext: &mut Array2<S>,
    daudio_h: &mut Array2<S>,
) -> Array2<S> {
    let d = p.config.width;
    let heads = p.config.heads;
    let bs = &p.layout.blocks[bi];
    let m = |i: usize| bt.mods.slice(s![0, i * d..(i + 1) * d]);
    let mut dmods = Array2::<S>::zeros((1, 6 * d));

    // MLP residual
    let dgate2 = (&dx * &bt.m2).sum_axis(Axis(0));
    let dm2 = &dx * &m(5);
    g.linear(bs.mlp_out, &bt.g, &dm2);
    let dg = back(p, bs.mlp_out, &dm2);
    let dm1 = gelu_backward(&bt.m1, &dg);
    g.linear(bs.mlp_in, &bt.h2, &dm1);
    let dh2 = back(p, bs.mlp_in, &dm1);
    let (dn4, dshift2, dscale2) = modulate_backward(&bt.ln4.y, m(4), &dh2);
    dx += &layer_norm_backward(&bt.ln4, &dn4);
    dmods.slice_mut(s![0, 3 * d..4 * d]).assign(&dshift2);
    dmods.slice_mut(s![0, 4 * d..5 * d]).assign(&dscale2);
    dmods.slice_mut(s![0, 5 * d..6 * d]).assign(&dgate2);

    // audio cross-attention residual
    if let (Some((ln3, c)), Some(slots)) = (&bt.audio_attn, &bs.audio) {
        g.linear(slots.out, &c.out, &dx);
        let da = back(p, slots.out, &dx);
        let (dq, dk, dv) = attention_backward(c, &da, heads, Some(&ctx.rope_vq), Some(&ctx.rope_ak));
        g.linear(slots.q, &ln3.y, &dq);
        let dn3 = back(p, slots.q, &dq);
        let dkv = concatenate![Axis(1), dk, dv];
        g.linear(slots.kv, &ctx.audio_h, &dkv);
        *daudio_h += &back(p, slots.kv, &dkv);
        dx += &layer_norm_backward(ln3, &dn3);
    }

    // text cross-attention residual
    if let Some(c) = &bt.text_attn {
        g.linear(bs.text.out, &c.out, &dx);
        let da = back(p, bs.text.out, &dx);
        let (dq, dk, dv) = attention_backward(c, &da, heads, None, None);
        g.linear(bs.text.q, &bt.ln2.y, &dq);
        let dn2 = back(p, bs.text.q, &dq);
        let dkv = concatenate![Axis(1), dk, dv];
        g.linear(bs.text.kv, &ctx.text, &dkv);
        *dtext += &back(p, bs.text.kv, &dkv);
        dx += &layer_norm_backward(&bt.ln2, &dn2);
    }

    // gated self-attention residual
    if let Some((c, ao)) = &bt.self_attn {
        let dgate1 = (&dx * ao).sum_axis(Axis(0));
        let dao = &dx * &m(2);
        g.linear(bs.attn_out, &c.out, &dao);
        let da = back(p, bs.attn_out, &dao);
        let (dq, dk, dv) = attention_backward(c, &da, heads, Some(&ctx.rope_self), Some(&ctx.rope_self));
        let dqkv = concatenate![Axis(1), dq, dk, dv];
        g.linear(bs.qkv, &bt.h1, &dqkv);
        let dh1 = back(p, bs.qkv, &dqkv);
        let (dn1, dshift1, dscale1) = modulate_backward(&bt.ln1.y, m(1), &dh1);
        dx += &layer_norm_backward(&bt.ln1, &dn1);
        dmods.slice_mut(s![0, 0..d]).assign(&dshift1);
        dmods.slice_mut(s![0, d..2 * d]).assign(&dscale1);
        dmods.slice_mut(s![0, 2 * d..3 * d]).assign(&dgate1);
    }

    g.linear(bs.modulation, &ctx.st, &dmods);
    *dst += &back(p, bs.modulation, &dmods);
    dx
}

/// Accumulates parameter gradients of `sum(dout * out)` into `grads`.
pub(crate) fn backward<S: NdFloat>(p: &ModelParams<S>, tape: &Tape<S>, dout: &Array2<S>, grads: &mut [S]) {
    let d = p.config.width;
    let l = &p.layout;
    let ctx = &tape.ctx;
    let mut g = Grads { data: grads };
    let mut dst = Array2::<S>::zeros((1, d));
    let mut dtext = Array2::<S>::zeros((1, d));
    let mut daudio_h = Array2::<S>::zeros(ctx.audio_h.raw_dim());

    let ht = &tape.head;
    g.linear(l.out, &ht.hf, dout);
    let dhf = back(p, l.out, dout);
    let (dnf, dshift, dscale) = modulate_backward(&ht.lnf.y, ht.fmods.slice(s![0, d..2 * d]), &dhf);
    let mut dx = layer_norm_backward(&ht.lnf, &dnf);
    let dfmods = concatenate![Axis(0), dshift, dscale].insert_axis(Axis(0));
    g.linear(l.final_mod, &ctx.st, &dfmods);
    dst += &back(p, l.final_mod, &dfmods);

    for bi in (0..p.config.depth).rev() {
        dx = block_backward(p, bi, ctx, &tape.blocks[bi], dx, &mut g, &mut dst, &mut dtext, &mut daudio_h);
    }

    let pre = &tape.pre;
    g.linear(l.input, &pre.x_in, &dx);
    let dtemb = silu_backward(&pre.temb, &dst);
    g.linear(l.time2, &pre.a1, &dtemb);
    let da1 = back(p, l.time2, &dtemb);
    let dt1 = silu_backward(&pre.t1, &da1);
    g.linear(l.time1, &pre.temb_sin, &dt1);
    g.linear(l.audio_in, &pre.audio_in, &daudio_h);
    if pre.audio_null {
        let dnull: Array1<S> = back(p, l.audio_in, &daudio_h).sum_axis(Axis(0));
        let mut gn = g.vec(l.null_audio);
        gn += &dnull;
    }
    let mut row = g.row(l.text_table, pre.text_row);
    row += &dtext.row(0);
}
