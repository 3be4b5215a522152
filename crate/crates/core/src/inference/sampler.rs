//! Euler integration of a velocity field, whole-sequence or windowed with
//! overlap fusion.
//!
//! Time runs from 0 (noise) to 1 (data). Step `k` (1-based, counted from the
//! noisiest) evaluates the field at `t = (k - 1) / steps`.

use ndarray::{s, Array4, NdFloat};

use super::windows::{fuse_overlap, write_back, FusionRule, WindowPlan};
use crate::error::{ensure, Result};

/// Where one field evaluation sits in the sampling loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub window: usize,
    pub start: usize,
    pub end: usize,
    /// 1-based, 1 is the noisiest step.
    pub step: usize,
    pub steps: usize,
    pub t: f64,
}

/// Velocity of the latent of one window at one step.
pub trait VelocityField<S> {
    fn velocity(&mut self, info: &StepInfo, z: &Array4<S>) -> Result<Array4<S>>;
}

impl<S, F: FnMut(&StepInfo, &Array4<S>) -> Result<Array4<S>>> VelocityField<S> for F {
    fn velocity(&mut self, info: &StepInfo, z: &Array4<S>) -> Result<Array4<S>> {
        self(info, z)
    }
}

fn euler_step<S: NdFloat>(z: &mut Array4<S>, v: &Array4<S>, dt: S) -> Result<()> {
    ensure!(v.dim() == z.dim(), "velocity shape {:?} != latent {:?}", v.dim(), z.dim());
    z.zip_mut_with(v, |a, &b| *a += b * dt);
    Ok(())
}

fn step_time(k: usize, steps: usize) -> f64 {
    (k - 1) as f64 / steps as f64
}

/// Plain sampler over the whole sequence.
pub fn euler_sample<S: NdFloat, F: VelocityField<S>>(field: &mut F, z_init: &Array4<S>, steps: usize) -> Result<Array4<S>> {
    ensure!(steps >= 1, "need at least one step");
    let l = z_init.dim().0;
    let dt = S::from(1.0 / steps as f64).expect("dt");
    let mut z = z_init.clone();
    for k in 1..=steps {
        let info = StepInfo { window: 0, start: 0, end: l, step: k, steps, t: step_time(k, steps) };
        let v = field.velocity(&info, &z)?;
        euler_step(&mut z, &v, dt)?;
    }
    Ok(z)
}

/// Windowed sampler. Each window keeps its own latent, initialised from
/// `z_init`. At every step windows advance left to right; from the second
/// step on, each window's first `o` frames are fused with the previous
/// window's last `o` frames and the result is written into both. With
/// `o = 0` windows are independent.
pub fn blf_sample<S: NdFloat, F: VelocityField<S>>(
    field: &mut F,
    z_init: &Array4<S>,
    plan: &WindowPlan,
    steps: usize,
    rule: FusionRule,
) -> Result<Array4<S>> {
    ensure!(steps >= 1, "need at least one step");
    let l = z_init.dim().0;
    ensure!(plan.length == l, "plan covers {} frames, latent has {l}", plan.length);
    ensure!(plan.overlap != 1, "overlap of 1 frame cannot be fused");
    let o = plan.overlap;
    let dt = S::from(1.0 / steps as f64).expect("dt");
    let mut lat: Vec<Array4<S>> =
        plan.windows.iter().map(|&(s, e)| z_init.slice(s![s..e, .., .., ..]).to_owned()).collect();

    for k in 1..=steps {
        for (wi, &(start, end)) in plan.windows.iter().enumerate() {
            let info = StepInfo { window: wi, start, end, step: k, steps, t: step_time(k, steps) };
            let v = field.velocity(&info, &lat[wi])?;
            euler_step(&mut lat[wi], &v, dt)?;
            if wi > 0 && k > 1 && o > 0 {
                let (before, after) = lat.split_at_mut(wi);
                let (prev, cur) = (&mut before[wi - 1], &mut after[0]);
                let pl = prev.dim().0;
                let fused = fuse_overlap(
                    cur.slice(s![0..o, .., .., ..]),
                    prev.slice(s![pl - o.., .., .., ..]),
                    o,
                    rule,
                )?;
                write_back(cur, prev, &fused);
            }
        }
    }

    let mut out = Array4::zeros(z_init.raw_dim());
    for (&(s, e), z) in plan.windows.iter().zip(&lat) {
        out.slice_mut(s![s..e, .., .., ..]).assign(z);
    }
    Ok(out)
}
