//! Residual cache that skips the transformer blocks when the modulated
//! input has barely moved since the last full evaluation.

use ndarray::Array2;

use crate::codec::LatentVideo;
use crate::denoiser::{DenoiseInput, ForwardOptions, ForwardStages, ModelParams};
use crate::error::{ensure, Result};

/// Cache of one denoiser branch of one window.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    last_summary: Option<Array2<f32>>,
    /// Block-stack output minus its input from the last full evaluation.
    residual: Option<Array2<f32>>,
    /// Relative change summed since the last full evaluation.
    pub accumulated: f64,
    pub skips: usize,
    pub calls: usize,
}

/// `mean |a - b| / mean |b|`
fn relative_l1(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum();
    let den: f64 = b.iter().map(|y| y.abs() as f64).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

impl CacheState {
    pub fn has_residual(&self) -> bool {
        self.residual.is_some()
    }
}

/// One denoiser evaluation through the cache. `step` is 1-based out of
/// `steps`; the first and last steps always run the full model. With
/// `alpha = 0` nothing is ever skipped and the result is bit-identical to
/// an uncached forward.
pub fn cached_forward(
    cache: &mut CacheState,
    params: &ModelParams,
    input: &DenoiseInput<'_>,
    alpha: f64,
    step: usize,
    steps: usize,
) -> Result<LatentVideo> {
    ensure!(alpha >= 0.0 && !alpha.is_nan(), "cache threshold must be non-negative");
    let stages = ForwardStages::new(params, input, &ForwardOptions::default())?;
    cache.calls += 1;
    if alpha == 0.0 {
        return Ok(stages.head(&stages.run_blocks()));
    }
    let summary = stages.modulated_input();
    if let Some(last) = &cache.last_summary {
        cache.accumulated += relative_l1(&summary, last);
    }
    cache.last_summary = Some(summary);
    let pinned = step == 1 || step == steps;
    if !pinned && cache.accumulated < alpha {
        if let Some(residual) = &cache.residual {
            cache.skips += 1;
            return Ok(stages.head(&(stages.input_tokens() + residual)));
        }
    }
    let hidden = stages.run_blocks();
    cache.residual = Some(&hidden - stages.input_tokens());
    cache.accumulated = 0.0;
    Ok(stages.head(&hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward, DenoiserConfig};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, Vec<LatentVideo>) {
        let params = ModelParams::random(DenoiserConfig::with_width_depth(24, 2), 1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs = (0..6)
            .map(|_| LatentVideo { data: Array4::from_shape_fn((2, 48, 2, 2), |_| rng.random_range(-1.0..1.0)), patch: 4 })
            .collect();
        (params, zs)
    }

    #[test]
    fn disabled_cache_is_exact() {
        let (params, zs) = setup();
        let mut cache = CacheState::default();
        for (k, z) in zs.iter().enumerate() {
            let input = DenoiseInput { z_t: z, t: k as f32 / 6.0, text: Some(0), cond: None, audio: None };
            assert_eq!(cached_forward(&mut cache, &params, &input, 0.0, k + 1, 6).unwrap(), forward(&input, &params).unwrap());
        }
        assert_eq!(cache.skips, 0);
    }

    #[test]
    fn huge_threshold_skips_all_but_ends() {
        let (params, zs) = setup();
        let mut cache = CacheState::default();
        for (k, z) in zs.iter().enumerate() {
            let input = DenoiseInput { z_t: z, t: k as f32 / 6.0, text: None, cond: None, audio: None };
            cached_forward(&mut cache, &params, &input, 1e30, k + 1, 6).unwrap();
        }
        assert_eq!((cache.skips, cache.calls), (4, 6));
    }

    #[test]
    fn skip_reuses_residual() {
        let (params, zs) = setup();
        let mut cache = CacheState::default();
        let input = DenoiseInput { z_t: &zs[0], t: 0.5, text: None, cond: None, audio: None };
        let full = cached_forward(&mut cache, &params, &input, 1.0, 1, 3).unwrap();
        // same input again: zero change, so the residual reproduces the full pass
        let skipped = cached_forward(&mut cache, &params, &input, 1.0, 2, 3).unwrap();
        assert_eq!(cache.skips, 1);
        for (a, b) in full.data.iter().zip(skipped.data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
