//! `oracle`: machine-readable reference values from the longhand oracles.

use std::path::PathBuf;

use clap::{Args, Subcommand};
use talkflow_core::io::{write_tensor, Dtype};
use talkflow_core::ndarray::Array4;
use talkflow_core::oracle::{blf_affine_case, block_max, fuse_weights, masked_mean, masked_mse, window_trace};
use talkflow_core::Result;

use crate::Global;

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(subcommand)]
    which: Which,
}

#[derive(Debug, Subcommand)]
enum Which {
    /// Window boundaries for length L, window F, overlap O.
    Windows { length: usize, window: usize, overlap: usize },
    /// Fusion weights for overlap O.
    Fuse { overlap: usize },
    /// Windowed sampling under a random affine velocity field.
    BlfAffine(BlfArgs),
    /// Masked losses on seeded random tensors.
    MaskedLoss {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct BlfArgs {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    length: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    overlap: usize,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Latent frame shape C,h,w.
    #[arg(long, default_value = "2,2,2")]
    shape: String,
    /// Directory for init.bin, expected.bin, a.bin and b.bin.
    #[arg(long, default_value = "oracle_blf_affine")]
    out: PathBuf,
}

fn seeded(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    // splitmix64, so this stays independent of the crates under test
    let mut state = seed;
    Array4::from_shape_simple_fn(shape, || {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

pub fn run(a: OracleArgs, _g: &Global) -> Result<()> {
    let out = match a.which {
        Which::Windows { length, window, overlap } => serde_json::json!({ "windows": window_trace(length, window, overlap)? }),
        Which::Fuse { overlap } => serde_json::json!({ "weights": fuse_weights(overlap)? }),
        Which::BlfAffine(b) => {
            let dims: Vec<usize> = b.shape.split(',').filter_map(|s| s.trim().parse().ok()).collect();
            let [c, h, w] = dims[..] else {
                return Err(talkflow_core::Error::InvalidArgument(format!("shape must be C,h,w, got {:?}", b.shape)));
            };
            let case = blf_affine_case(b.seed, (b.length, b.window, b.overlap), (c, h, w), b.steps)?;
            std::fs::create_dir_all(&b.out)?;
            let n = case.mock.n;
            let shape = [b.length, c, h, w];
            write_tensor(b.out.join("init.bin"), &shape, case.init.as_slice().expect("contiguous"), Dtype::F64)?;
            write_tensor(b.out.join("expected.bin"), &shape, case.expected.as_slice().expect("contiguous"), Dtype::F64)?;
            write_tensor(b.out.join("a.bin"), &[n, n], &case.mock.a, Dtype::F64)?;
            write_tensor(b.out.join("b.bin"), &[n], &case.mock.b, Dtype::F64)?;
            serde_json::json!({
                "windows": case.windows,
                "steps": b.steps,
                "out": b.out,
                "expected_sum": case.expected.sum(),
            })
        }
        Which::MaskedLoss { seed } => {
            let shape = (2, 3, 2, 2);
            let (p, q) = (seeded(seed, shape), seeded(seed ^ 0xff, shape));
            let mask = seeded(seed ^ 0xf0f0, (2, 1, 2, 2)).mapv(|v| if v > 0.0 { 1.0f32 } else { 0.0 });
            let pixel = seeded(seed ^ 0xabc, (1, 8, 8, 1)).mapv(|v| if v > 0.5 { 1.0f32 } else { 0.0 });
            let pixel = pixel.into_shape_with_order((1, 8, 8)).expect("shape");
            serde_json::json!({
                "joint_w1_2_w2_0": masked_mse(&p, &q, &mask, 2.0, 0.0),
                "joint_w1_2_w2_1": masked_mse(&p, &q, &mask, 2.0, 1.0),
                "face_restricted": masked_mean(&p, &q, &mask),
                "pool_p4": block_max(&pixel, 4).iter().copied().collect::<Vec<_>>(),
            })
        }
    };
    println!("{out}");
    Ok(())
}
