//! Flat parameter storage and the checkpoint format.
//!
//! Checkpoint layout:
//! `b"TKFLOWCK"` | u32 LE header length | JSON header (config + tensor names
//! and shapes) | f32 LE tensor data in declared order | u32 LE CRC-32 of all
//! preceding bytes.

use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::ops::cst;
use super::DenoiserConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TKFLOWCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearSlot {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CrossSlots {
    pub q: LinearSlot,
    pub kv: LinearSlot,
    pub out: LinearSlot,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSlots {
    pub modulation: LinearSlot,
    pub qkv: LinearSlot,
    pub attn_out: LinearSlot,
    pub text: CrossSlots,
    pub audio: Option<CrossSlots>,
    pub mlp_in: LinearSlot,
    pub mlp_out: LinearSlot,
}

/// Where every tensor lives inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: LinearSlot,
    pub time1: LinearSlot,
    pub time2: LinearSlot,
    pub audio_in: LinearSlot,
    pub null_audio: Slot,
    pub text_table: Slot,
    pub blocks: Vec<BlockSlots>,
    pub final_mod: LinearSlot,
    pub out: LinearSlot,
    pub entries: Vec<(String, Slot)>,
    pub total: usize,
}

struct Builder {
    entries: Vec<(String, Slot)>,
    total: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        let slot = Slot { offset: self.total, rows, cols };
        self.total += rows * cols;
        self.entries.push((name, slot));
        slot
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearSlot {
        LinearSlot {
            w: self.tensor(format!("{name}.weight"), fan_in, fan_out),
            b: self.tensor(format!("{name}.bias"), 1, fan_out),
        }
    }

    fn cross(&mut self, name: &str, d: usize) -> CrossSlots {
        CrossSlots {
            q: self.linear(&format!("{name}.q"), d, d),
            kv: self.linear(&format!("{name}.kv"), d, 2 * d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.width;
        let mut b = Builder { entries: Vec::new(), total: 0 };
        let input = b.linear("input", cfg.in_channels(), d);
        let time1 = b.linear("time.fc1", d, d);
        let time2 = b.linear("time.fc2", d, d);
        let audio_in = b.linear("audio.proj", cfg.audio_dim, d);
        let null_audio = b.tensor("audio.null".into(), 1, cfg.audio_dim);
        let text_table = b.tensor("text.table".into(), cfg.text_vocab + 1, d);
        let blocks = (0..cfg.depth)
            .map(|i| BlockSlots {
                modulation: b.linear(&format!("blocks.{i}.modulation"), d, 6 * d),
                qkv: b.linear(&format!("blocks.{i}.attn.qkv"), d, 3 * d),
                attn_out: b.linear(&format!("blocks.{i}.attn.out"), d, d),
                text: b.cross(&format!("blocks.{i}.text"), d),
                audio: cfg.audio_xattn_layers.contains(&i).then(|| b.cross(&format!("blocks.{i}.audio"), d)),
                mlp_in: b.linear(&format!("blocks.{i}.mlp.fc1"), d, cfg.mlp_hidden()),
                mlp_out: b.linear(&format!("blocks.{i}.mlp.fc2"), cfg.mlp_hidden(), d),
            })
            .collect();
        let final_mod = b.linear("final.modulation", d, 2 * d);
        let out = b.linear("final.out", d, cfg.latent_channels());
        Layout {
            input,
            time1,
            time2,
            audio_in,
            null_audio,
            text_table,
            blocks,
            final_mod,
            out,
            entries: b.entries,
            total: b.total,
        }
    }
}

/// All learnable weights of the denoiser in one flat vector.
#[derive(Debug, Clone)]
pub struct ModelParams<S = f32> {
    pub(crate) config: DenoiserConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<S>,
}

impl<S: NdFloat> ModelParams<S> {
    fn with_data(config: DenoiserConfig, data: impl FnOnce(&Layout) -> Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = data(&layout);
        debug_assert_eq!(data.len(), layout.total);
        Ok(Self { config, layout, data })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        Self::with_data(config, |l| vec![S::zero(); l.total])
    }

    /// Training initialisation: Xavier-uniform linears with zero biases,
    /// zeroed modulation heads (every gate starts closed) and output layer.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        Self::with_data(config, |l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = vec![S::zero(); l.total];
            let zeroed: Vec<Slot> = l
                .blocks
                .iter()
                .map(|b| b.modulation.w)
                .chain([l.final_mod.w, l.out.w])
                .collect();
            for (name, slot) in &l.entries {
                let values = &mut data[slot.offset..slot.offset + slot.len()];
                if name.ends_with(".bias") || zeroed.contains(slot) {
                    continue;
                }
                let limit = if name == "text.table" || name == "audio.null" {
                    0.1
                } else {
                    (6.0 / (slot.rows + slot.cols) as f64).sqrt()
                };
                let dist = Uniform::new(-limit, limit).expect("valid range");
                values.iter_mut().for_each(|v| *v = cst(dist.sample(&mut rng)));
            }
            data
        })
    }

    /// Every parameter i.i.d. uniform in `[-scale, scale]`.
    pub fn random(config: DenoiserConfig, seed: u64, scale: f64) -> Result<Self> {
        Self::with_data(config, |l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..l.total).map(|_| cst(rng.random_range(-scale..=scale))).collect()
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Named tensors in declared order, as `(name, rows, cols)`.
    pub fn tensor_names(&self) -> Vec<(String, usize, usize)> {
        self.layout.entries.iter().map(|(n, s)| (n.clone(), s.rows, s.cols)).collect()
    }

    /// Mutable access to one named tensor, flattened row-major.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [S]> {
        let slot = self.layout.entries.iter().find(|(n, _)| n == name)?.1;
        Some(&mut self.data[slot.offset..slot.offset + slot.len()])
    }

    pub(crate) fn mat(&self, s: Slot) -> ArrayView2<'_, S> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.len()]).expect("slot shape")
    }

    pub(crate) fn vec(&self, s: Slot) -> ArrayView1<'_, S> {
        ArrayView1::from(&self.data[s.offset..s.offset + s.len()])
    }

    pub(crate) fn row(&self, s: Slot, r: usize) -> ArrayView1<'_, S> {
        let start = s.offset + r * s.cols;
        ArrayView1::from(&self.data[start..start + s.cols])
    }

    /// Converts to another scalar type.
    pub fn cast<T: NdFloat>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| cst(v.to_f64().expect("finite"))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: 1,
            config: self.config.clone(),
            tensors: self
                .layout
                .entries
                .iter()
                .map(|(name, s)| TensorHeader { name: name.clone(), shape: [s.rows, s.cols] })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_f32().expect("f32 representable").to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the stored config equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &DenoiserConfig) -> Result<Self> {
        let p = Self::load(path)?;
        if &p.config != expected {
            return Err(Error::Decode {
                offset: 12,
                message: format!("checkpoint config {:?} does not match expected {:?}", p.config, expected),
            });
        }
        Ok(p)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Decode { offset: offset as u64, message };
        if bytes.len() < 16 {
            return Err(fail(0, format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != actual {
            return Err(fail(bytes.len() - 4, format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let data_start = 12 + header_len;
        if data_start > bytes.len() - 4 {
            return Err(fail(8, format!("header length {header_len} exceeds file")));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..data_start]).map_err(|e| fail(12 + e.column(), format!("header: {e}")))?;
        if header.format != 1 {
            return Err(fail(12, format!("unsupported format {}", header.format)));
        }
        header.config.validate().map_err(|e| fail(12, e.to_string()))?;
        let layout = Layout::new(&header.config);
        let declared: Vec<(String, [usize; 2])> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        let expected: Vec<(String, [usize; 2])> =
            layout.entries.iter().map(|(n, s)| (n.clone(), [s.rows, s.cols])).collect();
        if declared != expected {
            return Err(fail(12, "tensor table does not match config".into()));
        }
        let payload = &bytes[data_start..bytes.len() - 4];
        if payload.len() != 4 * layout.total {
            return Err(fail(data_start, format!("expected {} data bytes, found {}", 4 * layout.total, payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| cst(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Ok(Self { config: header.config, layout, data })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: DenoiserConfig,
    tensors: Vec<TensorHeader>,
}

/// Mutable gradient buffer with the same layout as the parameters.
pub(crate) struct Grads<'a, S> {
    pub data: &'a mut [S],
}

impl<S: NdFloat> Grads<'_, S> {
    pub fn mat(&mut self, s: Slot) -> ArrayViewMut2<'_, S> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.offset..s.offset + s.len()]).expect("slot shape")
    }

    pub fn vec(&mut self, s: Slot) -> ArrayViewMut1<'_, S> {
        ArrayViewMut1::from(&mut self.data[s.offset..s.offset + s.len()])
    }

    pub fn row(&mut self, s: Slot, r: usize) -> ArrayViewMut1<'_, S> {
        let start = s.offset + r * s.cols;
        ArrayViewMut1::from(&mut self.data[start..start + s.cols])
    }
}
