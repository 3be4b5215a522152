//! Files on disk: WAV audio, PNG frames, GIF previews, dataset manifests and
//! raw tensor dumps.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};
use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::audio::FeatureStats;
use crate::error::{ensure, invalid, Error, Result};
use crate::world::{audio_envelope, AudioSignal, SceneSpec, TripletSample, VideoClip};

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &x in &audio.samples {
        w.write_sample((x.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads 16-bit integer or 32-bit float WAV; extra channels are averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let raw: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            r.samples::<i16>().map(|s| s.map(|v| v as f32 / i16::MAX as f32)).collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => return Err(invalid(format!("unsupported wav format {fmt:?} {bits}-bit"))),
    };
    let mono = raw.chunks(ch).map(|c| (c.iter().sum::<f32>() / ch as f32).clamp(-1.0, 1.0)).collect();
    AudioSignal::new(mono, spec.sample_rate)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_image(frame: ArrayView3<'_, f32>) -> RgbImage {
    let (h, w, _) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([to_u8(frame[[i, j, 0]]), to_u8(frame[[i, j, 1]]), to_u8(frame[[i, j, 2]])])
    })
}

/// Writes one `[H, W, 3]` frame as 8-bit RGB PNG.
pub fn write_png(path: impl AsRef<Path>, frame: ArrayView3<'_, f32>) -> Result<()> {
    ensure!(frame.dim().2 == 3, "frame must have 3 channels");
    frame_image(frame).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a PNG as `[H, W, 3]` in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
    }))
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:05}.png")
}

/// Writes every frame of `clip` into `dir` (created if missing).
pub fn write_frames(dir: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for k in 0..clip.len() {
        write_png(dir.join(frame_file_name(k)), clip.frame(k))?;
    }
    Ok(())
}

/// Reads `frame_00000.png`, `frame_00001.png`, ... until the first gap.
pub fn read_frames(dir: impl AsRef<Path>, fps: f32) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    while let Some(path) = Some(dir.join(frame_file_name(frames.len()))).filter(|p| p.exists()) {
        frames.push(read_png(path)?);
    }
    ensure!(!frames.is_empty(), "no frames found in {}", dir.display());
    let (h, w, _) = frames[0].dim();
    ensure!(frames.iter().all(|f| f.dim() == (h, w, 3)), "frames in {} differ in size", dir.display());
    let data = Array4::from_shape_fn((frames.len(), h, w, 3), |(k, i, j, c)| frames[k][[i, j, c]]);
    VideoClip::new(data, fps)
}

/// Animated preview, looping forever.
pub fn write_gif(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)?;
    let delay = Delay::from_numer_denom_ms(1000, clip.fps.max(1.0).round() as u32);
    for k in 0..clip.len() {
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(frame_image(clip.frame(k))).to_rgba8();
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, delay))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub scene: SceneSpec,
    /// Relative to the manifest directory.
    pub audio: PathBuf,
    pub frames_dir: PathBuf,
    pub frames: usize,
    pub sync_c: f64,
    pub sync_d: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fps: f32,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    /// Audio feature normalisation fitted on the kept samples.
    pub audio_stats: Option<FeatureStats>,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let f = BufWriter::new(File::create(dir.as_ref().join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let f = BufReader::new(File::open(dir.as_ref().join(MANIFEST_FILE))?);
        Ok(serde_json::from_reader(f)?)
    }

    /// Loads every sample back as a triplet; the envelope is recomputed from
    /// the decoded audio.
    pub fn load_samples(&self, dir: impl AsRef<Path>) -> Result<Vec<TripletSample>> {
        let dir = dir.as_ref();
        self.samples
            .iter()
            .map(|e| {
                let audio = read_wav(dir.join(&e.audio))?;
                let video = read_frames(dir.join(&e.frames_dir), self.fps)?;
                ensure!(video.len() == e.frames, "{}: expected {} frames, found {}", e.id, e.frames, video.len());
                let envelope = audio_envelope(&audio, self.fps, e.frames)?;
                Ok(TripletSample { audio, video, scene: e.scene.clone(), envelope })
            })
            .collect()
    }
}

/// Writes one sample's WAV and frames under `dir/<id>/`.
pub fn write_sample(dir: impl AsRef<Path>, id: &str, sample: &TripletSample) -> Result<(PathBuf, PathBuf)> {
    let rel = PathBuf::from(id);
    fs::create_dir_all(dir.as_ref().join(&rel))?;
    let audio = rel.join("audio.wav");
    let frames = rel.join("frames");
    write_wav(dir.as_ref().join(&audio), &sample.audio)?;
    write_frames(dir.as_ref().join(&frames), &sample.video)?;
    Ok((audio, frames))
}

const TENSOR_MAGIC: &[u8; 8] = b"TKFLOWTN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Raw tensor dump: magic, u32 LE header length, JSON header
/// `{dtype, shape}`, then little-endian values in row-major order.
pub fn write_tensor(path: impl AsRef<Path>, shape: &[usize], data: &[f64], dtype: Dtype) -> Result<()> {
    ensure!(shape.iter().product::<usize>() == data.len(), "shape {shape:?} does not match {} values", data.len());
    let header = serde_json::to_vec(&TensorHeader { dtype, shape: shape.to_vec() })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for &v in data {
        match dtype {
            Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            Dtype::F64 => w.write_all(&v.to_le_bytes())?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor dump; values are widened to f64.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>, Dtype)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let decode = |offset: usize, message: &str| Error::Decode { offset: offset as u64, message: message.into() };
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(decode(0, "not a tensor file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(decode(12, "truncated header"));
    }
    let header: TensorHeader = serde_json::from_slice(&bytes[12..body]).map_err(|e| decode(12, &e.to_string()))?;
    let n: usize = header.shape.iter().product();
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if bytes.len() != body + n * width {
        return Err(decode(body, "data length does not match shape"));
    }
    let data = bytes[body..]
        .chunks_exact(width)
        .map(|c| match header.dtype {
            Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok((header.shape, data, header.dtype))
}
