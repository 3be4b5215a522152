//! Flat `key = value` configuration text.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! grouped by a dotted prefix (`model.width`, `train.lr`, `sampler.steps`)
//! when several configs share one file.

use std::str::FromStr;

use crate::error::{invalid, Result};

/// Parses config text into ordered `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(invalid(format!("config line {}: empty key", i + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(invalid(format!("config line {}: duplicate key {k}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

/// A config that can be read from and written to flat key-value text.
pub trait KvConfig {
    /// Sets one key (without prefix).
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in documentation order.
    fn to_kv(&self) -> Vec<(&'static str, String)>;

    /// Applies every pair whose key starts with `prefix.`; other keys are
    /// skipped. Returns how many were applied.
    fn apply_prefixed(&mut self, prefix: &str, pairs: &[(String, String)]) -> Result<usize> {
        let mut n = 0;
        for (k, v) in pairs {
            if let Some(rest) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                self.set_kv(rest, v)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn render(&self, prefix: &str) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{prefix}.{k} = {v}\n")).collect()
    }
}

pub(crate) fn unknown_key(key: &str) -> crate::Error {
    invalid(format!("unknown config key {key}"))
}

impl KvConfig for crate::denoiser::DenoiserConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "width" => self.width = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "audio_xattn_layers" => {
                self.audio_xattn_layers = if value == "all" {
                    (0..self.depth).collect()
                } else if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "text_vocab" => self.text_vocab = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "tokens_per_frame" => self.tokens_per_frame = parse_value(key, value)?,
            "audio_dim" => self.audio_dim = parse_value(key, value)?,
            "rope_base" => self.rope_base = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        let layers: Vec<String> = self.audio_xattn_layers.iter().map(|l| l.to_string()).collect();
        vec![
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("audio_xattn_layers", if layers.is_empty() { "none".into() } else { layers.join(",") }),
            ("text_vocab", self.text_vocab.to_string()),
            ("patch", self.patch.to_string()),
            ("tokens_per_frame", self.tokens_per_frame.to_string()),
            ("audio_dim", self.audio_dim.to_string()),
            ("rope_base", self.rope_base.to_string()),
        ]
    }
}
