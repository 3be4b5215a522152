//! Config merging and run-directory manifests.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use talkflow_core::config::KvConfig;
use talkflow_core::{Error, Result};

use crate::Global;

const SECTIONS: [&str; 5] = ["data", "model", "train", "sampler", "eval"];

/// Builds a config from defaults, then the config file's `prefix.*` keys,
/// then explicitly given flags.
pub fn merge<C: KvConfig>(mut cfg: C, prefix: &str, g: &Global, flags: &[(&str, Option<String>)]) -> Result<C> {
    for (k, _) in &g.config {
        let section = k.split('.').next().unwrap_or("");
        if !SECTIONS.contains(&section) || !k.contains('.') {
            return Err(Error::InvalidArgument(format!("unknown config key {k}")));
        }
    }
    cfg.apply_prefixed(prefix, &g.config)?;
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set_kv(k, v)?;
        }
    }
    Ok(cfg)
}

/// Stringifies an optional flag value.
pub fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(T::to_string))
}

/// Prints each config under its prefix; returns true if the caller should stop.
pub fn maybe_print(g: &Global, sections: &[(&str, &dyn Renders)]) -> bool {
    if g.print_config {
        for (prefix, c) in sections {
            print!("{}", c.render_with(prefix));
        }
    }
    g.print_config
}

/// Object-safe rendering.
pub trait Renders {
    fn render_with(&self, prefix: &str) -> String;
}

impl<C: KvConfig> Renders for C {
    fn render_with(&self, prefix: &str) -> String {
        self.render(prefix)
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Vec<(String, String)>,
    /// Paths relative to the run directory.
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, sections: &[(&str, &dyn Renders)]) -> Self {
        let mut config = Vec::new();
        for (prefix, c) in sections {
            for line in c.render_with(prefix).lines() {
                if let Some((k, v)) = line.split_once(" = ") {
                    config.push((k.to_string(), v.to_string()));
                }
            }
        }
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            config,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(dir.join("run.json"))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = std::io::BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Unwraps a path flag that clap only requires outside `--print-config`.
pub fn need<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::InvalidArgument(format!("--{} is required", name.replace('_', "-"))))
}
