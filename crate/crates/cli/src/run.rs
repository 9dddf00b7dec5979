// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct InputRecord {
    flag: String,
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    params: &'a BTreeMap<String, serde_json::Value>,
    inputs: &'a [InputRecord],
    outputs: Vec<&'a str>,
}

/// One subcommand invocation: validated inputs, written artifacts and the
/// manifest describing both.
pub struct Run {
    out: PathBuf,
    subcommand: &'static str,
    seed: u64,
    params: BTreeMap<String, serde_json::Value>,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

fn digest_file(path: &Path) -> Result<(u64, String)> {
    let mut hasher = Sha256::new();
    let mut bytes = 0;
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries.iter().filter(|e| e.is_file()) {
            let data = fs::read(e)?;
            hasher.update(e.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            hasher.update(&data);
            bytes += data.len() as u64;
        }
    } else {
        let data = fs::read(path)?;
        hasher.update(&data);
        bytes = data.len() as u64;
    }
    let hex = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((bytes, hex))
}

impl Run {
    pub fn new(subcommand: &'static str, out: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            subcommand,
            seed,
            params: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input that must already exist.
    pub fn input<'p>(&mut self, flag: &str, path: &'p Path) -> Result<&'p Path> {
        if !path.exists() {
            bail!("--{flag}: {} does not exist", path.display());
        }
        let (bytes, sha256) = digest_file(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            flag: flag.to_string(),
            path: path.display().to_string(),
            bytes,
            sha256,
        });
        Ok(path)
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.params.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Path for an artifact that a library call writes itself.
    pub fn artifact(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.artifact(name)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self) -> Result<()> {
        let mut outputs: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
        outputs.sort_unstable();
        let manifest = Manifest {
            tool: "tlens",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            seed: self.seed,
            params: &self.params,
            inputs: &self.inputs,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }
}
