//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` is a sequence of records, each a little-endian `u32` name
//! length, the UTF-8 name, then one serialized tensor. Parameter names are
//! prefixed `param:` and running statistics `buffer:`. The manifest carries
//! the architecture hash of the config that produced the weights.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use capsnet3d_tensor::io::{read_tensor, write_tensor};
use capsnet3d_tensor::Element;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const CONFIG: &str = "config.cfg";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub test_accuracy: f64,
    pub tensors: Vec<String>,
}

pub fn save<T: Element>(dir: &Path, store: &ParamStore<T>, cfg: &ModelConfig, epoch: usize, test_accuracy: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TENSORS);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut names = Vec::new();
    let entries = store
        .params()
        .map(|(k, v)| (format!("param:{k}"), v))
        .chain(store.buffers().map(|(k, v)| (format!("buffer:{k}"), v)));
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .and_then(|_| w.write_all(name.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        write_tensor(&mut w, tensor)?;
        names.push(name);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.architecture_hash(),
        epoch,
        test_accuracy,
        tensors: names,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let cpath = dir.join(CONFIG);
    fs::write(&cpath, cfg.to_config_string()).map_err(|e| Error::io(&cpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// Loads weights for `cfg`, refusing checkpoints written for a different
/// architecture.
pub fn load<T: Element>(dir: &Path, cfg: &ModelConfig) -> Result<(ParamStore<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let want = cfg.architecture_hash();
    if manifest.config_hash != want {
        return Err(Error::Load(format!(
            "checkpoint architecture hash {} does not match config hash {want}",
            manifest.config_hash
        )));
    }
    let path = dir.join(TENSORS);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = BufReader::new(file);
    let mut store = ParamStore::new();
    for expected in &manifest.tensors {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| Error::io(&path, e))?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 4096 {
            return Err(Error::Load(format!("tensor name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::io(&path, e))?;
        let name = String::from_utf8(name).map_err(|_| Error::Load("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(Error::Load(format!("expected tensor `{expected}`, found `{name}`")));
        }
        let tensor = read_tensor::<T, _>(&mut r)?;
        if let Some(p) = name.strip_prefix("param:") {
            store.insert_param(p, tensor);
        } else if let Some(b) = name.strip_prefix("buffer:") {
            store.insert_buffer(b, tensor);
        } else {
            return Err(Error::Load(format!("unknown tensor kind in `{name}`")));
        }
    }
    Ok((store, manifest))
}
