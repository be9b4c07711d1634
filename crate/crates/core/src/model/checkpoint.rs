//! Checkpoint container: one JSON header line, then raw little-endian f64 blobs.
//!
//! ```text
//! {"format_version":1,"kind":"model","config":{..},"tensors":[{"name":..,"shape":[..],"offset":0},..]}\n
//! <f64 LE bytes of tensor 0><f64 LE bytes of tensor 1>...
//! ```
//!
//! `offset` is in bytes from the start of the blob section. The DAC module
//! reuses the container with `kind = "dac"` and `dac.`-prefixed names.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::ndgrad::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet,
}

pub fn write_container<W: Write>(mut w: W, c: &Container) -> Result<(), ModelError> {
    let mut offset = 0u64;
    let tensors = c
        .params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: c.kind.clone(),
        config: c.config.clone(),
        tensors,
    };
    let line = serde_json::to_string(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, t) in c.params.iter() {
        let mut buf = Vec::with_capacity(8 * t.numel());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(r: R) -> Result<Container, ModelError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(ModelError::Checkpoint("missing header terminator".into()));
    }
    let header: Header =
        serde_json::from_str(line.trim_end_matches('\n')).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut params = ParamSet::new();
    let mut expected = 0u64;
    for e in header.tensors {
        if e.offset != expected {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{}` at offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * numel;
        if end > blob.len() {
            return Err(ModelError::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| ModelError::Checkpoint(err.to_string()))?;
        if params.index_of(&e.name).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
        params.insert(e.name, t);
        expected = end as u64;
    }
    if expected as usize != blob.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            blob.len() - expected as usize
        )));
    }
    Ok(Container {
        kind: header.kind,
        config: header.config,
        params,
    })
}

pub fn save_container(path: &Path, c: &Container) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    write_container(std::io::BufWriter::new(f), c)
}

pub fn load_container(path: &Path) -> Result<Container, ModelError> {
    read_container(std::fs::File::open(path)?)
}

impl Model {
    pub fn to_container(&self) -> Container {
        Container {
            kind: "model".into(),
            config: serde_json::to_value(self.config()).expect("config serializes"),
            params: self.params().clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self, ModelError> {
        if c.kind != "model" {
            return Err(ModelError::Checkpoint(format!("expected a model checkpoint, found kind `{}`", c.kind)));
        }
        let config: ModelConfig =
            serde_json::from_value(c.config).map_err(|e| ModelError::Checkpoint(format!("bad config: {e}")))?;
        Model::from_params(config, c.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_container(load_container(path)?)
    }
}
