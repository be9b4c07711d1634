//! Line-JSON dataset files.
//!
//! One record per line:
//! `{"format_version":1,"id":..,"scene":{..},"query":{..},"prompt":[..],"answer":[..],"label":..,"caption":..,"provenance":..}`.
//! `prompt` and `answer` are vocabulary ids and are checked against the
//! query on load.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::Provenance;
use super::query::{Example, Query};
use super::scene::Scene;
use super::SynthError;
use crate::model::Vocab;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub format_version: u32,
    pub id: u64,
    pub scene: Scene,
    pub query: Query,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub label: Option<bool>,
    pub caption: Option<Vec<usize>>,
    pub provenance: Option<Provenance>,
}

impl DatasetRecord {
    pub fn from_example(e: &Example) -> Self {
        let v = Vocab::new();
        Self {
            format_version: DATASET_VERSION,
            id: e.id,
            scene: e.scene.clone(),
            query: e.query,
            prompt: e.prompt(&v),
            answer: e.answer(&v),
            label: e.label,
            caption: e.caption.clone(),
            provenance: e.provenance,
        }
    }

    pub fn into_example(self) -> Result<Example, SynthError> {
        if self.format_version != DATASET_VERSION {
            return Err(SynthError::Format(format!(
                "record {} has format_version {}, expected {DATASET_VERSION}",
                self.id, self.format_version
            )));
        }
        let e = Example {
            id: self.id,
            scene: self.scene,
            query: self.query,
            label: self.label,
            caption: self.caption,
            provenance: self.provenance,
        };
        let v = Vocab::new();
        if e.prompt(&v) != self.prompt || e.answer(&v) != self.answer {
            return Err(SynthError::Format(format!("record {} token ids disagree with its query", e.id)));
        }
        Ok(e)
    }
}

pub fn write_jsonl(path: &Path, items: &[Example]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in items {
        let line = serde_json::to_string(&DatasetRecord::from_example(e)).map_err(|err| SynthError::Format(err.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, SynthError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| SynthError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into_example()?);
    }
    Ok(out)
}
