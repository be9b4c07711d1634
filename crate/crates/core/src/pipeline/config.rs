use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::calib_dac::{DacSpec, DacTrainConfig};
use crate::calib_uac::UacConfig;
use crate::model::{ModelConfig, PretrainConfig, QueryPolicy};
use crate::probe::PromptKind;
use crate::synth::{BlankKind, QuestionMix, SynthConfig};

/// Everything a run depends on besides the code itself.
///
/// Seed fields inside the other sections are overwritten from `seeds` when
/// the config is resolved, so the resolved file shows the values in effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub uac: UacConfig,
    pub dac: DacSection,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                qk_init_std: 0.05,
                ..ModelConfig::default()
            },
            synth: SynthConfig {
                hot_ratio: 0.95,
                n_pretrain: 3000,
                mix: QuestionMix {
                    existence: 0.9,
                    count: 0.025,
                    position: 0.025,
                    color: 0.025,
                    caption: 0.025,
                },
                ..SynthConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 5,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
            uac: UacConfig::default(),
            dac: DacSection::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Scene generation, splits and augmentation.
    pub data: u64,
    /// Backbone initialisation.
    pub init: u64,
    pub pretrain: u64,
    /// DAC initialisation, shuffling and second views.
    pub dac: u64,
    /// Open-ended sampling in the probe and in UAC estimation.
    pub sampling: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            pretrain: seed,
            dac: seed,
            sampling: seed,
        }
    }
}

/// Artifact locations. Relative paths are resolved against the run root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Used when neither `--out` nor `ATTNCALIB_OUT` is given.
    pub root: PathBuf,
    /// Backbone checkpoint to use instead of `pretrain/model.ckpt`.
    pub model: Option<PathBuf>,
    /// Calibration matrix to use instead of `uac/calibration.json`.
    pub uac: Option<PathBuf>,
    /// DAC checkpoint to use instead of `dac/module.ckpt`.
    pub dac: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs/default"),
            model: None,
            uac: None,
            dac: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AutoTag {
    Auto,
}

/// Target layers: an explicit list, or `"auto"` to train one module per
/// consecutive pair and keep the one most accurate on the calibration split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Fixed(Vec<usize>),
    #[serde(with = "auto")]
    Auto,
}

mod auto {
    use super::AutoTag;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&AutoTag::Auto, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        AutoTag::deserialize(d).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacSection {
    pub layers: LayerSelection,
    pub depth: usize,
    /// 0 means the number of vision tokens.
    pub hidden: usize,
    pub residual: bool,
    pub query_policy: QueryPolicy,
    pub train: DacTrainConfig,
}

impl Default for DacSection {
    fn default() -> Self {
        let spec = DacSpec::default();
        Self {
            layers: LayerSelection::Auto,
            depth: spec.depth,
            hidden: spec.hidden,
            residual: spec.residual,
            query_policy: spec.query_policy,
            train: DacTrainConfig::default(),
        }
    }
}

impl DacSection {
    pub fn spec(&self, layers: Vec<usize>, seed: u64) -> DacSpec {
        DacSpec {
            layers,
            depth: self.depth,
            hidden: self.hidden,
            residual: self.residual,
            query_policy: self.query_policy,
            init_seed: seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Uac,
    Dac,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Uac => "uac",
            Arm::Dac => "dac",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Arms scored by `eval`. Each non-baseline arm needs its artifact.
    pub arms: Vec<Arm>,
    /// Single-object scenes per quadrant for the hot/cold gap.
    pub quadrant_scenes: usize,
    /// Caption tokens read by the hallucination rates.
    pub caption_cap: usize,
    pub probe_input: BlankKind,
    pub probe_prompt: PromptKind,
    /// Layers the probe reports; empty means all.
    pub probe_layers: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            arms: vec![Arm::Baseline, Arm::Uac, Arm::Dac],
            quadrant_scenes: 150,
            caption_cap: crate::evalkit::DEFAULT_CAPTION_CAP,
            probe_input: BlankKind::White,
            probe_prompt: PromptKind::default(),
            probe_layers: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from an empty document), applies the dotted
    /// `key=value` overrides and then `seed`, and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, PipelineError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        PipelineError::Missing(p.to_path_buf())
                    } else {
                        PipelineError::Io(e)
                    }
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seeds = Seeds::all(s);
        }
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn sync_seeds(&mut self) {
        self.pretrain.seed = self.seeds.pretrain;
        self.dac.train.seed = self.seeds.dac;
        self.uac.seed = self.seeds.sampling;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.dac.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if (self.model.grid_h, self.model.grid_w) != (self.synth.grid_h, self.synth.grid_w) {
            return bad(format!(
                "model grid {}x{} differs from synth grid {}x{}",
                self.model.grid_h, self.model.grid_w, self.synth.grid_h, self.synth.grid_w
            ));
        }
        if self.synth.n_pretrain == 0 || self.synth.n_validation == 0 {
            return bad("synth.n_pretrain and synth.n_validation must be positive".into());
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return bad("pretrain needs positive epochs, batch_size and lr".into());
        }
        if self.eval.quadrant_scenes == 0 || self.eval.caption_cap == 0 {
            return bad("eval.quadrant_scenes and eval.caption_cap must be positive".into());
        }
        if self.dac.depth == 0 {
            return bad("dac.depth must be positive".into());
        }
        let n_layers = self.model.n_layers;
        let check = |what: &str, ls: &[usize]| match ls.iter().find(|&&l| l >= n_layers) {
            Some(l) => bad(format!("{what}: layer {l} out of range (model has {n_layers})")),
            None => Ok(()),
        };
        check("uac.layers", &self.uac.layers)?;
        check("eval.probe_layers", &self.eval.probe_layers)?;
        match &self.dac.layers {
            LayerSelection::Fixed(ls) if ls.is_empty() => bad("dac.layers must not be empty".into()),
            LayerSelection::Fixed(ls) => check("dac.layers", ls),
            LayerSelection::Auto if n_layers < 2 => bad("automatic layer selection needs two layers".into()),
            LayerSelection::Auto => Ok(()),
        }
    }
}

/// Sets `a.b.c=value` in a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), PipelineError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(PipelineError::Config(format!(
                    "override {key:?}: {} is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}
