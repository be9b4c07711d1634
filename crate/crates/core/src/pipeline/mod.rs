//! Reproducible runs. Each stage reads its prerequisites from a run
//! directory and writes its artifacts into its own subdirectory, next to a
//! `config_resolved.json` holding the configuration, the code version and
//! the hashes of every file it read.
//!
//! ```text
//! <root>/data/      generated datasets (JSONL) and manifest.json
//! <root>/pretrain/  model.ckpt, report.json
//! <root>/probe/<arm>/  report.json, heatmap_L<l>.{csv,pgm}
//! <root>/uac/       calibration.json, report.json
//! <root>/dac/       module.ckpt, report.json
//! <root>/eval/      report.json, <arm>/<set>.jsonl
//! <root>/sweep/     report.json, <cell>/report.json
//! ```

mod config;

#[cfg(test)]
mod tests;

pub use config::{apply_override, Arm, DacSection, EvalConfig, LayerSelection, Paths, RunConfig, Seeds};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib_dac::{consecutive_pairs, dac_registry, train_dac, DacError, DacModule, DacTrainConfig, DacTrainReport};
use crate::calib_uac::{calibrate, uac_registry, CalibrationMatrix, UacError, UacHook};
use crate::evalkit::{
    caption_eval, gap_eval, mme_eval, pope_eval, write_log, ChairReport, EvalError, GapReport, MmeStyleReport,
    ModelAnswerer, PopeReport, SynonymMap,
};
use crate::model::{pretrain, HookRegistry, Model, ModelError, PretrainReport};
use crate::probe::{export_heatmap, measure_spb, HeatmapFormat, ProbeInput, SpbReport};
use crate::synth::{
    caption_items, crop_augment, mme_items, pretrain_corpus, quadrant_polling_set, read_jsonl, sample_pope_negatives,
    split_validation, write_jsonl, CorpusStats, Example, PopeStrategy, Quadrant, SynthError,
};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Uac(#[from] UacError),
    #[error(transparent)]
    Dac(#[from] DacError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

impl PipelineError {
    /// 1 for bad input (configuration or a missing prerequisite), 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Missing(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn label<T: Serialize>(t: &T) -> String {
    match serde_json::to_value(t) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    code_version: &'a str,
    config: &'a RunConfig,
    /// SHA-256 of each file read, keyed by path relative to the run root.
    inputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    /// Items per dataset file.
    pub counts: BTreeMap<String, usize>,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UacRunReport {
    pub layers: Vec<usize>,
    pub floored: bool,
    /// Probe on the estimation input with the calibration installed.
    pub residual: SpbReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DacCandidate {
    pub layers: Vec<usize>,
    /// Polling accuracy on the calibration split with the module installed.
    pub cal_accuracy: f64,
    pub steps: usize,
    pub dac_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DacRunReport {
    pub candidates: Vec<DacCandidate>,
    pub chosen: Vec<usize>,
    pub baseline_cal_accuracy: f64,
    pub train: DacTrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub pope: PopeReport,
    /// Absent when no held-out scene supports every subtask.
    pub mme: Option<MmeStyleReport>,
    pub chair: ChairReport,
    pub gap: GapReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arms: Vec<ArmReport>,
}

impl EvalReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub layers: Vec<usize>,
    pub steps: usize,
    pub final_ce: f64,
    pub final_cl: f64,
    pub cal_accuracy: f64,
    pub pope_random_accuracy: f64,
    pub pope_random_f1: f64,
    pub gap: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub layer_sets: Vec<Vec<usize>>,
    /// Cells trained with the cross-entropy term only.
    pub ce_only: Vec<SweepCell>,
    pub contrastive: Vec<SweepCell>,
}

impl SweepReport {
    /// Every (lambda, layers) combination has exactly one cell.
    pub fn is_complete(&self) -> bool {
        let cells: Vec<&SweepCell> = self.ce_only.iter().chain(&self.contrastive).collect();
        cells.len() == self.lambdas.len() * self.layer_sets.len()
            && self.lambdas.iter().all(|&l| {
                self.layer_sets
                    .iter()
                    .all(|ls| cells.iter().filter(|c| c.lambda == l && &c.layers == ls).count() == 1)
            })
    }
}

/// Hooks of one evaluation arm, kept alive while a registry borrows them.
pub enum Calibration {
    None,
    Uac(Vec<(usize, UacHook)>),
    Dac(DacModule),
}

impl Calibration {
    pub fn with_registry<R>(&self, f: impl FnOnce(&HookRegistry) -> Result<R>) -> Result<R> {
        match self {
            Calibration::None => f(&HookRegistry::new()),
            Calibration::Uac(h) => f(&uac_registry(h)?),
            Calibration::Dac(m) => {
                let hooks = m.hooks(false);
                f(&dac_registry(&hooks)?)
            }
        }
    }
}

/// Polling sets of the held-out split.
struct EvalSets {
    pope: Vec<(PopeStrategy, Vec<Example>)>,
    mme: Vec<Example>,
    captions: Vec<Example>,
    quadrants: Vec<(Quadrant, Vec<Example>)>,
}

/// A run directory plus the configuration that produced it.
pub struct Run {
    cfg: RunConfig,
    root: PathBuf,
}

impl Run {
    /// `cfg.paths.root` is replaced by `root`.
    pub fn new(mut cfg: RunConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        cfg.paths.root = root.to_path_buf();
        std::fs::create_dir_all(root)?;
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn configured(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.root.join(p),
            None => self.path(default),
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.configured(&self.cfg.paths.model, "pretrain/model.ckpt")
    }

    pub fn uac_path(&self) -> PathBuf {
        self.configured(&self.cfg.paths.uac, "uac/calibration.json")
    }

    pub fn dac_path(&self) -> PathBuf {
        self.configured(&self.cfg.paths.dac, "dac/module.ckpt")
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.path(&format!("data/{name}.jsonl"))
    }

    fn require(&self, p: PathBuf) -> Result<PathBuf> {
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Missing(p))
        }
    }

    fn out_dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.path(rel);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn write_resolved(&self, dir: &Path, command: &str, inputs: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let key = p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
            hashes.insert(key, file_hash(p)?);
        }
        let r = Resolved {
            command,
            code_version: CODE_VERSION,
            config: &self.cfg,
            inputs: hashes,
        };
        write_json(&dir.join("config_resolved.json"), &r)
    }

    fn read_data(&self, name: &str, inputs: &mut Vec<PathBuf>) -> Result<Vec<Example>> {
        let p = self.require(self.data_path(name))?;
        let items = read_jsonl(&p)?;
        inputs.push(p);
        Ok(items)
    }

    fn load_model(&self, inputs: &mut Vec<PathBuf>) -> Result<Model> {
        let p = self.require(self.model_path())?;
        let m = Model::load(&p)?;
        if m.config().grid_h != self.cfg.synth.grid_h || m.config().grid_w != self.cfg.synth.grid_w {
            return Err(PipelineError::Config(format!(
                "checkpoint {} has a {}x{} grid but synth is {}x{}",
                p.display(),
                m.config().grid_h,
                m.config().grid_w,
                self.cfg.synth.grid_h,
                self.cfg.synth.grid_w
            )));
        }
        inputs.push(p);
        Ok(m)
    }

    /// Loads the artifact an arm needs.
    pub fn calibration(&self, model: &Model, arm: Arm, inputs: &mut Vec<PathBuf>) -> Result<Calibration> {
        Ok(match arm {
            Arm::Baseline => Calibration::None,
            Arm::Uac => {
                let p = self.require(self.uac_path())?;
                let hooks = CalibrationMatrix::load(&p)?.hooks(model)?;
                inputs.push(p);
                Calibration::Uac(hooks)
            }
            Arm::Dac => {
                let p = self.require(self.dac_path())?;
                let m = DacModule::load(&p)?;
                if m.n_vision() != model.n_vision() {
                    return Err(PipelineError::Config(format!(
                        "DAC module {} expects {} vision tokens, model has {}",
                        p.display(),
                        m.n_vision(),
                        model.n_vision()
                    )));
                }
                inputs.push(p);
                Calibration::Dac(m)
            }
        })
    }

    pub fn generate(&self) -> Result<DataManifest> {
        let s = &self.cfg.synth;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seeds.data);
        let corpus = pretrain_corpus(s, s.n_pretrain, &mut rng)?;
        let splits = split_validation(s, &mut rng)?;
        let aug = crop_augment(&splits.cal, s, &mut rng)?;
        let stats = CorpusStats::from_scenes(corpus.iter().map(|e| &e.scene));
        let cal_polling = sample_pope_negatives(&splits.cal, &stats, PopeStrategy::Random, s.pope_pairs, &mut rng);
        let mut sets: Vec<(String, Vec<Example>)> = vec![
            ("pretrain".into(), corpus),
            ("aug".into(), aug.items),
            ("cal_polling".into(), cal_polling),
        ];
        for strategy in PopeStrategy::ALL {
            let items = sample_pope_negatives(&splits.eval, &stats, strategy, s.pope_pairs, &mut rng);
            sets.push((format!("pope_{}", label(&strategy)), items));
        }
        sets.push(("mme".into(), mme_items(s, &splits.eval, &mut rng)));
        sets.push(("captions".into(), caption_items(s, &splits.eval)));
        for (i, q) in Quadrant::ALL.iter().enumerate() {
            let first = 20_000_000 + i as u64 * 1_000_000;
            let items = quadrant_polling_set(s, *q, self.cfg.eval.quadrant_scenes, first, &mut rng)?;
            sets.push((format!("quadrant_{}", label(q)), items));
        }
        let dir = self.out_dir("data")?;
        let mut manifest = DataManifest {
            counts: BTreeMap::new(),
            hashes: BTreeMap::new(),
        };
        for (name, items) in &sets {
            let p = self.data_path(name);
            write_jsonl(&p, items)?;
            manifest.counts.insert(name.clone(), items.len());
            manifest.hashes.insert(name.clone(), file_hash(&p)?);
            log::info!("wrote {} ({} items)", p.display(), items.len());
        }
        write_json(&dir.join("manifest.json"), &manifest)?;
        self.write_resolved(&dir, "generate", &[])?;
        Ok(manifest)
    }

    pub fn pretrain(&self) -> Result<PretrainReport> {
        let mut inputs = Vec::new();
        let corpus = self.read_data("pretrain", &mut inputs)?;
        let patch_dim = self.cfg.model.patch_dim;
        let seqs: Vec<_> = corpus.iter().map(|e| e.to_training(patch_dim)).collect();
        let mut model = Model::init(self.cfg.model.clone(), self.cfg.seeds.init)?;
        let report = pretrain(&mut model, &seqs, &self.cfg.pretrain, |e| {
            log::info!("epoch {}: loss {:.4} ({:.4} -> {:.4})", e.epoch, e.mean_loss, e.start_loss, e.end_loss)
        })?;
        let dir = self.out_dir("pretrain")?;
        model.save(&self.model_path())?;
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "pretrain", &inputs)?;
        Ok(report)
    }

    /// Blank-input probe with the arm's calibration installed.
    pub fn probe(&self, arm: Arm) -> Result<SpbReport> {
        let mut inputs = Vec::new();
        let model = self.load_model(&mut inputs)?;
        let calib = self.calibration(&model, arm, &mut inputs)?;
        let e = &self.cfg.eval;
        let report = calib.with_registry(|reg| {
            Ok(measure_spb(
                &model,
                reg,
                &ProbeInput::Blank(e.probe_input),
                e.probe_prompt,
                &e.probe_layers,
                self.cfg.synth.hot_quadrant,
                self.cfg.seeds.sampling,
            )?)
        })?;
        let dir = self.out_dir(&format!("probe/{}", arm.name()))?;
        for l in &report.layers {
            let comments = vec![
                format!("input {}", report.input),
                format!("prompt {}", label(&report.prompt)),
                format!("arm {} layer {} kl {:.6}", arm.name(), l.layer, l.kl),
            ];
            for (fmt, ext) in [(HeatmapFormat::Csv, "csv"), (HeatmapFormat::Pgm, "pgm")] {
                let p = dir.join(format!("heatmap_L{}.{ext}", l.layer));
                export_heatmap(&l.heatmap, report.grid_h, report.grid_w, fmt, &comments, &p)?;
            }
        }
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "probe", &inputs)?;
        Ok(report)
    }

    pub fn uac(&self) -> Result<UacRunReport> {
        let mut inputs = Vec::new();
        let model = self.load_model(&mut inputs)?;
        let matrix = calibrate(&model, &self.cfg.uac)?;
        let dir = self.out_dir("uac")?;
        let p = self.uac_path();
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        matrix.save(&p)?;
        let calib = Calibration::Uac(matrix.hooks(&model)?);
        let u = &self.cfg.uac;
        let residual = calib.with_registry(|reg| {
            Ok(measure_spb(
                &model,
                reg,
                &ProbeInput::Blank(u.input),
                u.prompt,
                &matrix.layers(),
                self.cfg.synth.hot_quadrant,
                u.seed,
            )?)
        })?;
        let report = UacRunReport {
            layers: matrix.layers(),
            floored: matrix.meta.floored,
            residual,
        };
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "uac", &inputs)?;
        Ok(report)
    }

    fn train_module(
        &self,
        model: &Model,
        data: &[Example],
        layers: Vec<usize>,
        train: &DacTrainConfig,
    ) -> Result<(DacModule, DacTrainReport)> {
        let spec = self.cfg.dac.spec(layers, self.cfg.seeds.dac);
        let mut module = DacModule::new(model.n_vision(), spec)?;
        let report = train_dac(model, &mut module, data, &self.cfg.synth, train, |e| {
            log::debug!("step {}: ce {:.4} cl {:.4}", e.step, e.ce, e.cl)
        })?;
        Ok((module, report))
    }

    pub fn dac_train(&self) -> Result<DacRunReport> {
        let mut inputs = Vec::new();
        let model = self.load_model(&mut inputs)?;
        let aug = self.read_data("aug", &mut inputs)?;
        let cal = self.read_data("cal_polling", &mut inputs)?;
        let candidates = match &self.cfg.dac.layers {
            LayerSelection::Fixed(ls) => vec![ls.clone()],
            LayerSelection::Auto => consecutive_pairs(model.config().n_layers),
        };
        let baseline_cal_accuracy = cal_accuracy(&model, &Calibration::None, &cal)?;
        let mut best: Option<(f64, DacModule, DacTrainReport)> = None;
        let mut scored = Vec::new();
        for layers in candidates {
            log::info!("training DAC on layers {layers:?}");
            let (module, report) = self.train_module(&model, &aug, layers.clone(), &self.cfg.dac.train)?;
            let calib = Calibration::Dac(module);
            let acc = cal_accuracy(&model, &calib, &cal)?;
            let Calibration::Dac(module) = calib else { unreachable!() };
            log::info!("layers {layers:?}: calibration accuracy {acc:.4}");
            scored.push(DacCandidate {
                layers,
                cal_accuracy: acc,
                steps: report.steps,
                dac_hash: report.dac_hash.clone(),
            });
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, module, report));
            }
        }
        let (_, module, train) = best.expect("at least one candidate");
        let dir = self.out_dir("dac")?;
        let p = self.dac_path();
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        module.save(&p)?;
        let report = DacRunReport {
            candidates: scored,
            chosen: module.spec().layers.clone(),
            baseline_cal_accuracy,
            train,
        };
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "dac-train", &inputs)?;
        Ok(report)
    }

    fn eval_sets(&self, inputs: &mut Vec<PathBuf>) -> Result<EvalSets> {
        let pope = PopeStrategy::ALL
            .iter()
            .map(|s| Ok((*s, self.read_data(&format!("pope_{}", label(s)), inputs)?)))
            .collect::<Result<_>>()?;
        let quadrants = Quadrant::ALL
            .iter()
            .map(|q| Ok((*q, self.read_data(&format!("quadrant_{}", label(q)), inputs)?)))
            .collect::<Result<_>>()?;
        Ok(EvalSets {
            pope,
            mme: self.read_data("mme", inputs)?,
            captions: self.read_data("captions", inputs)?,
            quadrants,
        })
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let mut inputs = Vec::new();
        let model = self.load_model(&mut inputs)?;
        let sets = self.eval_sets(&mut inputs)?;
        let calibs = self
            .cfg
            .eval
            .arms
            .iter()
            .map(|&a| Ok((a, self.calibration(&model, a, &mut inputs)?)))
            .collect::<Result<Vec<_>>>()?;
        let synonyms = SynonymMap::from_vocab(model.vocab());
        let cap = self.cfg.eval.caption_cap;
        let hot = self.cfg.synth.hot_quadrant;
        let mut arms = Vec::new();
        for (arm, calib) in &calibs {
            log::info!("evaluating arm {}", arm.name());
            let dir = self.out_dir(&format!("eval/{}", arm.name()))?;
            let report = calib.with_registry(|reg| {
                let answerer = ModelAnswerer { model: &model, hooks: reg };
                let (pope, pope_logs) = pope_eval(&answerer, &sets.pope)?;
                write_log(&dir.join("pope.jsonl"), &pope_logs)?;
                let mme = if sets.mme.is_empty() {
                    log::warn!("no held-out scene supports every subtask; skipping the subtask scores");
                    None
                } else {
                    let (r, logs) = mme_eval(&answerer, &sets.mme)?;
                    write_log(&dir.join("mme.jsonl"), &logs)?;
                    Some(r)
                };
                let (chair, cap_logs) = caption_eval(&answerer, &sets.captions, &synonyms, cap)?;
                write_log(&dir.join("captions.jsonl"), &cap_logs)?;
                let (gap, gap_logs) = gap_eval(&answerer, &sets.quadrants, hot)?;
                write_log(&dir.join("quadrants.jsonl"), &gap_logs)?;
                Ok(ArmReport {
                    arm: *arm,
                    pope,
                    mme,
                    chair,
                    gap,
                })
            })?;
            arms.push(report);
        }
        let report = EvalReport { arms };
        let dir = self.out_dir("eval")?;
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "eval", &inputs)?;
        Ok(report)
    }

    /// One DAC per (lambda, layers) cell, scored on the calibration split,
    /// the random polling set and the quadrant sets.
    pub fn sweep(&self, lambdas: &[f64], layer_sets: &[Vec<usize>]) -> Result<SweepReport> {
        if lambdas.is_empty() || layer_sets.is_empty() {
            return Err(PipelineError::Config("sweep needs at least one lambda and one layer set".into()));
        }
        let n_layers = self.cfg.model.n_layers;
        if let Some(ls) = layer_sets.iter().find(|ls| ls.is_empty() || ls.iter().any(|&l| l >= n_layers)) {
            return Err(PipelineError::Config(format!("sweep layer set {ls:?} is invalid")));
        }
        let mut inputs = Vec::new();
        let model = self.load_model(&mut inputs)?;
        let aug = self.read_data("aug", &mut inputs)?;
        let cal = self.read_data("cal_polling", &mut inputs)?;
        let sets = self.eval_sets(&mut inputs)?;
        let random = &sets.pope[..1];
        let hot = self.cfg.synth.hot_quadrant;
        let mut report = SweepReport {
            lambdas: lambdas.to_vec(),
            layer_sets: layer_sets.to_vec(),
            ce_only: Vec::new(),
            contrastive: Vec::new(),
        };
        for &lambda in lambdas {
            let train = DacTrainConfig {
                lambda,
                ..self.cfg.dac.train.clone()
            };
            train.validate()?;
            for layers in layer_sets {
                log::info!("sweep cell lambda {lambda} layers {layers:?}");
                let (module, tr) = self.train_module(&model, &aug, layers.clone(), &train)?;
                let calib = Calibration::Dac(module);
                let cal_acc = cal_accuracy(&model, &calib, &cal)?;
                let (pope, gap) = calib.with_registry(|reg| {
                    let answerer = ModelAnswerer { model: &model, hooks: reg };
                    let (pope, _) = pope_eval(&answerer, random)?;
                    let (gap, _) = gap_eval(&answerer, &sets.quadrants, hot)?;
                    Ok((pope, gap))
                })?;
                let m = &pope.strategies[0].metrics;
                let last = tr.log.last();
                let cell = SweepCell {
                    lambda,
                    layers: layers.clone(),
                    steps: tr.steps,
                    final_ce: last.map_or(f64::NAN, |e| e.ce),
                    final_cl: last.map_or(f64::NAN, |e| e.cl),
                    cal_accuracy: cal_acc,
                    pope_random_accuracy: m.accuracy,
                    pope_random_f1: m.f1,
                    gap: gap.gap,
                    overall: gap.overall,
                };
                let name = format!(
                    "lambda_{lambda}_layers_{}",
                    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
                );
                let dir = self.out_dir(&format!("sweep/{name}"))?;
                write_json(&dir.join("report.json"), &cell)?;
                if lambda == 0.0 {
                    report.ce_only.push(cell);
                } else {
                    report.contrastive.push(cell);
                }
            }
        }
        let dir = self.out_dir("sweep")?;
        write_json(&dir.join("report.json"), &report)?;
        self.write_resolved(&dir, "sweep", &inputs)?;
        Ok(report)
    }
}

/// Share of calibration polling items answered correctly.
fn cal_accuracy(model: &Model, calib: &Calibration, items: &[Example]) -> Result<f64> {
    if items.is_empty() {
        return Err(PipelineError::Eval(EvalError::Empty("calibration polling set".into())));
    }
    calib.with_registry(|reg| {
        let answerer = ModelAnswerer { model, hooks: reg };
        let (report, logs) = pope_eval(&answerer, &[(PopeStrategy::Random, items.to_vec())])?;
        debug_assert_eq!(report.strategies.len(), 1);
        Ok(logs.iter().filter(|l| l.parsed == Some(l.gold)).count() as f64 / logs.len() as f64)
    })
}
