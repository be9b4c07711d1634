//! Hallucination metrics over the synthetic benchmarks: polling accuracy and
//! F1, caption hallucination rates and paired subtask scores.
//!
//! Every report is a pure function of a per-item log, so persisted logs can be
//! re-scored bit-exactly.

mod metrics;


pub use metrics::{
    chair_eval, gap_report, mme_report, pope_report, ChairReport, Confusion, GapReport, MmeStyleReport, MmeSubtaskScore,
    PopeMetrics, PopeReport, QuadrantAccuracy, StrategyMetrics, SynonymMap, DEFAULT_CAPTION_CAP,
};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{Decoding, HookRegistry, Model, ModelError, RecordSpec, Vocab};
use crate::synth::{Example, MmeSubtask, PopeStrategy, Quadrant};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty evaluation set: {0}")]
    Empty(String),
    #[error("invalid evaluation set: {0}")]
    Invalid(String),
    #[error("log line {line}: {detail}")]
    Log { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Produces generated tokens for an example's prompt.
pub trait Answerer: Sync {
    fn answer(&self, example: &Example, max_new: usize) -> Result<Vec<usize>, EvalError>;
}

/// Greedy decoding with optional attention hooks.
pub struct ModelAnswerer<'m, 'h> {
    pub model: &'m Model,
    pub hooks: &'h HookRegistry<'h>,
}

impl Answerer for ModelAnswerer<'_, '_> {
    fn answer(&self, example: &Example, max_new: usize) -> Result<Vec<usize>, EvalError> {
        let seq = example.to_prompt(self.model.config().patch_dim);
        let room = self.model.config().max_seq_len.saturating_sub(seq.len(self.model.n_vision()));
        let g = self
            .model
            .generate(&seq, self.hooks, Decoding::Greedy, max_new.min(room).max(1), 0, &RecordSpec::none())?;
        Ok(g.tokens)
    }
}

/// Reads the annotations: the correct answer or the full object list.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn answer(&self, example: &Example, _: usize) -> Result<Vec<usize>, EvalError> {
        let v = Vocab::new();
        Ok(match example.query.truth(&example.scene) {
            Some(true) => vec![v.yes()],
            Some(false) => vec![v.no()],
            None => example.scene.classes().into_iter().map(|c| v.object(c)).collect(),
        })
    }
}

/// Always emits the same tokens.
pub struct ConstantAnswerer(pub Vec<usize>);

impl Answerer for ConstantAnswerer {
    fn answer(&self, _: &Example, _: usize) -> Result<Vec<usize>, EvalError> {
        Ok(self.0.clone())
    }
}

/// First generated token read as yes/no, case-insensitively.
pub fn parse_answer(tokens: &[usize], v: &Vocab) -> Option<bool> {
    let word = v.word(*tokens.first()?)?.to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// One polling question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemLog {
    pub id: u64,
    /// Strategy, subtask or quadrant the item was scored under.
    pub group: String,
    /// Scene id, pairing the yes- and no-question of a scene.
    pub scene: u64,
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    pub parsed: Option<bool>,
    pub gold: bool,
}

/// One caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionLog {
    pub id: u64,
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    /// Object classes present in the scene.
    pub pool: Vec<usize>,
}

fn label<T: Serialize>(t: &T) -> String {
    match serde_json::to_value(t) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

/// Answers every item (in parallel, results kept in input order).
pub fn run_polling(answerer: &dyn Answerer, items: &[(String, &Example)]) -> Result<Vec<ItemLog>, EvalError> {
    let v = Vocab::new();
    items
        .par_iter()
        .map(|(group, ex)| {
            let gold = ex
                .label
                .ok_or_else(|| EvalError::Invalid(format!("item {} has no yes/no label", ex.id)))?;
            let generated = answerer.answer(ex, 1)?;
            Ok(ItemLog {
                id: ex.id,
                group: group.clone(),
                scene: ex.scene.id,
                prompt: ex.prompt(&v),
                parsed: parse_answer(&generated, &v),
                generated,
                gold,
            })
        })
        .collect()
}

pub fn pope_eval(
    answerer: &dyn Answerer,
    sets: &[(PopeStrategy, Vec<Example>)],
) -> Result<(PopeReport, Vec<ItemLog>), EvalError> {
    if sets.iter().all(|(_, s)| s.is_empty()) {
        return Err(EvalError::Empty("polling set".into()));
    }
    let items: Vec<(String, &Example)> = sets
        .iter()
        .flat_map(|(s, xs)| xs.iter().map(move |e| (label(s), e)))
        .collect();
    let logs = run_polling(answerer, &items)?;
    Ok((pope_report(&logs)?, logs))
}

pub fn mme_eval(answerer: &dyn Answerer, items: &[Example]) -> Result<(MmeStyleReport, Vec<ItemLog>), EvalError> {
    let tagged: Vec<(String, &Example)> = items
        .iter()
        .map(|e| {
            let sub: MmeSubtask = e
                .query
                .subtask()
                .ok_or_else(|| EvalError::Invalid(format!("item {} is not a subtask question", e.id)))?;
            Ok((label(&sub), e))
        })
        .collect::<Result<_, EvalError>>()?;
    let logs = run_polling(answerer, &tagged)?;
    Ok((mme_report(&logs)?, logs))
}

/// Accuracy per object quadrant on single-object polling sets.
pub fn gap_eval(
    answerer: &dyn Answerer,
    sets: &[(Quadrant, Vec<Example>)],
    hot: Quadrant,
) -> Result<(GapReport, Vec<ItemLog>), EvalError> {
    let items: Vec<(String, &Example)> = sets
        .iter()
        .flat_map(|(q, xs)| xs.iter().map(move |e| (label(q), e)))
        .collect();
    let logs = run_polling(answerer, &items)?;
    Ok((gap_report(&logs, &label(&hot))?, logs))
}

pub fn caption_eval(
    answerer: &dyn Answerer,
    items: &[Example],
    synonyms: &SynonymMap,
    cap: usize,
) -> Result<(ChairReport, Vec<CaptionLog>), EvalError> {
    let v = Vocab::new();
    let logs: Vec<CaptionLog> = items
        .par_iter()
        .map(|ex| {
            Ok(CaptionLog {
                id: ex.id,
                prompt: ex.prompt(&v),
                generated: answerer.answer(ex, cap)?,
                pool: ex.scene.classes(),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let captions: Vec<Vec<usize>> = logs.iter().map(|l| l.generated.clone()).collect();
    let pools: Vec<Vec<usize>> = logs.iter().map(|l| l.pool.clone()).collect();
    Ok((chair_eval(&captions, &pools, synonyms, cap), logs))
}

pub fn write_log<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Log {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}
