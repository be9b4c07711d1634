use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{EvalError, ItemLog};
use crate::model::Vocab;

/// Default cap on caption tokens considered.
pub const DEFAULT_CAPTION_CAP: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Answers that were neither yes nor no. Already counted as FN (gold yes)
    /// or FP (gold no).
    pub unparsed: u64,
}

impl Confusion {
    pub fn record(&mut self, gold: bool, parsed: Option<bool>) {
        match (gold, parsed) {
            (true, Some(true)) => self.tp += 1,
            (false, Some(false)) => self.tn += 1,
            (true, Some(false)) => self.fn_ += 1,
            (false, Some(true)) => self.fp += 1,
            (true, None) => {
                self.fn_ += 1;
                self.unparsed += 1;
            }
            (false, None) => {
                self.fp += 1;
                self.unparsed += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of items answered "yes".
    pub yes_ratio: f64,
    pub counts: Confusion,
}

impl PopeMetrics {
    /// `yes` is the number of items answered "yes".
    pub fn from_confusion(c: Confusion, yes: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            yes_ratio: ratio(yes, c.total()),
            counts: c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    pub metrics: PopeMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub strategies: Vec<StrategyMetrics>,
}

impl PopeReport {
    pub fn get(&self, strategy: &str) -> Option<&PopeMetrics> {
        self.strategies.iter().find(|s| s.strategy == strategy).map(|s| &s.metrics)
    }
}

/// Groups in order of first appearance.
fn grouped(logs: &[ItemLog]) -> Vec<(&str, Vec<&ItemLog>)> {
    let mut out: Vec<(&str, Vec<&ItemLog>)> = Vec::new();
    for l in logs {
        match out.iter_mut().find(|(g, _)| *g == l.group) {
            Some((_, v)) => v.push(l),
            None => out.push((&l.group, vec![l])),
        }
    }
    out
}

pub fn pope_report(logs: &[ItemLog]) -> Result<PopeReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::Empty("polling log".into()));
    }
    let strategies = grouped(logs)
        .into_iter()
        .map(|(g, items)| {
            let mut c = Confusion::default();
            let mut yes = 0u64;
            for it in &items {
                c.record(it.gold, it.parsed);
                yes += u64::from(it.parsed == Some(true));
            }
            StrategyMetrics {
                strategy: g.to_string(),
                metrics: PopeMetrics::from_confusion(c, yes),
            }
        })
        .collect();
    Ok(PopeReport { strategies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmeSubtaskScore {
    pub subtask: String,
    pub questions: usize,
    pub pairs: usize,
    /// Percent of questions answered correctly.
    pub accuracy: f64,
    /// Percent of scenes with both questions correct.
    pub paired_accuracy: f64,
    /// `accuracy + paired_accuracy`, in `[0, 200]`.
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmeStyleReport {
    pub subtasks: Vec<MmeSubtaskScore>,
    /// Sum of the combined scores.
    pub total: f64,
}

impl MmeStyleReport {
    pub fn get(&self, subtask: &str) -> Option<&MmeSubtaskScore> {
        self.subtasks.iter().find(|s| s.subtask == subtask)
    }
}

/// Each scene must contribute exactly one gold-yes and one gold-no question
/// per subtask.
pub fn mme_report(logs: &[ItemLog]) -> Result<MmeStyleReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::Empty("subtask log".into()));
    }
    let mut subtasks = Vec::new();
    for (g, items) in grouped(logs) {
        let mut pairs: BTreeMap<u64, Vec<&ItemLog>> = BTreeMap::new();
        for it in &items {
            pairs.entry(it.scene).or_default().push(it);
        }
        let mut both = 0usize;
        for (scene, p) in &pairs {
            if p.len() != 2 || p[0].gold == p[1].gold {
                return Err(EvalError::Invalid(format!(
                    "subtask {g}, scene {scene}: expected one yes- and one no-question, found {} items",
                    p.len()
                )));
            }
            both += usize::from(p.iter().all(|it| it.parsed == Some(it.gold)));
        }
        let correct = items.iter().filter(|it| it.parsed == Some(it.gold)).count();
        let accuracy = 100.0 * correct as f64 / items.len() as f64;
        let paired_accuracy = 100.0 * both as f64 / pairs.len() as f64;
        subtasks.push(MmeSubtaskScore {
            subtask: g.to_string(),
            questions: items.len(),
            pairs: pairs.len(),
            accuracy,
            paired_accuracy,
            combined: accuracy + paired_accuracy,
        });
    }
    let total = subtasks.iter().map(|s| s.combined).sum();
    Ok(MmeStyleReport { subtasks, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantAccuracy {
    pub quadrant: String,
    pub items: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub hot: String,
    pub quadrants: Vec<QuadrantAccuracy>,
    pub hot_accuracy: f64,
    /// Mean accuracy over the other quadrants.
    pub cold_accuracy: f64,
    /// `hot_accuracy - cold_accuracy`.
    pub gap: f64,
    /// Accuracy over all items.
    pub overall: f64,
}

pub fn gap_report(logs: &[ItemLog], hot: &str) -> Result<GapReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::Empty("quadrant log".into()));
    }
    let quadrants: Vec<QuadrantAccuracy> = grouped(logs)
        .into_iter()
        .map(|(g, items)| QuadrantAccuracy {
            quadrant: g.to_string(),
            items: items.len(),
            accuracy: items.iter().filter(|it| it.parsed == Some(it.gold)).count() as f64 / items.len() as f64,
        })
        .collect();
    let hot_accuracy = quadrants
        .iter()
        .find(|q| q.quadrant == hot)
        .ok_or_else(|| EvalError::Invalid(format!("no items for hot quadrant {hot}")))?
        .accuracy;
    let cold: Vec<f64> = quadrants.iter().filter(|q| q.quadrant != hot).map(|q| q.accuracy).collect();
    if cold.is_empty() {
        return Err(EvalError::Invalid("no cold-quadrant items".into()));
    }
    let cold_accuracy = cold.iter().sum::<f64>() / cold.len() as f64;
    let overall = logs.iter().filter(|it| it.parsed == Some(it.gold)).count() as f64 / logs.len() as f64;
    Ok(GapReport {
        hot: hot.to_string(),
        quadrants,
        hot_accuracy,
        cold_accuracy,
        gap: hot_accuracy - cold_accuracy,
        overall,
    })
}

/// Maps caption tokens to object classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymMap {
    map: HashMap<usize, usize>,
}

impl SynonymMap {
    /// Every object word maps to its own class.
    pub fn from_vocab(v: &Vocab) -> Self {
        let map = (0..v.len()).filter_map(|t| v.object_of(t).map(|c| (t, c))).collect();
        Self { map }
    }

    pub fn with(mut self, token: usize, class: usize) -> Self {
        self.map.insert(token, class);
        self
    }

    pub fn class_of(&self, token: usize) -> Option<usize> {
        self.map.get(&token).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub captions: usize,
    pub hallucinated_captions: usize,
    /// Distinct objects mentioned, summed over captions.
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    /// Hallucinated mentions over all mentions.
    pub per_object_rate: f64,
    /// Captions with a hallucinated mention over all captions.
    pub per_caption_rate: f64,
    /// Set when the rate's denominator was zero (the rate is then 0).
    pub object_rate_undefined: bool,
    pub caption_rate_undefined: bool,
    pub cap: usize,
}

/// Mentions are distinct classes per caption, after mapping tokens through
/// `synonyms`; only the first `cap` tokens are read.
pub fn chair_eval(captions: &[Vec<usize>], pools: &[Vec<usize>], synonyms: &SynonymMap, cap: usize) -> ChairReport {
    assert_eq!(captions.len(), pools.len(), "one ground-truth pool per caption");
    let mut mentions = 0usize;
    let mut bad_mentions = 0usize;
    let mut bad_captions = 0usize;
    for (cap_tokens, pool) in captions.iter().zip(pools) {
        let objs: BTreeSet<usize> = cap_tokens.iter().take(cap).filter_map(|&t| synonyms.class_of(t)).collect();
        let bad = objs.iter().filter(|c| !pool.contains(c)).count();
        mentions += objs.len();
        bad_mentions += bad;
        bad_captions += usize::from(bad > 0);
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ChairReport {
        captions: captions.len(),
        hallucinated_captions: bad_captions,
        mentions,
        hallucinated_mentions: bad_mentions,
        per_object_rate: rate(bad_mentions, mentions),
        per_caption_rate: rate(bad_captions, captions.len()),
        object_rate_undefined: mentions == 0,
        caption_rate_undefined: captions.is_empty(),
        cap,
    }
}
