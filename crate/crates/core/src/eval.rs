//! Span-level precision, recall and F1 over typed entities. Non-entity
//! tokens never enter the counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SlotSpan, Utterance};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SlotModel};
use crate::parallel::map_chunks;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlotScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SlotScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    /// Pooled over all slots; the headline number.
    pub micro: SlotScore,
    /// Unweighted mean of per-slot F1 over slots seen in gold or predictions.
    pub macro_f1: f64,
    pub per_slot: BTreeMap<String, SlotScore>,
    pub utterances: usize,
}

/// A predicted span is correct iff start, end and type all match a gold span.
pub fn span_f1(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<SpanScores> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold utterances but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&SlotSpan> = g.iter().collect();
        let p: BTreeSet<&SlotSpan> = p.iter().collect();
        for s in &p {
            let c = counts.entry(s.slot.clone()).or_default();
            if g.contains(s) {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        for s in g.difference(&p) {
            counts.entry(s.slot.clone()).or_default().2 += 1;
        }
    }
    let per_slot: BTreeMap<String, SlotScore> = counts
        .iter()
        .map(|(k, &(tp, fp, fn_))| (k.clone(), SlotScore::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let macro_f1 = if per_slot.is_empty() {
        0.0
    } else {
        per_slot.values().map(|s| s.f1).sum::<f64>() / per_slot.len() as f64
    };
    Ok(SpanScores {
        micro: SlotScore::from_counts(tp, fp, fn_),
        macro_f1,
        per_slot,
        utterances: gold.len(),
    })
}

/// Predictions for every utterance, in order.
pub fn predict_all<T: Real>(
    model: &SlotModel<T>,
    utterances: &[Utterance],
    parallel: bool,
) -> Result<Vec<Vec<SlotSpan>>> {
    let chunks = map_chunks(utterances, 8, parallel, |chunk| {
        chunk
            .iter()
            .map(|u| model.predict(u))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(utterances.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &SlotModel<T>,
    utterances: &[Utterance],
    parallel: bool,
) -> Result<SpanScores> {
    let pred = predict_all(model, utterances, parallel)?;
    let gold: Vec<Vec<SlotSpan>> = utterances.iter().map(|u| u.spans.clone()).collect();
    span_f1(&gold, &pred)
}

/// Everything needed to trace a reported number back to its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub dataset: Option<DatasetManifest>,
    pub checkpoint: Option<String>,
}

impl RunManifest {
    pub fn new(
        config: &ModelConfig,
        dataset: Option<DatasetManifest>,
        checkpoint: Option<String>,
    ) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            seed: config.seed,
            dataset,
            checkpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest: RunManifest,
    pub scores: SpanScores,
}

/// Aligned per-slot table followed by micro and macro rows.
pub fn format_table(scores: &SpanScores) -> String {
    let width = scores
        .per_slot
        .keys()
        .map(|k| k.chars().count())
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>5}  {:>5}  {:>9}  {:>6}  {:>5}",
        "slot", "tp", "fp", "fn", "precision", "recall", "f1"
    );
    let mut row = |name: &str, s: &SlotScore| {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>5}  {:>5}  {:>9.3}  {:>6.3}  {:>5.3}",
            name, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
        );
    };
    for (name, s) in &scores.per_slot {
        row(name, s);
    }
    row("micro", &scores.micro);
    let _ = writeln!(out, "{:<width$}  {:>44.3}", "macro", scores.macro_f1);
    out
}
