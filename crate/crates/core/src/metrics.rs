//! Accuracy, support-weighted F1, and multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSpace;
use crate::error::{Error, Result};

/// Instance id → label.
pub type Labeling = BTreeMap<String, String>;

fn check_ids(preds: &Labeling, gold: &Labeling) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::Metrics("no gold labels".into()));
    }
    if let Some(id) = gold.keys().find(|id| !preds.contains_key(*id)) {
        return Err(Error::Metrics(format!("no prediction for `{id}`")));
    }
    if let Some(id) = preds.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::Metrics(format!("prediction for unknown id `{id}`")));
    }
    Ok(())
}

pub fn accuracy(preds: &Labeling, gold: &Labeling) -> Result<f64> {
    check_ids(preds, gold)?;
    let hits = gold.iter().filter(|(id, g)| preds[*id] == **g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Per-class F1 weighted by gold support. A class with P + R = 0 scores 0.
pub fn weighted_f1(preds: &Labeling, gold: &Labeling, space: &LabelSpace) -> Result<f64> {
    check_ids(preds, gold)?;
    for label in gold.values().chain(preds.values()) {
        if !space.contains(label) {
            return Err(Error::Metrics(format!("label `{label}` not in label space")));
        }
    }
    let n = gold.len() as f64;
    let mut total = 0.0;
    for label in space.labels() {
        let support = gold.values().filter(|g| *g == label).count();
        if support == 0 {
            continue;
        }
        let predicted = preds.values().filter(|p| *p == label).count();
        let tp = gold
            .iter()
            .filter(|(id, g)| *g == label && preds[*id] == *label)
            .count();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = tp as f64 / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub repeat_index: u32,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub predictions: Labeling,
}

impl RunResult {
    pub fn evaluate(
        seed: u64,
        repeat_index: u32,
        preds: Labeling,
        gold: &Labeling,
        space: &LabelSpace,
    ) -> Result<Self> {
        Ok(RunResult {
            seed,
            repeat_index,
            accuracy: accuracy(&preds, gold)?,
            weighted_f1: weighted_f1(&preds, gold, space)?,
            predictions: preds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// How the spread is computed, stated in every serialized report.
    pub std_kind: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub runs: Vec<RunResult>,
}

pub const STD_KIND: &str = "population standard deviation over all runs (seeds x repeats)";

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(runs: Vec<RunResult>) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(Error::Metrics("no runs to aggregate".into()));
    }
    let (mean_acc, std_acc) = mean_std(runs.iter().map(|r| r.accuracy));
    let (mean_f1, std_f1) = mean_std(runs.iter().map(|r| r.weighted_f1));
    Ok(AggregateReport {
        std_kind: STD_KIND.to_string(),
        mean_acc,
        std_acc,
        mean_f1,
        std_f1,
        runs,
    })
}

impl AggregateReport {
    /// Plain-text table of per-run metrics followed by the summary line.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# std: {}", self.std_kind);
        let _ = writeln!(out, "{:>6} {:>6} {:>8} {:>8}", "seed", "repeat", "acc", "w-f1");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>8.2} {:>8.2}",
                r.seed,
                r.repeat_index,
                100.0 * r.accuracy,
                100.0 * r.weighted_f1
            );
        }
        let _ = writeln!(
            out,
            "runs={} acc={:.2}±{:.2} w-f1={:.2}±{:.2}",
            self.runs.len(),
            100.0 * self.mean_acc,
            100.0 * self.std_acc,
            100.0 * self.mean_f1,
            100.0 * self.std_f1
        );
        out
    }
}
