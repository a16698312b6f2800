//! Micro-F1 with `no_relation` as the negative class, per-relation
//! breakdowns and ID/OOD gap summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, LabelSet};
use crate::error::{Error, Result};
use crate::model::{Inference, MarkedExample, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub gold: String,
    pub predicted: String,
    pub logits: Vec<f64>,
    pub mean_entity_variance: Option<f64>,
}

impl PredictionRecord {
    pub fn new(example_id: &str, gold: &str, inference: Inference, labels: &LabelSet) -> Self {
        Self {
            example_id: example_id.to_string(),
            gold: gold.to_string(),
            predicted: labels.name(inference.predicted).to_string(),
            logits: inference.logits,
            mean_entity_variance: inference.mean_entity_variance,
        }
    }
}

/// Runs inference over `examples` (already transformed for the method) and
/// pairs each prediction with its gold label.
pub fn predict(state: &ModelState, examples: &[Example], batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let marked: Vec<MarkedExample> = examples.iter().map(|e| state.mark(e)).collect::<Result<_>>()?;
    let inferred = state.infer(&marked, batch_size)?;
    Ok(examples
        .iter()
        .zip(inferred)
        .map(|(e, inf)| PredictionRecord::new(&e.id, &e.relation, inf, &state.labels))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_labels(records: &[PredictionRecord], labels: &LabelSet) -> Result<()> {
    for r in records {
        labels.id(&r.gold)?;
        labels.id(&r.predicted)?;
    }
    Ok(())
}

pub fn micro_counts(records: &[PredictionRecord], labels: &LabelSet) -> Result<Counts> {
    check_labels(records, labels)?;
    let neg = labels.name(labels.no_relation());
    let mut c = Counts::default();
    for r in records {
        let gold_pos = r.gold != neg;
        let pred_pos = r.predicted != neg;
        if pred_pos && r.predicted == r.gold {
            c.tp += 1;
            continue;
        }
        if pred_pos {
            c.fp += 1;
        }
        if gold_pos {
            c.fn_ += 1;
        }
    }
    Ok(c)
}

pub fn micro_f1(records: &[PredictionRecord], labels: &LabelSet) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("micro_f1 needs at least one record".into()));
    }
    Ok(micro_counts(records, labels)?.f1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: String,
    pub correct: usize,
    pub gold: usize,
    pub predicted: usize,
    pub f1: f64,
}

/// One row per gold relation, most frequent first (ties by name).
pub fn per_relation_report(records: &[PredictionRecord]) -> Vec<RelationRow> {
    let mut rows: BTreeMap<&str, RelationRow> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let row = rows.entry(&r.gold).or_insert_with(|| RelationRow {
            relation: r.gold.clone(),
            correct: 0,
            gold: 0,
            predicted: 0,
            f1: 0.0,
        });
        row.gold += 1;
        if r.gold == r.predicted {
            row.correct += 1;
        }
        *predicted.entry(&r.predicted).or_default() += 1;
    }
    let mut out: Vec<RelationRow> = rows
        .into_values()
        .map(|mut row| {
            row.predicted = predicted.get(row.relation.as_str()).copied().unwrap_or(0);
            row.f1 = f1(ratio(row.correct, row.predicted), ratio(row.correct, row.gold));
            row
        })
        .collect();
    out.sort_by(|a, b| b.gold.cmp(&a.gold).then_with(|| a.relation.cmp(&b.relation)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub micro_f1_id: f64,
    pub micro_f1_ood: f64,
    pub gap: f64,
}

pub fn gap_report(id: &[PredictionRecord], ood: &[PredictionRecord], labels: &LabelSet) -> Result<GapReport> {
    let micro_f1_id = micro_f1(id, labels)?;
    let micro_f1_ood = micro_f1(ood, labels)?;
    Ok(GapReport {
        micro_f1_id,
        micro_f1_ood,
        gap: micro_f1_id - micro_f1_ood,
    })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed scores of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub method: String,
    pub seed: u64,
    pub micro_f1_id: f64,
    pub micro_f1_ood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub id_mean: f64,
    pub id_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub gap_mean: f64,
}

/// One row per method, in order of first appearance.
pub fn summarize(scores: &[SeedScore]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for s in scores {
        if !order.contains(&s.method.as_str()) {
            order.push(&s.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let rows: Vec<&SeedScore> = scores.iter().filter(|s| s.method == m).collect();
            let id: Vec<f64> = rows.iter().map(|s| s.micro_f1_id).collect();
            let ood: Vec<f64> = rows.iter().map(|s| s.micro_f1_ood).collect();
            let gaps: Vec<f64> = rows.iter().map(|s| s.micro_f1_id - s.micro_f1_ood).collect();
            let (id_mean, id_std) = mean_std(&id);
            let (ood_mean, ood_std) = mean_std(&ood);
            MethodSummary {
                method: m.to_string(),
                seeds: rows.len(),
                id_mean,
                id_std,
                ood_mean,
                ood_std,
                gap_mean: mean_std(&gaps).0,
            }
        })
        .collect()
}

/// Fixed-width table with scores in percent.
pub fn format_summary(rows: &[MethodSummary]) -> String {
    let mut s = format!("{:<22} {:>16} {:>16} {:>8}\n", "Method", "ID", "OOD", "Gap");
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>16} {:>16} {:>8.1}\n",
            r.method,
            format!("{:.1} ± {:.1}", 100.0 * r.id_mean, 100.0 * r.id_std),
            format!("{:.1} ± {:.1}", 100.0 * r.ood_mean, 100.0 * r.ood_std),
            100.0 * r.gap_mean
        ));
    }
    s
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
