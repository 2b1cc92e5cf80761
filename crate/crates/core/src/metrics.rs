//! Multi-label evaluation: ranking metrics per record, threshold and AUC
//! metrics per label.
//!
//! Rankings sort probabilities in decreasing order; equal probabilities keep
//! the lower label index first.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::model::PredictionVector;
use crate::trace::LabelVector;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub y: LabelVector,
    pub y_hat: PredictionVector,
}

impl EvalRecord {
    pub fn new(y: LabelVector, y_hat: PredictionVector) -> Result<Self, MetricsError> {
        if y.len() != y_hat.len() {
            return Err(MetricsError::LengthMismatch {
                y: y.len(),
                y_hat: y_hat.len(),
            });
        }
        Ok(Self { y, y_hat })
    }

    fn check_k(&self, k: usize) -> Result<(), MetricsError> {
        if k == 0 || k > self.y.len() {
            return Err(MetricsError::BadK {
                k,
                n_labels: self.y.len(),
            });
        }
        Ok(())
    }
}

/// Label indices by decreasing probability, lowest index first on ties.
pub fn ranking(y_hat: &PredictionVector) -> Vec<usize> {
    let p = y_hat.probs();
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

/// Hits among the top `i` labels, for `i = 1..=k`.
fn cumulative_hits(record: &EvalRecord, k: usize) -> Vec<usize> {
    let mut hits = 0;
    ranking(&record.y_hat)[..k]
        .iter()
        .map(|&l| {
            hits += usize::from(record.y.is_set(l));
            hits
        })
        .collect()
}

pub fn precision_at_k(record: &EvalRecord, k: usize) -> Result<f64, MetricsError> {
    record.check_k(k)?;
    Ok(cumulative_hits(record, k)[k - 1] as f64 / k as f64)
}

/// Mean of P@1 .. P@k over the same ranking.
pub fn map_at_k(record: &EvalRecord, k: usize) -> Result<f64, MetricsError> {
    record.check_k(k)?;
    let sum: f64 = cumulative_hits(record, k)
        .iter()
        .enumerate()
        .map(|(i, &h)| h as f64 / (i + 1) as f64)
        .sum();
    Ok(sum / k as f64)
}

/// Twice the number of (positive, negative) pairs won plus ties, and the
/// pair count. `None` when a class is empty.
fn auc_counts(records: &[EvalRecord], label: usize) -> Option<(u64, u64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in records {
        let s = r.y_hat.probs()[label];
        if r.y.is_set(label) {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    neg.sort_by(f64::total_cmp);
    let mut doubled = 0u64;
    for &s in &pos {
        let below = neg.partition_point(|&n| n < s) as u64;
        let not_above = neg.partition_point(|&n| n <= s) as u64;
        doubled += 2 * below + (not_above - below);
    }
    Some((doubled, 2 * pos.len() as u64 * neg.len() as u64))
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn auc_per_label(records: &[EvalRecord], label: usize) -> Result<f64, MetricsError> {
    let (num, den) = auc_counts(records, label).ok_or(MetricsError::DegenerateLabel(label))?;
    Ok(num as f64 / den as f64)
}

/// Threshold-based precision and recall for one label. Either is `None`
/// when its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(
    records: &[EvalRecord],
    label: usize,
    theta: f64,
) -> Result<PrecisionRecall, MetricsError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(MetricsError::BadThreshold(theta));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for r in records {
        match (r.y_hat.probs()[label] >= theta, r.y.is_set(label)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_records: usize,
    pub theta: f64,
    pub p_at_k: BTreeMap<usize, f64>,
    pub map_at_k: BTreeMap<usize, f64>,
    /// Macro AUC over monitored labels with both classes present.
    pub auc_monitored: Option<f64>,
    /// AUC of the unmonitored label, when it has both classes.
    pub auc_unmonitored: Option<f64>,
    /// Macro precision over labels with at least one positive and at least
    /// one prediction above the threshold.
    pub precision: Option<f64>,
    /// Macro recall over labels with at least one positive.
    pub recall: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn evaluate(records: &[EvalRecord], ks: &[usize], theta: f64) -> Result<Report, MetricsError> {
    let first = records.first().ok_or(MetricsError::EmptyInput)?;
    if !(theta > 0.0 && theta < 1.0) {
        return Err(MetricsError::BadThreshold(theta));
    }
    let n_labels = first.y.len();
    for r in records {
        if r.y.len() != n_labels || r.y_hat.len() != n_labels {
            return Err(MetricsError::LengthMismatch {
                y: r.y.len(),
                y_hat: r.y_hat.len(),
            });
        }
    }
    let mut p_at_k = BTreeMap::new();
    let mut map = BTreeMap::new();
    for &k in ks {
        first.check_k(k)?;
        let per: Vec<(f64, f64)> = records
            .par_iter()
            .map(|r| {
                (
                    precision_at_k(r, k).expect("k checked"),
                    map_at_k(r, k).expect("k checked"),
                )
            })
            .collect();
        let n = records.len() as f64;
        p_at_k.insert(k, per.iter().map(|p| p.0).sum::<f64>() / n);
        map.insert(k, per.iter().map(|p| p.1).sum::<f64>() / n);
    }

    let unmonitored = n_labels - 1;
    let mut aucs = Vec::new();
    let mut auc_unmonitored = None;
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for label in 0..n_labels {
        if let Ok(a) = auc_per_label(records, label) {
            if label == unmonitored {
                auc_unmonitored = Some(a);
            } else {
                aucs.push(a);
            }
        }
        let pr = precision_recall(records, label, theta)?;
        if let Some(r) = pr.recall {
            recalls.push(r);
            if let Some(p) = pr.precision {
                precisions.push(p);
            }
        }
    }
    Ok(Report {
        n_records: records.len(),
        theta,
        p_at_k,
        map_at_k: map,
        auc_monitored: mean(&aucs),
        auc_unmonitored,
        precision: mean(&precisions),
        recall: mean(&recalls),
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "{:<16}{:>10}", "records", self.n_records)?;
        for (k, v) in &self.p_at_k {
            writeln!(f, "{:<16}{:>10.4}", format!("P@{k}"), v)?;
        }
        for (k, v) in &self.map_at_k {
            writeln!(f, "{:<16}{:>10.4}", format!("MAP@{k}"), v)?;
        }
        writeln!(f, "{:<16}{:>10}", "AUC monitored", opt(self.auc_monitored))?;
        writeln!(
            f,
            "{:<16}{:>10}",
            "AUC unmonitored",
            opt(self.auc_unmonitored)
        )?;
        writeln!(
            f,
            "{:<16}{:>10}",
            format!("precision@{}", self.theta),
            opt(self.precision)
        )?;
        write!(
            f,
            "{:<16}{:>10}",
            format!("recall@{}", self.theta),
            opt(self.recall)
        )
    }
}
