//! Bag-level F1, instance-level Recall@K, and multi-seed aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::pretrain::Method;

/// Binary F1 for the positive class.
///
/// With no positive predictions and no positive labels the score is 1.0;
/// positive predictions against all-negative labels score 0.0.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("f1 of an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Fraction of key instances found in the first `k` entries of `ranking`.
pub fn recall_at_k(ranking: &[usize], instance_labels: &[bool], k: usize) -> Result<f64> {
    if ranking.len() != instance_labels.len() {
        return Err(Error::Metric(format!(
            "ranking of {} for {} instances",
            ranking.len(),
            instance_labels.len()
        )));
    }
    if k > ranking.len() {
        return Err(Error::Metric(format!("k={k} exceeds bag size {}", ranking.len())));
    }
    let keys = instance_labels.iter().filter(|&&l| l).count();
    if keys == 0 {
        return Err(Error::Metric("recall undefined for a bag without key instances".into()));
    }
    let mut hits = 0;
    for &i in &ranking[..k] {
        let label = instance_labels
            .get(i)
            .ok_or_else(|| Error::Metric(format!("ranking index {i} out of range")))?;
        hits += *label as usize;
    }
    Ok(hits as f64 / keys as f64)
}

/// Top 40% of a bag, rounded.
pub fn default_k(bag_size: usize) -> usize {
    (0.4 * bag_size as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub witness_rate: f64,
    pub seed: u64,
    pub f1: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRecord {
    pub method: Method,
    pub witness_rate: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub k: usize,
    pub n_seeds: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// One aggregate per (method, witness rate), ordered by method then
/// descending witness rate.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<AggregateRecord>> {
    let mut groups: BTreeMap<(Method, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        // bitwise key: grouping is exact on the witness rate
        groups
            .entry((r.method, r.witness_rate.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((method, wr), rows) in groups {
        let f1: Vec<f64> = rows.iter().map(|r| r.f1).collect();
        let recall: Vec<f64> = rows.iter().map(|r| r.recall_at_k).collect();
        let (f1_mean, f1_std) = mean_std(&f1)?;
        let (recall_mean, recall_std) = mean_std(&recall)?;
        out.push(AggregateRecord {
            method,
            witness_rate: f64::from_bits(wr),
            f1_mean,
            f1_std,
            recall_mean,
            recall_std,
            k: rows[0].k,
            n_seeds: rows.len(),
        });
    }
    out.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(b.witness_rate.total_cmp(&a.witness_rate))
    });
    Ok(out)
}

pub const AGGREGATE_HEADER: &str = "method,witness_rate,f1_mean,f1_std,recall_mean,recall_std,k,n_seeds";

pub fn write_aggregate_csv<W: Write>(mut w: W, rows: &[AggregateRecord]) -> Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.method, r.witness_rate, r.f1_mean, r.f1_std, r.recall_mean, r.recall_std, r.k, r.n_seeds
        )?;
    }
    w.flush()?;
    Ok(())
}
