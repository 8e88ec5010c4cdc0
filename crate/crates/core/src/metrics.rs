//! Calibration error, accuracy, mAP@1, subset-inversion audits and the
//! per-sample gate-entropy / confidence export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{LabelMode, Labels, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusion::{confidences, FusionModel};
use crate::lattice::{subset_lattice, SubsetMask};
use crate::tensor::{argmax, softmax, Tensor};

pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// `bins + 1` equal-width edges from 0 to 1.
    pub bin_edges: Vec<f64>,
    pub bins: Vec<BinStats>,
    pub ece: f64,
    pub n: usize,
}

/// Bin `k` covers `[k/B, (k+1)/B)`; the last bin also holds 1.0.
fn bin_index(c: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut k = ((c * b).floor() as usize).min(bins - 1);
    if k > 0 && c < k as f64 / b {
        k -= 1;
    } else if k + 1 < bins && c >= (k + 1) as f64 / b {
        k += 1;
    }
    k
}

/// Expected calibration error over equal-width bins:
/// `Σ_k (n_k / n) |acc_k − conf_k|`, skipping empty bins.
pub fn ece(conf: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if conf.is_empty() {
        return Err(Error::InvalidArgument("ECE of an empty sample".into()));
    }
    if conf.len() != correct.len() {
        return Err(Error::Shape(format!("{} confidences, {} outcomes", conf.len(), correct.len())));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut sum_conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in conf.iter().zip(correct) {
        let k = bin_index(c, bins);
        count[k] += 1;
        sum_conf[k] += c;
        hits[k] += ok as usize;
    }
    let n = conf.len();
    let mut total = 0.0;
    let stats = (0..bins)
        .map(|k| {
            if count[k] == 0 {
                return BinStats {
                    count: 0,
                    mean_confidence: 0.0,
                    accuracy: 0.0,
                };
            }
            let nk = count[k] as f64;
            let s = BinStats {
                count: count[k],
                mean_confidence: sum_conf[k] / nk,
                accuracy: hits[k] as f64 / nk,
            };
            total += nk / n as f64 * (s.accuracy - s.mean_confidence).abs();
            s
        })
        .collect();
    Ok(CalibrationReport {
        bin_edges: (0..=bins).map(|k| k as f64 / bins as f64).collect(),
        bins: stats,
        ece: total.clamp(0.0, 1.0),
        n,
    })
}

/// Per-class probabilities `n × C`: softmax rows (single-label) or
/// elementwise sigmoid (multi-label) of `logits / temperature`.
pub fn class_probabilities(logits: &Tensor, mode: LabelMode, temperature: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v / temperature).collect();
        match mode {
            LabelMode::Single => data.extend(softmax(&row)?),
            LabelMode::Multi => data.extend(row.iter().map(|&v| crate::tensor::sigmoid(v))),
        }
    }
    Tensor::matrix(logits.rows(), logits.cols(), data)
}

/// Class-wise calibration error: for each class `k`, the ECE of the
/// predicted probability of `k` against the indicator that `k` is a true
/// label, averaged over classes.
pub fn classwise_ece(probs: &Tensor, labels: &Labels, bins: usize) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows, {} labels", probs.rows(), labels.len())));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for k in 0..c {
        let conf: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, k)).collect();
        let hit: Vec<bool> = (0..probs.rows()).map(|i| labels.is_hit(i, k)).collect();
        total += ece(&conf, &hit, bins)?.ece;
    }
    Ok(total / c as f64)
}

fn check_labels(logits: &Tensor, labels: &Labels) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows, {} labels", logits.rows(), labels.len())));
    }
    if let Labels::Multi(t) = labels {
        if t.cols() != logits.cols() {
            return Err(Error::Shape(format!("{} classes in labels, {} in logits", t.cols(), logits.cols())));
        }
    }
    Ok(())
}

/// Mean over predicted classes of the precision of the top-1 prediction.
/// Classes never predicted are left out of the mean.
pub fn map_at_1(logits: &Tensor, labels: &Labels) -> Result<f64> {
    check_labels(logits, labels)?;
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("mAP@1 of an empty sample".into()));
    }
    let c = logits.cols();
    let mut predicted = vec![0usize; c];
    let mut correct = vec![0usize; c];
    for i in 0..logits.rows() {
        let k = argmax(logits.row(i));
        predicted[k] += 1;
        correct[k] += labels.is_hit(i, k) as usize;
    }
    let used: Vec<f64> = (0..c)
        .filter(|&k| predicted[k] > 0)
        .map(|k| correct[k] as f64 / predicted[k] as f64)
        .collect();
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Fraction of samples whose top-1 class is a true label.
pub fn top1_accuracy(logits: &Tensor, labels: &Labels) -> Result<f64> {
    check_labels(logits, labels)?;
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let hits = (0..logits.rows())
        .filter(|&i| labels.is_hit(i, argmax(logits.row(i))))
        .count();
    Ok(hits as f64 / logits.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub a: SubsetMask,
    pub b: SubsetMask,
    /// Samples with `c^(A) > c^(B)`.
    pub inversions: usize,
    /// Mean over samples of `max(0, c^(A) − c^(B))`.
    pub mean_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionAudit {
    pub pairs: Vec<PairAudit>,
    pub n: usize,
    pub total_inversions: usize,
    /// `total_inversions / (n · pairs)`.
    pub inversion_rate: f64,
}

/// Audit from precomputed per-subset confidences.
pub fn inversion_audit_from_confidences(
    conf: &BTreeMap<SubsetMask, Vec<f64>>,
    pairs: &[(SubsetMask, SubsetMask)],
) -> Result<InversionAudit> {
    let n = conf.values().next().map_or(0, |v| v.len());
    if conf.values().any(|v| v.len() != n) {
        return Err(Error::Shape("confidence vectors differ in length".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if !a.is_strict_subset_of(b) {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) is not a strict inclusion")));
        }
        let ca = conf.get(&a).ok_or_else(|| Error::MissingSubset(a.to_string()))?;
        let cb = conf.get(&b).ok_or_else(|| Error::MissingSubset(b.to_string()))?;
        let mut inversions = 0;
        let mut violation = 0.0;
        for (x, y) in ca.iter().zip(cb) {
            if x > y {
                inversions += 1;
                violation += x - y;
            }
        }
        out.push(PairAudit {
            a,
            b,
            inversions,
            mean_violation: if n == 0 { 0.0 } else { violation / n as f64 },
        });
    }
    let total: usize = out.iter().map(|p| p.inversions).sum();
    let denom = (n * out.len()).max(1) as f64;
    Ok(InversionAudit {
        pairs: out,
        n,
        total_inversions: total,
        inversion_rate: total as f64 / denom,
    })
}

/// Confidence of every nonempty-subset predictor on `batch`.
pub fn subset_confidences(model: &FusionModel, batch: &MultimodalBatch, temperature: f64) -> Result<BTreeMap<SubsetMask, Vec<f64>>> {
    let m = model.modalities();
    let mut conf = BTreeMap::new();
    for s in SubsetMask::all_nonempty(m) {
        let out = model.predict_subset(batch, s)?;
        conf.insert(s, confidences(&out.logits, model.config.label_mode, temperature));
    }
    Ok(conf)
}

/// Confidence inversions of `model` over every strict-inclusion pair of
/// modality subsets.
pub fn inversion_audit(model: &FusionModel, batch: &MultimodalBatch) -> Result<InversionAudit> {
    let m = model.modalities();
    if m > 4 {
        return Err(Error::InvalidArgument(format!("inversion audit enumerates M <= 4, got {m}")));
    }
    let conf = subset_confidences(model, batch, 1.0)?;
    inversion_audit_from_confidences(&conf, &subset_lattice(m)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub gate_entropy: f64,
    pub confidence: f64,
}

/// One `(gate entropy, confidence)` row per sample.
pub fn entropy_confidence_export(model: &FusionModel, batch: &MultimodalBatch) -> Result<Vec<ScatterRow>> {
    let out = model.forward(batch)?;
    Ok(out
        .gate_entropy
        .iter()
        .zip(&out.confidence)
        .map(|(&gate_entropy, &confidence)| ScatterRow {
            gate_entropy,
            confidence,
        })
        .collect())
}

/// Ranks starting at 1, ties receiving their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut s = String::from("bin,lower,upper,count,mean_confidence,accuracy\n");
    for (k, b) in report.bins.iter().enumerate() {
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{}",
            report.bin_edges[k],
            report.bin_edges[k + 1],
            b.count,
            b.mean_confidence,
            b.accuracy
        );
    }
    s
}

pub fn inversions_csv(audit: &InversionAudit) -> String {
    let mut s = String::from("subset_a,subset_b,inversions,n,mean_violation\n");
    for p in &audit.pairs {
        let _ = writeln!(s, "\"{}\",\"{}\",{},{},{}", p.a, p.b, p.inversions, audit.n, p.mean_violation);
    }
    s
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut s = String::from("gate_entropy,confidence\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.gate_entropy, r.confidence);
    }
    s
}
