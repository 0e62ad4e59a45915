use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};

/// Mann-Whitney AUC with ties counted one half, via mid-ranks.
/// `None` when either side is empty.
pub fn auc_mann_whitney(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    let (np, nn) = (positives.len(), negatives.len());
    if np == 0 || nn == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share a mid-rank of (i + 1 + j) / 2.
        let pos_in_group = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank2_sum += pos_in_group * (i + 1 + j) as u128;
        i = j;
    }
    let (np128, nn128) = (np as u128, nn as u128);
    let u2 = rank2_sum - np128 * (np128 + 1);
    Some(u2 as f64 / (2 * np128 * nn128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Threshold at each point (infinity for the origin).
    pub thresholds: Vec<f64>,
    pub auc: Option<f64>,
}

/// Points at every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], is_positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != is_positive.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let np = is_positive.iter().filter(|p| **p).count();
    let nn = scores.len() - np;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        fpr: vec![0.0],
        tpr: vec![0.0],
        thresholds: vec![f64::INFINITY],
        auc: None,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if is_positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.fpr.push(if nn == 0 { 0.0 } else { fp as f64 / nn as f64 });
        curve.tpr.push(if np == 0 { 0.0 } else { tp as f64 / np as f64 });
        curve.thresholds.push(s);
    }
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| is_positive[i]).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| !is_positive[i]).map(|i| scores[i]).collect();
    curve.auc = auc_mann_whitney(&pos, &neg);
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub per_class: Vec<RocCurve>,
    pub micro: RocCurve,
}

impl RocReport {
    pub fn class_aucs(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| self.per_class.get(c).and_then(|r| r.auc))
    }

    pub fn macro_auc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().filter_map(|r| r.auc).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// One-vs-rest curves per class plus the micro-average curve over all
/// pooled (score, is-positive) pairs.
pub fn roc_auc_ovr(scores: &Array2<f64>, labels: &[usize]) -> Result<RocReport> {
    let n = labels.len();
    if scores.dim() != (n, NUM_CLASSES) {
        return Err(Error::Shape(format!(
            "scores {:?} do not match {n} labels x {NUM_CLASSES}",
            scores.shape()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("scores", "ROC needs at least two samples"));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid("labels", format!("class index {l} out of range")));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut pooled_scores = Vec::with_capacity(n * NUM_CLASSES);
    let mut pooled_pos = Vec::with_capacity(n * NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let col: Vec<f64> = scores.column(c).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        pooled_scores.extend_from_slice(&col);
        pooled_pos.extend_from_slice(&pos);
        per_class.push(roc_curve(&col, &pos)?);
    }
    Ok(RocReport {
        per_class,
        micro: roc_curve(&pooled_scores, &pooled_pos)?,
    })
}
