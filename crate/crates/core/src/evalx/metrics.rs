use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{LesionClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(Error::invalid("labels", format!("class index out of range in pair ({t}, {p})")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Same as recall: the fraction of this class's samples classified right.
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub support: u64,
}

impl ClassMetric {
    /// Fills in F1 and accuracy from precision and recall.
    pub fn from_pr(precision: f64, recall: f64, auc: Option<f64>, support: u64) -> Self {
        ClassMetric {
            precision,
            recall,
            f1: f1_score(precision, recall),
            accuracy: recall,
            auc,
            support,
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub type ClassMetrics = [ClassMetric; NUM_CLASSES];

pub fn per_class_metrics(cm: &ConfusionMatrix, aucs: Option<&[Option<f64>; NUM_CLASSES]>) -> ClassMetrics {
    std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        ClassMetric::from_pr(
            ratio(tp, cm.predicted(c)),
            ratio(tp, cm.support(c)),
            aucs.and_then(|a| a[c]),
            cm.support(c),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Averaged over classes with a defined AUC.
    pub auc: Option<f64>,
}

fn average(per_class: &ClassMetrics, weight: impl Fn(&ClassMetric) -> f64) -> AveragedMetrics {
    let total: f64 = per_class.iter().map(&weight).sum();
    let mean = |f: &dyn Fn(&ClassMetric) -> f64| -> f64 {
        if total == 0.0 {
            0.0
        } else {
            per_class.iter().map(|m| weight(m) * f(m)).sum::<f64>() / total
        }
    };
    let defined: Vec<&ClassMetric> = per_class.iter().filter(|m| m.auc.is_some()).collect();
    let auc_total: f64 = defined.iter().map(|m| weight(m)).sum();
    let auc = (auc_total > 0.0)
        .then(|| defined.iter().map(|m| weight(m) * m.auc.unwrap_or(0.0)).sum::<f64>() / auc_total);
    AveragedMetrics {
        precision: mean(&|m| m.precision),
        recall: mean(&|m| m.recall),
        f1: mean(&|m| m.f1),
        accuracy: mean(&|m| m.accuracy),
        auc,
    }
}

pub fn macro_average(per_class: &ClassMetrics) -> AveragedMetrics {
    average(per_class, |_| 1.0)
}

pub fn weighted_average(per_class: &ClassMetrics) -> AveragedMetrics {
    average(per_class, |m| m.support as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    #[serde(rename = "macro")]
    pub macro_avg: AveragedMetrics,
    pub weighted: AveragedMetrics,
    pub overall_accuracy: f64,
    pub micro_auc: Option<f64>,
}

pub fn aggregate(per_class: &ClassMetrics, cm: &ConfusionMatrix, micro_auc: Option<f64>) -> Result<AggregateMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion_matrix", "no evaluated samples"));
    }
    Ok(AggregateMetrics {
        macro_avg: macro_average(per_class),
        weighted: weighted_average(per_class),
        overall_accuracy: cm.trace() as f64 / total as f64,
        micro_auc,
    })
}

/// The `metrics.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetric>,
    #[serde(rename = "macro")]
    pub macro_avg: AveragedMetrics,
    pub weighted: AveragedMetrics,
    pub overall_accuracy: f64,
    pub micro_auc: Option<f64>,
}

impl MetricsReport {
    pub fn new(per_class: &ClassMetrics, agg: &AggregateMetrics) -> Self {
        MetricsReport {
            per_class: LesionClass::ALL
                .iter()
                .map(|c| (c.code().to_string(), per_class[c.index()]))
                .collect(),
            macro_avg: agg.macro_avg,
            weighted: agg.weighted,
            overall_accuracy: agg.overall_accuracy,
            micro_auc: agg.micro_auc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_sample_matrix() {
        let cm = confusion_matrix(&[1, 1, 0], &[0, 1, 0]).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[1][1], 1);
        assert_eq!(cm.total(), 3);
        assert!(confusion_matrix(&[0], &[]).is_err());
        assert!(confusion_matrix(&[7], &[0]).is_err());
        assert_eq!(confusion_matrix(&[], &[]).unwrap().total(), 0);
    }

    #[test]
    fn df_row_from_counts() {
        // 14 hits, 3 misses, never predicted for another class.
        let mut cm = ConfusionMatrix::default();
        cm.counts[3][3] = 14;
        cm.counts[3][5] = 3;
        cm.counts[5][5] = 20;
        let m = per_class_metrics(&cm, None)[3];
        assert_eq!(m.precision, 1.0);
        assert!((m.recall - 0.8235).abs() < 1e-4);
        assert!((m.f1 - 0.9032).abs() < 1e-4);
        assert_eq!(m.accuracy, m.recall);
    }

    #[test]
    fn perfect_predictor_and_degenerate_class() {
        let labels = [0, 1, 2, 3, 4, 5, 5];
        let cm = confusion_matrix(&labels, &labels).unwrap();
        let m = per_class_metrics(&cm, None);
        for c in 0..6 {
            assert_eq!((m[c].precision, m[c].recall, m[c].f1), (1.0, 1.0, 1.0));
        }
        assert_eq!((m[6].precision, m[6].recall, m[6].f1), (0.0, 0.0, 0.0));
        let agg = aggregate(&m, &cm, None).unwrap();
        assert_eq!(agg.overall_accuracy, 1.0);
        assert!(aggregate(&m, &ConfusionMatrix::default(), None).is_err());
    }

    #[test]
    fn weighted_recall_is_overall_accuracy() {
        let preds = [0, 1, 1, 2, 3, 3, 4, 5, 6, 0, 2, 2];
        let labels = [0, 1, 2, 2, 3, 1, 4, 5, 6, 6, 2, 0];
        let cm = confusion_matrix(&preds, &labels).unwrap();
        let agg = aggregate(&per_class_metrics(&cm, None), &cm, None).unwrap();
        assert!((agg.weighted.recall - agg.overall_accuracy).abs() < 1e-15);
    }

    #[test]
    fn equal_f1_everywhere() {
        let one = ClassMetric::from_pr(0.6, 0.9, Some(0.8), 3);
        let mut m = [one; NUM_CLASSES];
        m[2].support = 40;
        assert!((macro_average(&m).f1 - one.f1).abs() < 1e-15);
        assert!((weighted_average(&m).f1 - one.f1).abs() < 1e-15);
    }
}
