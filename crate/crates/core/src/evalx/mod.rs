//! Confusion matrix, per-class and averaged metrics, ROC/AUC and report files.

pub mod metrics;
pub mod report;
pub mod roc;

use ndarray::Array2;

pub use metrics::{
    aggregate, confusion_matrix, f1_score, macro_average, per_class_metrics, weighted_average, AggregateMetrics,
    AveragedMetrics, ClassMetric, ClassMetrics, ConfusionMatrix, MetricsReport,
};
pub use report::{emit_report, read_metrics_json, write_metrics_json, ReportFiles};
pub use roc::{auc_mann_whitney, roc_auc_ovr, roc_curve, RocCurve, RocReport};

use crate::error::Result;
use crate::train::argmax_rows;

/// Everything derived from one set of scored predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub per_class: ClassMetrics,
    pub aggregate: AggregateMetrics,
    pub roc: Option<RocReport>,
}

impl Evaluation {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::new(&self.per_class, &self.aggregate)
    }
}

/// Scores are `N x 7` class probabilities; predictions are their argmax.
pub fn evaluate_scores(scores: &Array2<f64>, labels: &[usize]) -> Result<Evaluation> {
    let preds = argmax_rows(scores);
    let confusion = confusion_matrix(&preds, labels)?;
    let roc = if labels.len() >= 2 {
        Some(roc_auc_ovr(scores, labels)?)
    } else {
        None
    };
    let aucs = roc.as_ref().map(|r| r.class_aucs());
    let per_class = per_class_metrics(&confusion, aucs.as_ref());
    let aggregate = aggregate(&per_class, &confusion, roc.as_ref().and_then(|r| r.micro.auc))?;
    Ok(Evaluation {
        confusion,
        per_class,
        aggregate,
        roc,
    })
}
