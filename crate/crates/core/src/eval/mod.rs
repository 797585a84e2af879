//! Classification metrics over 4-class confusion matrices.

pub mod stats;

use serde::{Deserialize, Serialize};

use crate::cohort::N_CLASSES;
use crate::error::{Error, Result};

pub use stats::{dunn_posthoc, kruskal_wallis, mann_whitney_u, StatResult, StatTest};

/// Rows are ground truth, columns predictions, both in PD, SD, PR, CR order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Ground-truth count `n_i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn predicted(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn per_class_recall(&self) -> [Option<f64>; N_CLASSES] {
        std::array::from_fn(|i| {
            let n = self.support(i);
            (n > 0).then(|| self.counts[i][i] as f64 / n as f64)
        })
    }

    /// Zero when nothing was predicted as class `i`.
    pub fn per_class_precision(&self) -> [f64; N_CLASSES] {
        std::array::from_fn(|i| {
            let p = self.predicted(i);
            if p == 0 {
                0.0
            } else {
                self.counts[i][i] as f64 / p as f64
            }
        })
    }
}

pub fn confusion(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= N_CLASSES || t >= N_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: pred {p}, truth {t}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Mean recall over classes present in the ground truth.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let rec: Vec<f64> = cm.per_class_recall().into_iter().flatten().collect();
    if rec.is_empty() {
        return Err(Error::InvalidArgument(
            "confusion matrix has no samples".into(),
        ));
    }
    if rec.len() < N_CLASSES {
        log::debug!(
            "balanced accuracy over {} of {N_CLASSES} classes (others absent)",
            rec.len()
        );
    }
    Ok(rec.iter().sum::<f64>() / rec.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Averaging {
    /// Per-class terms weighted by `n_i / n`.
    #[default]
    Prevalence,
    /// Per-class terms weighted by `1 / n_i`; not bounded by 1.
    Literal,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        log::warn!("precision and recall both zero; F1 set to 0");
        0.0
    }
}

/// `(recall, precision, f1)`.
pub fn recall_precision_f1(cm: &ConfusionMatrix, mode: Averaging) -> Result<(f64, f64, f64)> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "confusion matrix has no samples".into(),
        ));
    }
    let rec = cm.per_class_recall();
    let prec = cm.per_class_precision();
    let (mut r, mut p) = (0.0, 0.0);
    for i in 0..N_CLASSES {
        let ni = cm.support(i);
        let Some(ri) = rec[i] else { continue };
        if cm.predicted(i) == 0 {
            log::debug!("class {i} never predicted; precision term is 0");
        }
        let w = match mode {
            Averaging::Prevalence => ni as f64 / n as f64,
            Averaging::Literal => 1.0 / ni as f64,
        };
        r += ri * w;
        p += prec[i] * w;
    }
    Ok((r, p, f1_score(p, r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    BalancedAccuracy,
    F1,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::BalancedAccuracy,
        Metric::F1,
        Metric::Precision,
        Metric::Recall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BalancedAccuracy => "Balanced Accuracy",
            Metric::F1 => "F1-score",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix, mode: Averaging) -> Result<Self> {
        let (recall, precision, f1) = recall_precision_f1(cm, mode)?;
        Ok(Self {
            balanced_accuracy: balanced_accuracy(cm)?,
            recall,
            precision,
            f1,
        })
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::BalancedAccuracy => self.balanced_accuracy,
            Metric::F1 => self.f1,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-fold metrics and their medians.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub per_fold: Vec<Metrics>,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<Metrics>) -> Self {
        let med = |m: Metric| median(&per_fold.iter().map(|f| f.get(m)).collect::<Vec<_>>());
        Self {
            balanced_accuracy: med(Metric::BalancedAccuracy),
            recall: med(Metric::Recall),
            precision: med(Metric::Precision),
            f1: med(Metric::F1),
            per_fold,
        }
    }

    pub fn values(&self, m: Metric) -> Vec<f64> {
        self.per_fold.iter().map(|f| f.get(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_recall_example() {
        let mut c = [[0u64; 4]; 4];
        c[0][0] = 8;
        c[0][1] = 2;
        c[1][0] = 3;
        c[1][1] = 7;
        let (r, p, f) =
            recall_precision_f1(&ConfusionMatrix::from_counts(c), Averaging::Prevalence).unwrap();
        assert!((r - 0.75).abs() < 1e-15);
        let p_oracle = 0.5 * (8.0 / 11.0) + 0.5 * (7.0 / 9.0);
        assert!((p - p_oracle).abs() < 1e-15);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f1_score(0.6, 0.3) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn diagonal_and_chance() {
        let cm = confusion(&[0, 1, 2, 3, 0], &[0, 1, 2, 3, 0]).unwrap();
        let m = Metrics::from_confusion(&cm, Averaging::Prevalence).unwrap();
        assert_eq!(
            (m.balanced_accuracy, m.recall, m.precision, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let cm = confusion(&[0; 8], &[0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.25);
        assert_eq!(cm.predicted(0), 8);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0], &[0, 1]).is_err());
        assert!(confusion(&[4], &[0]).is_err());
        assert!(balanced_accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn literal_mode_weights_by_inverse_support() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        let (r, _, _) = recall_precision_f1(&cm, Averaging::Literal).unwrap();
        assert!((r - ((2.0 / 3.0) / 3.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
