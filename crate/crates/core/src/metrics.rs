//! Micro-averaged multi-label metrics and compression accounting.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::Predictor;
use crate::nn::{sigmoid, Matrix};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Rows scored per forward pass during evaluation.
const EVAL_BATCH: usize = 512;

/// Cell counts over every (sample, label) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold {threshold} outside (0, 1)")))
    }
}

/// A cell is predicted positive iff its probability exceeds `threshold`;
/// labels are positive iff nonzero.
pub fn confusion_counts(labels: &Matrix, probs: &Matrix, threshold: f64) -> Result<Confusion> {
    check_threshold(threshold)?;
    if labels.shape() != probs.shape() {
        return Err(Error::shape(format!(
            "labels {:?} vs probabilities {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.data().iter().zip(probs.data()) {
        match (y != 0.0, p > threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1; any zero denominator yields 0.
pub fn precision_recall_f1(c: &Confusion) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Raw logits of `model` on the selected samples, one row per index.
pub fn predict_logits(model: &Predictor, data: &Dataset, indices: &[usize]) -> Result<Matrix> {
    let q = model.spec().out_labels;
    let mut out = Vec::with_capacity(indices.len() * q);
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.forward(&data.batch_inputs(chunk))?;
        if logits.cols() != q {
            return Err(Error::shape("model produced an unexpected label count"));
        }
        out.extend_from_slice(logits.data());
    }
    Ok(Matrix::from_vec(indices.len(), q, out))
}

/// Confusion counts of `model` on the selected samples.
pub fn evaluate(model: &Predictor, data: &Dataset, indices: &[usize], threshold: f64) -> Result<Confusion> {
    check_threshold(threshold)?;
    if model.spec().out_labels != data.num_labels() {
        return Err(Error::shape(format!(
            "model predicts {} labels, dataset has {}",
            model.spec().out_labels,
            data.num_labels()
        )));
    }
    let mut total = Confusion::default();
    for chunk in indices.chunks(EVAL_BATCH) {
        let probs = model.forward(&data.batch_inputs(chunk))?.map(sigmoid);
        total += confusion_counts(&data.batch_labels(chunk), &probs, threshold)?;
    }
    Ok(total)
}

pub fn compression_ratio(teacher_params: usize, student_params: usize) -> Result<f64> {
    if student_params == 0 {
        return Err(Error::config("student has no parameters"));
    }
    Ok(teacher_params as f64 / student_params as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub per_family: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Per-family ratios from `(family, teacher_params, student_params)` and their arithmetic mean.
pub fn compression_summary(pairs: &[(String, usize, usize)]) -> Result<CompressionSummary> {
    if pairs.is_empty() {
        return Err(Error::config("no model families to compare"));
    }
    let mut per_family = BTreeMap::new();
    let mut sum = 0.0;
    for (name, t, s) in pairs {
        let r = compression_ratio(*t, *s)?;
        sum += r;
        per_family.insert(name.clone(), r);
    }
    Ok(CompressionSummary {
        per_family,
        mean: sum / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn hand_counted_example() {
        let c = confusion_counts(&m(1, 4, &[1.0, 0.0, 1.0, 0.0]), &m(1, 4, &[0.9, 0.8, 0.2, 0.1]), 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    #[test]
    fn two_thirds() {
        let p = precision_recall_f1(&Confusion { tp: 2, fp: 1, fn_: 1, tn: 0 });
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases_are_zero() {
        let c = confusion_counts(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3), 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 0));
        assert_eq!(precision_recall_f1(&c).f1, 0.0);
        assert_eq!(precision_recall_f1(&Confusion { tp: 0, fp: 3, fn_: 0, tn: 0 }).f1, 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let y = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = confusion_counts(&y, &m(2, 2, &[0.99, 0.01, 0.2, 0.7]), 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(precision_recall_f1(&c).f1, 1.0);
    }

    #[test]
    fn equal_precision_and_recall_give_that_f1() {
        let p = precision_recall_f1(&Confusion { tp: 3, fp: 7, fn_: 7, tn: 0 });
        assert!((p.f1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        assert!(confusion_counts(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3), 0.5).is_err());
        assert!(confusion_counts(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), 1.0).is_err());
        assert!(confusion_counts(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn compression() {
        assert_eq!(compression_ratio(10, 10).unwrap(), 1.0);
        assert!(compression_ratio(10, 0).is_err());
        let s = compression_summary(&[("a".into(), 10, 5), ("b".into(), 40, 10)]).unwrap();
        assert_eq!(s.per_family["a"], 2.0);
        assert_eq!(s.mean, 3.0);
    }
}
