//! Confusion matrices and the WA / UA / WF1 summary.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fusion::{EMOTION_NAMES, NUM_EMOTIONS};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn emotions() -> Self {
        Self::new(NUM_EMOTIONS)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for (what, v) in [("true", truth), ("predicted", pred)] {
            if v >= self.classes {
                return Err(Error::Input(format!(
                    "{what} label {v} outside [0, {})",
                    self.classes
                )));
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }
}

/// Builds a 4-class emotion confusion matrix.
pub fn confusion_from_pairs(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    confusion_with_classes(truth, pred, NUM_EMOTIONS)
}

/// Same as [`confusion_from_pairs`] for an arbitrary class count (symbol probes use 12).
pub fn confusion_with_classes(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub wa: f64,
    pub ua: f64,
    pub wf1: f64,
    pub per_class: Vec<ClassStats>,
    pub confusion: ConfusionMatrix,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassStats> = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let support = cm.row_sum(c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let supported: Vec<&ClassStats> = per_class.iter().filter(|c| c.support > 0).collect();
    let ua = supported.iter().map(|c| c.recall).sum::<f64>() / supported.len() as f64;
    let wf1 = per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / total as f64;
    Ok(EvalReport {
        wa: ratio(cm.trace(), total),
        ua,
        wf1,
        per_class,
        confusion: cm.clone(),
    })
}

impl EvalReport {
    /// `run_id,seed,wa,ua,wf1,recall_<class>...`
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("run_id,seed,wa,ua,wf1");
        for c in 0..classes {
            match EMOTION_NAMES.get(c).filter(|_| classes == NUM_EMOTIONS) {
                Some(name) => write!(h, ",recall_{name}").unwrap(),
                None => write!(h, ",recall_{c}").unwrap(),
            }
        }
        h
    }

    pub fn csv_row(&self, run_id: &str, seed: u64) -> String {
        let mut row = format!("{run_id},{seed},{:.6},{:.6},{:.6}", self.wa, self.ua, self.wf1);
        for c in &self.per_class {
            write!(row, ",{:.6}", c.recall).unwrap();
        }
        row
    }
}
