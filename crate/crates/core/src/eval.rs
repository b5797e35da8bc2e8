//! Confusion matrices, accuracy and macro-averaged precision / recall / F1.

use std::fmt::Write as _;

use thiserror::Error;

use crate::NUM_CLASSES;

#[derive(Error, Debug, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions but {truths} ground-truth labels")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("class id {id} outside 0..{n_classes}")]
    ClassOutOfRange { id: usize, n_classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("malformed report: {0}")]
    Parse(String),
}

/// Square count grid; row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "confusion rows must be square");
        Self {
            n_classes: n,
            counts: rows.concat(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n_classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, k)).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n_classes);
        for i in 0..self.n_classes {
            for j in 0..self.n_classes {
                t.counts[j * self.n_classes + i] = self.get(i, j);
            }
        }
        t
    }

    /// CSV with a header row `truth,pred_0,...` and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for j in 0..self.n_classes {
            let _ = write!(out, ",pred_{j}");
        }
        out.push('\n');
        for i in 0..self.n_classes {
            let _ = write!(out, "{i}");
            for j in 0..self.n_classes {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// Six-class confusion matrix of `preds` against `truths`.
pub fn confusion_matrix(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    confusion_matrix_n(preds, truths, NUM_CLASSES)
}

pub fn confusion_matrix_n(
    preds: &[usize],
    truths: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&p, &t) in preds.iter().zip(truths) {
        for id in [p, t] {
            if id >= n_classes {
                return Err(EvalError::ClassOutOfRange { id, n_classes });
            }
        }
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsReport {
    /// One `key=value` per line.
    pub fn to_text(&self) -> String {
        format!(
            "examples={}\naccuracy={:.6}\nmacro_precision={:.6}\nmacro_recall={:.6}\nmacro_f1={:.6}\n",
            self.confusion.total(),
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1
        )
    }
}

/// Accuracy (trace / total) and macro P/R/F1 over classes present in the truth set.
/// Precision with an empty predicted column counts as 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for k in 0..cm.n_classes() {
        let support = cm.row_sum(k);
        if support == 0 {
            continue;
        }
        let tp = cm.get(k, k) as f64;
        let predicted = cm.col_sum(k);
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = tp / support as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precision.push(p);
        recall.push(r);
        f1.push(f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        confusion: cm.clone(),
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
    })
}

/// `0.7 * part1 + 0.3 * part2`.
pub fn weighted_eval(part1_score: f64, part2_score: f64) -> Result<f64, EvalError> {
    for s in [part1_score, part2_score] {
        if !(0.0..=1.0).contains(&s) {
            return Err(EvalError::ScoreOutOfRange(s));
        }
    }
    Ok(0.7 * part1_score + 0.3 * part2_score)
}

/// Parses the `key=value` lines written by [`MetricsReport::to_text`] and similar reports.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, EvalError> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| EvalError::Parse(format!("line without '=': {l}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_basics() {
        let truths = [0, 1, 2, 3, 4, 5, 5, 2];
        let cm = confusion_matrix(&truths, &truths).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(cm.get(i, j), 0);
                }
            }
        }
        assert_eq!(cm.total(), 8);
        let preds = [1, 1, 2, 0, 4, 3, 5, 2];
        let a = confusion_matrix(&preds, &truths).unwrap();
        let b = confusion_matrix(&truths, &preds).unwrap();
        assert_eq!(a.transpose(), b);
        assert_eq!(
            confusion_matrix(&[0, 1], &[0]),
            Err(EvalError::LengthMismatch { preds: 2, truths: 1 })
        );
        assert_eq!(
            confusion_matrix(&[6], &[0]),
            Err(EvalError::ClassOutOfRange { id: 6, n_classes: 6 })
        );
    }

    #[test]
    fn metric_hand_cases() {
        let perfect = confusion_matrix(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5]).unwrap();
        let m = metrics(&perfect).unwrap();
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));

        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 2]]);
        let m = metrics(&cm).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        assert!((m.macro_precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.macro_recall - 0.75).abs() < 1e-12);
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((m.macro_f1 - 0.7333).abs() < 1e-4);

        assert_eq!(metrics(&ConfusionMatrix::zeros(6)), Err(EvalError::Empty));
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never occurs in the truth set
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 1]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.macro_recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_predictions_hover_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let truths: Vec<usize> = (0..6000).map(|i| i % 6).collect();
        let preds: Vec<usize> = (0..6000).map(|_| rng.random_range(0..6)).collect();
        let acc = metrics(&confusion_matrix(&preds, &truths).unwrap()).unwrap().accuracy;
        assert!((0.14..=0.20).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn weighted_eval_values() {
        assert_eq!(weighted_eval(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(weighted_eval(0.8, 0.6).unwrap(), 0.74);
        for x in [0.0, 0.13, 0.5, 0.999] {
            assert!((weighted_eval(x, x).unwrap() - x).abs() < 1e-15);
        }
        assert!(weighted_eval(1.1, 0.5).is_err());
    }

    #[test]
    fn report_text_parses() {
        let cm = confusion_matrix(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let text = metrics(&cm).unwrap().to_text();
        let kv = parse_key_values(&text).unwrap();
        assert_eq!(kv[0], ("examples".to_string(), "3".to_string()));
        assert!(kv.iter().any(|(k, _)| k == "macro_f1"));
        assert!(cm.to_csv().starts_with("truth,pred_0,pred_1"));
    }

    proptest! {
        #[test]
        fn accuracy_matches_direct_fraction(pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..200)) {
            let (preds, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let direct = preds.iter().zip(&truths).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64;
            let m = metrics(&confusion_matrix(&preds, &truths).unwrap()).unwrap();
            prop_assert!((m.accuracy - direct).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_is_permutation_invariant(
            pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..200),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (preds, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
            let a = metrics(&confusion_matrix(&preds, &truths).unwrap()).unwrap();
            let b = metrics(&confusion_matrix(&relabel(&preds), &relabel(&truths)).unwrap()).unwrap();
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }

        #[test]
        fn weighted_eval_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, d in 0.0f64..=1.0) {
            let base = weighted_eval(a, b).unwrap();
            prop_assert!(weighted_eval((a + d).min(1.0), b).unwrap() >= base);
            prop_assert!(weighted_eval(a, (b + d).min(1.0)).unwrap() >= base);
        }
    }
}
