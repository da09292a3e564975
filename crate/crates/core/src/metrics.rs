//! Classification metrics: accuracy, macro precision/recall/F1, macro
//! one-vs-rest ROC AUC, and entrywise MAE/RMSE of probability vectors
//! against one-hot targets.
//!
//! Conventions:
//! * a 0/0 precision or recall is 0, and the class still counts in the macro mean;
//! * predicted class is the argmax with ties going to the lowest index;
//! * AUC ties contribute 1/2; classes lacking positives or negatives are
//!   skipped in the macro mean.

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelConfig, ModelParams};
use crate::tensor::Matrix;

/// `counts[i][j]` = number of samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub per_class: Vec<ClassMetrics>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision_recall_f1(confusion: &ConfusionMatrix) -> PrecisionRecallF1 {
    let c = confusion.num_classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = confusion.counts[k][k];
            let precision = ratio(tp, confusion.col_sum(k));
            let recall = ratio(tp, confusion.row_sum(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: confusion.row_sum(k),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    PrecisionRecallF1 {
        precision_macro: mean(|m| m.precision),
        recall_macro: mean(|m| m.recall),
        f1_macro: mean(|m| m.f1),
        per_class,
    }
}

/// Binary ROC AUC as the normalized Mann-Whitney U statistic, computed from
/// midranks. `None` when either class is absent.
pub fn binary_auc(is_positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    let n_neg = is_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * order[i..=j].iter().filter(|&&k| is_positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * n))
}

/// ROC points `(fpr, tpr)` from sweeping the threshold down through the
/// distinct scores, starting at `(0, 0)`.
pub fn roc_curve(is_positive: &[bool], scores: &[f64]) -> Vec<(f64, f64)> {
    let n_pos = is_positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = is_positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n_neg, tp / n_pos));
    }
    points
}

/// Area under the ROC curve by trapezoidal integration.
pub fn auc_trapezoid(is_positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == is_positive.len() {
        return None;
    }
    let pts = roc_curve(is_positive, scores);
    Some(
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum(),
    )
}

fn check_scores(y_true: &[usize], scores: &Matrix) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if scores.rows() != y_true.len() {
        return Err(Error::LengthMismatch {
            what: "score rows",
            expected: y_true.len(),
            actual: scores.rows(),
        });
    }
    if let Some(&label) = y_true.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: scores.cols(),
        });
    }
    Ok(())
}

/// Macro one-vs-rest AUC over the classes that have both positives and
/// negatives.
pub fn auc_macro_ovr(y_true: &[usize], scores: &Matrix) -> Result<f64> {
    check_scores(y_true, scores)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..scores.cols() {
        let is_pos: Vec<bool> = y_true.iter().map(|&l| l == c).collect();
        let col: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, c)).collect();
        if let Some(auc) = binary_auc(&is_pos, &col) {
            sum += auc;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok(sum / used as f64)
}

/// Mean absolute and root-mean-square error over all `n*C` entries of the
/// score matrix against one-hot targets.
pub fn mae_rmse(y_true: &[usize], scores: &Matrix) -> Result<(f64, f64)> {
    check_scores(y_true, scores)?;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (r, &label) in y_true.iter().enumerate() {
        for (c, &s) in scores.row(r).iter().enumerate() {
            let e = s - if c == label { 1.0 } else { 0.0 };
            abs += e.abs();
            sq += e * e;
        }
    }
    let n = scores.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// `None` when no class has both positive and negative examples.
    pub auc_macro: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Assembles every metric from labels and per-sample probability rows.
    pub fn from_scores(y_true: &[usize], scores: &Matrix) -> Result<EvalReport> {
        check_scores(y_true, scores)?;
        let y_pred: Vec<usize> = (0..scores.rows()).map(|r| scores.argmax_row(r)).collect();
        let confusion = confusion_matrix(y_true, &y_pred, scores.cols())?;
        let prf = precision_recall_f1(&confusion);
        let auc_macro = match auc_macro_ovr(y_true, scores) {
            Ok(v) => Some(v),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        let (mae, rmse) = mae_rmse(y_true, scores)?;
        Ok(EvalReport {
            num_samples: y_true.len(),
            accuracy: confusion.trace() as f64 / confusion.total() as f64,
            precision_macro: prf.precision_macro,
            recall_macro: prf.recall_macro,
            f1_macro: prf.f1_macro,
            auc_macro,
            mae,
            rmse,
            per_class: prf.per_class,
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Fixed-width table of the headline metrics.
    pub fn summary_table(&self) -> String {
        let auc = self.auc_macro.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n{:>9.4} {:>9.4} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            "accuracy",
            "f1",
            "auc",
            "precision",
            "recall",
            "mae",
            "rmse",
            self.accuracy,
            self.f1_macro,
            auc,
            self.precision_macro,
            self.recall_macro,
            self.mae,
            self.rmse
        )
    }
}

/// Eval-mode probabilities for every sample, stacked `n x C`.
pub fn predict_scores(params: &ModelParams, data: &EmbeddedDataset, cfg: &ModelConfig) -> Result<Matrix> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = data
        .samples
        .iter()
        .map(|emb| forward(emb, params, cfg, Mode::Eval).map(|t| t.y_hat))
        .collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&rows.iter().collect::<Vec<_>>())
}

pub fn evaluate(params: &ModelParams, data: &EmbeddedDataset, cfg: &ModelConfig) -> Result<EvalReport> {
    if data.num_classes != cfg.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the model has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let scores = predict_scores(params, data, cfg)?;
    EvalReport::from_scores(&data.labels, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.counts[i][j] == 0, i != j || cm.row_sum(i) == 0);
            }
        }
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.row_sum(1), 1);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            confusion_matrix(&[0, 1], &[0], 2),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_matrix(&[0, 2], &[0, 1], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(confusion_matrix(&[], &[], 2), Err(Error::EmptyDataset)));
    }

    #[test]
    fn prf_examples() {
        let perfect = ConfusionMatrix {
            counts: vec![vec![3, 0], vec![0, 2]],
        };
        let p = precision_recall_f1(&perfect);
        assert_eq!((p.precision_macro, p.recall_macro, p.f1_macro), (1.0, 1.0, 1.0));

        let p = precision_recall_f1(&ConfusionMatrix {
            counts: vec![vec![1, 1], vec![0, 1]],
        });
        assert_eq!(p.per_class[0].precision, 1.0);
        assert_eq!(p.per_class[0].recall, 0.5);
        assert_abs_diff_eq!(p.per_class[0].f1, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(p.per_class[1].precision, 0.5);
        assert_eq!(p.per_class[1].recall, 1.0);
        assert_abs_diff_eq!(p.f1_macro, 2.0 / 3.0, epsilon = 1e-15);

        // class 2 never occurs and is never predicted
        let p = precision_recall_f1(&ConfusionMatrix {
            counts: vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]],
        });
        assert_eq!(
            p.per_class[2],
            ClassMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 0
            }
        );
        assert_abs_diff_eq!(p.f1_macro, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            binary_auc(&[true, true, false, false], &[0.9, 0.8, 0.2, 0.1]),
            Some(1.0)
        );
        assert_eq!(binary_auc(&[true, false, true, false], &[0.5; 4]), Some(0.5));
        // pairs: (0.9,0.5)=1 (0.9,0.1)=1 (0.4,0.5)=0 (0.4,0.1)=1
        assert_eq!(
            binary_auc(&[true, true, false, false], &[0.9, 0.4, 0.5, 0.1]),
            Some(0.75)
        );
        assert_eq!(binary_auc(&[true, true], &[0.1, 0.2]), None);
    }

    #[test]
    fn auc_macro_skips_and_errors() {
        let scores = Matrix::from_rows(&[&[0.9, 0.1, 0.0], &[0.2, 0.8, 0.0]]).unwrap();
        // class 2 has no positives and is skipped
        assert_eq!(auc_macro_ovr(&[0, 1], &scores).unwrap(), 1.0);
        let one_class = Matrix::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]).unwrap();
        assert!(matches!(auc_macro_ovr(&[0, 0], &one_class), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn mae_rmse_examples() {
        let perfect = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(mae_rmse(&[0, 1], &perfect).unwrap(), (0.0, 0.0));
        let half = Matrix::row_vector(&[0.5, 0.5]);
        assert_eq!(mae_rmse(&[0], &half).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn report_without_auc() {
        let scores = Matrix::from_rows(&[&[0.9, 0.1], &[0.6, 0.4]]).unwrap();
        let r = EvalReport::from_scores(&[0, 0], &scores).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc_macro, None);
        assert!(r.to_json().unwrap().contains("\"auc_macro\": null"));
        assert!(r.summary_table().contains("n/a"));
    }

    #[test]
    fn argmax_ties_go_low() {
        let scores = Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        let r = EvalReport::from_scores(&[0, 1], &scores).unwrap();
        assert_eq!(r.confusion.counts, vec![vec![1, 0], vec![1, 0]]);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<usize>, Matrix)> {
        (2usize..5, 2usize..30).prop_flat_map(|(c, n)| {
            (
                prop::collection::vec(0..c, n),
                prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), n),
            )
                .prop_map(move |(labels, raw)| {
                    let rows: Vec<Vec<f64>> = raw
                        .into_iter()
                        .map(|r| {
                            let s: f64 = r.iter().sum::<f64>() + 1e-9;
                            r.iter().map(|v| (v + 1e-9 / c as f64) / s).collect()
                        })
                        .collect();
                    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                    (labels, Matrix::from_rows(&refs).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn report_invariants((labels, scores) in arb_instance()) {
            let r = EvalReport::from_scores(&labels, &scores).unwrap();
            for v in [r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(a) = r.auc_macro {
                prop_assert!((0.0..=1.0).contains(&a));
            }
            prop_assert!(r.mae >= 0.0 && r.mae <= 2.0);
            prop_assert!(r.rmse + 1e-15 >= r.mae);
            prop_assert_eq!(r.confusion.total() as usize, labels.len());
            prop_assert_eq!(r.accuracy, r.confusion.trace() as f64 / labels.len() as f64);
        }

        #[test]
        fn metrics_ignore_sample_order((labels, scores) in arb_instance(), seed in any::<u64>()) {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            crate::rng::Rng::new(seed).shuffle(&mut order);
            let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let rows: Vec<&[f64]> = order.iter().map(|&i| scores.row(i)).collect();
            let s2 = Matrix::from_rows(&rows).unwrap();
            let a = EvalReport::from_scores(&labels, &scores).unwrap();
            let b = EvalReport::from_scores(&l2, &s2).unwrap();
            prop_assert_eq!(a.confusion, b.confusion);
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            prop_assert_eq!(a.auc_macro.is_some(), b.auc_macro.is_some());
            if let (Some(x), Some(y)) = (a.auc_macro, b.auc_macro) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.mae - b.mae).abs() < 1e-12);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        }

        #[test]
        fn class_relabeling_keeps_macro_metrics((labels, scores) in arb_instance(), seed in any::<u64>()) {
            let c = scores.cols();
            let mut perm: Vec<usize> = (0..c).collect();
            crate::rng::Rng::new(seed).shuffle(&mut perm);
            let l2: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let mut s2 = Matrix::zeros(scores.rows(), c);
            for r in 0..scores.rows() {
                for (k, &to) in perm.iter().enumerate() {
                    s2.set(r, to, scores.get(r, k));
                }
            }
            let a = EvalReport::from_scores(&labels, &scores).unwrap();
            let b = EvalReport::from_scores(&l2, &s2).unwrap();
            // exact argmax ties could resolve differently after relabeling; random floats make them negligible
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.precision_macro - b.precision_macro).abs() < 1e-12);
            prop_assert!((a.recall_macro - b.recall_macro).abs() < 1e-12);
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            if let (Some(x), Some(y)) = (a.auc_macro, b.auc_macro) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.mae - b.mae).abs() < 1e-12);
        }

        #[test]
        fn u_statistic_matches_trapezoid(
            labels in prop::collection::vec(any::<bool>(), 2..60),
            raw in prop::collection::vec(0u8..12, 60),
        ) {
            // coarse scores force plenty of ties
            let scores: Vec<f64> = raw[..labels.len()].iter().map(|&v| f64::from(v) / 11.0).collect();
            let u = binary_auc(&labels, &scores);
            let t = auc_trapezoid(&labels, &scores);
            prop_assert_eq!(u.is_some(), t.is_some());
            if let (Some(u), Some(t)) = (u, t) {
                prop_assert!((u - t).abs() <= 1e-9, "u {} trapezoid {}", u, t);
            }
        }
    }
}
