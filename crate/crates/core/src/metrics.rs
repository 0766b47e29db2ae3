//! Classification metrics: confusion matrix, per-class precision/recall/F1
//! and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { counts: vec![vec![0; classes]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = Self::new(classes);
        for (t, p) in pairs {
            c.add(t, p);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }
}

/// Full evaluation report for one test run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_f1: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Per-class F1 from the confusion matrix with the 0/0 -> 0 convention;
/// the weighted score averages class F1 by support share.
pub fn weighted_f1(confusion: &Confusion) -> Result<Metrics> {
    let c = confusion.classes();
    let total = confusion.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let div = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    let mut weighted = 0.0;
    let mut correct = 0usize;
    for k in 0..c {
        let tp = confusion.counts[k][k] as f64;
        let row: f64 = confusion.counts[k].iter().sum::<usize>() as f64; // support
        let col: f64 = (0..c).map(|r| confusion.counts[r][k]).sum::<usize>() as f64;
        precision[k] = div(tp, col);
        recall[k] = div(tp, row);
        f1[k] = div(2.0 * precision[k] * recall[k], precision[k] + recall[k]);
        weighted += row / total as f64 * f1[k];
        correct += confusion.counts[k][k];
    }
    Ok(Metrics {
        per_class_f1: f1,
        per_class_precision: precision,
        per_class_recall: recall,
        weighted_f1: weighted,
        accuracy: correct as f64 / total as f64,
        confusion: confusion.counts.clone(),
    })
}

/// Plain-text confusion table with per-class precision and recall margins.
pub fn format_confusion_table(metrics: &Metrics, class_names: &[String]) -> String {
    let c = metrics.confusion.len();
    let name = |k: usize| -> String {
        class_names.get(k).cloned().unwrap_or_else(|| format!("class_{k}"))
    };
    let width = (0..c).map(|k| name(k).len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    out.push_str(&format!("{:>width$} |", "true\\pred", width = width + 2));
    for k in 0..c {
        out.push_str(&format!(" {:>width$}", name(k), width = width));
    }
    out.push_str(&format!(" | {:>7}\n", "recall"));
    for t in 0..c {
        out.push_str(&format!("{:>width$} |", name(t), width = width + 2));
        for p in 0..c {
            out.push_str(&format!(" {:>width$}", metrics.confusion[t][p], width = width));
        }
        out.push_str(&format!(" | {:>7.4}\n", metrics.per_class_recall[t]));
    }
    out.push_str(&format!("{:>width$} |", "precision", width = width + 2));
    for p in 0..c {
        out.push_str(&format!(" {:>width$.4}", metrics.per_class_precision[p], width = width));
    }
    out.push_str(&format!(
        "\nweighted F1 = {:.6}, accuracy = {:.6}\n",
        metrics.weighted_f1, metrics.accuracy
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal_scores_one() {
        let c = Confusion { counts: vec![vec![7, 0, 0], vec![0, 3, 0], vec![0, 0, 5]] };
        let m = weighted_f1(&c).unwrap();
        assert_eq!(m.weighted_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class_f1.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_two_classes() {
        // Everything predicted as class 0: F1 = (2/3, 0), weighted = 1/3.
        let c = Confusion { counts: vec![vec![10, 0], vec![10, 0]] };
        let m = weighted_f1(&c).unwrap();
        assert!((m.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class_f1[1], 0.0);
        assert!((m.weighted_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_correct_sample() {
        let c = Confusion::from_pairs(2, [(1, 1)]);
        let m = weighted_f1(&c).unwrap();
        assert_eq!(m.weighted_f1, 1.0);
    }

    #[test]
    fn recall_is_diagonal_over_row_sum() {
        let c = Confusion { counts: vec![vec![3, 1], vec![2, 4]] };
        let m = weighted_f1(&c).unwrap();
        assert!((m.per_class_recall[0] - 0.75).abs() < 1e-15);
        assert!((m.per_class_recall[1] - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.accuracy - 7.0 / 10.0).abs() < 1e-15);
    }

    /// Independent per-class recomputation from first principles.
    pub(crate) fn brute_force_weighted_f1(counts: &[Vec<usize>]) -> f64 {
        let c = counts.len();
        let n: usize = counts.iter().flatten().sum();
        let mut acc = 0.0;
        for k in 0..c {
            let tp = counts[k][k] as f64;
            let fnn: f64 = (0..c).filter(|&p| p != k).map(|p| counts[k][p] as f64).sum();
            let fp: f64 = (0..c).filter(|&t| t != k).map(|t| counts[t][k] as f64).sum();
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
            let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            let support = tp + fnn;
            acc += support / n as f64 * f1;
        }
        acc
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let c = rng.gen_range(2..8);
            let counts: Vec<Vec<usize>> =
                (0..c).map(|_| (0..c).map(|_| rng.gen_range(0..30)).collect()).collect();
            if counts.iter().flatten().sum::<usize>() == 0 {
                continue;
            }
            let m = weighted_f1(&Confusion { counts: counts.clone() }).unwrap();
            let oracle = brute_force_weighted_f1(&counts);
            assert!((m.weighted_f1 - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn table_renders_all_classes() {
        let c = Confusion { counts: vec![vec![3, 1], vec![2, 4]] };
        let m = weighted_f1(&c).unwrap();
        let table = format_confusion_table(&m, &["benign".into(), "dcis".into()]);
        assert!(table.contains("benign") && table.contains("dcis"));
        assert!(table.contains("weighted F1"));
    }
}
