//! Softmax cross-entropy with log-sum-exp stabilization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-softmax of the true class. Returns the loss and the
/// exact gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    if n == 0 {
        return Err(Error::invalid("cross entropy over an empty batch"));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, c]);
    for r in 0..n {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        loss += lse - row[labels[r]];
        for j in 0..c {
            let p = (row[j] - m).exp() / sum_exp;
            let indicator = if j == labels[r] { 1.0 } else { 0.0 };
            grad.set(r, j, (p - indicator) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
