//! Graph-size normalization and batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales every row by `1/sqrt(node_count)` so sum-aggregated features stay
/// comparable across graph sizes.
pub fn graph_norm(x: &Tensor) -> Tensor {
    let n = x.rows();
    if n == 0 {
        return x.clone();
    }
    x.scale(1.0 / (n as f64).sqrt())
}

pub fn graph_norm_backward(dy: &Tensor, node_count: usize) -> Tensor {
    if node_count == 0 {
        return dy.clone();
    }
    dy.scale(1.0 / (node_count as f64).sqrt())
}

/// Batch normalization over rows with learnable scale/shift and running
/// statistics (momentum 0.9).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics produced by a training-mode forward; folded into the
/// running statistics by the optimizer step.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::from_vec(&[dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::from_vec(&[dim], vec![1.0; dim]).unwrap(),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes by batch statistics (population variance over the rows).
    /// Requires at least two rows.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BnCache, BnStats)> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.dim() {
            return Err(Error::shape(format!("batchnorm dim {} vs input {}", self.dim(), d)));
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "batch normalization in training mode needs at least 2 rows, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, &v) in x.row(r).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = x.clone();
        for r in 0..n {
            for (j, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for r in 0..n {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = self.gamma.data()[j] * *v + self.beta.data()[j];
            }
        }
        let stats = BnStats {
            mean: Tensor::from_vec(&[d], mean)?,
            var: Tensor::from_vec(&[d], var)?,
        };
        Ok((y, BnCache { xhat, inv_std }, stats))
    }

    /// Normalizes by the stored running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.cols();
        if d != self.dim() {
            return Err(Error::shape(format!("batchnorm dim {} vs input {}", self.dim(), d)));
        }
        let mut y = x.clone();
        for r in 0..x.rows() {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                let inv = 1.0 / (self.running_var.data()[j] + self.eps).sqrt();
                *v = self.gamma.data()[j] * (*v - self.running_mean.data()[j]) * inv
                    + self.beta.data()[j];
            }
        }
        Ok(y)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean.data_mut()[j] =
                m * self.running_mean.data()[j] + (1.0 - m) * stats.mean.data()[j];
            self.running_var.data_mut()[j] =
                m * self.running_var.data()[j] + (1.0 - m) * stats.var.data()[j];
        }
    }

    /// Training-mode backward. Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..n {
            for (j, &g) in dy.row(r).iter().enumerate() {
                dgamma[j] += g * cache.xhat.at(r, j);
                dbeta[j] += g;
            }
        }
        // dxhat = dy * gamma; dx from the standard closed form.
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for r in 0..n {
            for (j, &g) in dy.row(r).iter().enumerate() {
                let dxh = g * self.gamma.data()[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * cache.xhat.at(r, j);
            }
        }
        let mut dx = Tensor::zeros(&[n, d]);
        for r in 0..n {
            for j in 0..d {
                let dxh = dy.at(r, j) * self.gamma.data()[j];
                let v = cache.inv_std[j] / n as f64
                    * (n as f64 * dxh - sum_dxhat[j] - cache.xhat.at(r, j) * sum_dxhat_xhat[j]);
                dx.set(r, j, v);
            }
        }
        Ok((dx, Tensor::from_vec(&[d], dgamma)?, Tensor::from_vec(&[d], dbeta)?))
    }
}
