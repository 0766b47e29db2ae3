//! Jumping knowledge: folding a node's per-layer embeddings into one
//! vector before the hierarchy hand-off or readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LstmGrads, LstmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JkMode {
    None,
    Concat,
    Lstm,
}

/// Jumping-knowledge head; `lstm` is present iff `mode == Lstm`.
#[derive(Clone, Debug, PartialEq)]
pub struct JkParams {
    pub mode: JkMode,
    pub lstm: Option<LstmParams>,
}

pub enum JkCache {
    None { layers: usize },
    Concat { widths: Vec<usize> },
    Lstm(crate::nn::lstm::LstmCache),
}

impl JkParams {
    pub fn none() -> Self {
        JkParams { mode: JkMode::None, lstm: None }
    }

    pub fn concat() -> Self {
        JkParams { mode: JkMode::Concat, lstm: None }
    }

    pub fn lstm(params: LstmParams) -> Self {
        JkParams { mode: JkMode::Lstm, lstm: Some(params) }
    }

    /// Output width for `layers` entries of width `d`.
    pub fn out_dim(&self, layers: usize, d: usize) -> usize {
        match self.mode {
            JkMode::None => d,
            JkMode::Concat => layers * d,
            JkMode::Lstm => self.lstm.as_ref().expect("lstm params").hidden,
        }
    }

    /// Folds per-layer embeddings (layer index = time for the LSTM mode).
    pub fn forward(&self, per_layer: &[Tensor]) -> Result<(Tensor, JkCache)> {
        if per_layer.is_empty() {
            return Err(Error::invalid("jumping knowledge over an empty layer list"));
        }
        let n = per_layer[0].rows();
        if per_layer.iter().any(|t| t.rows() != n) {
            return Err(Error::shape(format!(
                "jumping knowledge entries disagree on node count {n}"
            )));
        }
        match self.mode {
            JkMode::None => {
                Ok((per_layer.last().unwrap().clone(), JkCache::None { layers: per_layer.len() }))
            }
            JkMode::Concat => {
                let refs: Vec<&Tensor> = per_layer.iter().collect();
                let out = Tensor::concat_cols(&refs)?;
                Ok((out, JkCache::Concat { widths: per_layer.iter().map(|t| t.cols()).collect() }))
            }
            JkMode::Lstm => {
                let lstm = self.lstm.as_ref().ok_or_else(|| {
                    Error::invalid("lstm jumping knowledge requires cell parameters")
                })?;
                let (h, cache) = lstm.forward(per_layer)?;
                Ok((h, JkCache::Lstm(cache)))
            }
        }
    }

    /// Gradients w.r.t. each per-layer entry, plus LSTM parameter grads.
    pub fn backward(
        &self,
        cache: &JkCache,
        d_out: &Tensor,
    ) -> Result<(Vec<Tensor>, Option<LstmGrads>)> {
        match (self.mode, cache) {
            (JkMode::None, JkCache::None { layers }) => {
                let mut grads = vec![Tensor::zeros(&[d_out.rows(), d_out.cols()]); layers - 1];
                grads.push(d_out.clone());
                Ok((grads, None))
            }
            (JkMode::Concat, JkCache::Concat { widths }) => {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in widths {
                    grads.push(d_out.slice_cols(off, off + w));
                    off += w;
                }
                Ok((grads, None))
            }
            (JkMode::Lstm, JkCache::Lstm(lstm_cache)) => {
                let lstm = self.lstm.as_ref().expect("lstm params");
                let (dx, grads) = lstm.backward(lstm_cache, d_out)?;
                Ok((dx, Some(grads)))
            }
            _ => Err(Error::invalid("jumping-knowledge cache does not match mode")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn entries(t: usize, n: usize, d: usize) -> Vec<Tensor> {
        (0..t)
            .map(|i| {
                Tensor::from_vec(&[n, d], (0..n * d).map(|j| (i * 100 + j) as f64).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn none_selects_last_entry() {
        let jk = JkParams::none();
        let e = entries(3, 2, 4);
        let (out, _) = jk.forward(&e).unwrap();
        assert_eq!(out, e[2]);
    }

    #[test]
    fn concat_dimension_arithmetic() {
        let jk = JkParams::concat();
        let e = entries(3, 2, 64);
        let (out, _) = jk.forward(&e).unwrap();
        assert_eq!(out.cols(), 192);
        assert_eq!(jk.out_dim(3, 64), 192);
    }

    #[test]
    fn lstm_single_entry_is_one_cell_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let cell = LstmParams::new(4, 6, &mut rng);
        let jk = JkParams::lstm(cell.clone());
        let e = entries(1, 3, 4);
        let (out, _) = jk.forward(&e).unwrap();
        let (expected, _) = cell.forward(&e).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn mismatched_node_counts_error() {
        let jk = JkParams::concat();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(jk.forward(&[a, b]).is_err());
    }

    #[test]
    fn concat_backward_splits_columns() {
        let jk = JkParams::concat();
        let e = entries(2, 2, 3);
        let (out, cache) = jk.forward(&e).unwrap();
        let (grads, _) = jk.backward(&cache, &out).unwrap();
        assert_eq!(grads[0], e[0]);
        assert_eq!(grads[1], e[1]);
    }
}
