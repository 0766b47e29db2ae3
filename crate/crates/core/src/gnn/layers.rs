//! Message-passing layers: sum-aggregation (GIN) and multi-aggregator
//! (PNA) updates, each followed by graph and batch normalization.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{graph_norm, graph_norm_backward, BatchNorm, Mlp, MlpGrads};
use crate::tensor::Tensor;

use super::aggregate::{pna_aggregate, pna_aggregate_backward, Adjacency, PnaAggCache, PNA_BLOCKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gin,
    Pna,
}

/// One message-passing layer: update MLP plus batch-norm parameters. The
/// GIN epsilon weights the self features in the sum aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub kind: LayerKind,
    pub mlp: Mlp,
    pub bn: BatchNorm,
    pub epsilon: f64,
}

pub struct LayerCache {
    h_in: Tensor,
    mlp: crate::nn::mlp::MlpCache,
    agg: Option<PnaAggCache>,
    rows: usize,
}

impl GnnLayer {
    /// `mlp_dims` chains from the update-MLP input (13*d_in for PNA, d_in
    /// for GIN) through the hidden channels to the output width.
    pub fn new(kind: LayerKind, mlp_dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let out = *mlp_dims.last().unwrap();
        GnnLayer { kind, mlp: Mlp::new(mlp_dims, rng), bn: BatchNorm::new(out), epsilon: 0.0 }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Update MLP followed by graph normalization; batch normalization is
    /// applied afterwards over the whole mini-batch by the caller.
    pub fn pre_norm_forward(
        &self,
        h: &Tensor,
        adj: &Adjacency,
        delta: f64,
    ) -> Result<(Tensor, LayerCache)> {
        let (z, mlp_cache, agg) = match self.kind {
            LayerKind::Pna => {
                let (agg, agg_cache) = pna_aggregate(h, adj, delta)?;
                let m = Tensor::concat_cols(&[h, &agg])?;
                let (z, c) = self.mlp.forward(&m)?;
                (z, c, Some(agg_cache))
            }
            LayerKind::Gin => {
                let s = self.gin_sum(h, adj);
                let (z, c) = self.mlp.forward(&s)?;
                (z, c, None)
            }
        };
        let gn = graph_norm(&z);
        Ok((gn, LayerCache { h_in: h.clone(), mlp: mlp_cache, agg, rows: h.rows() }))
    }

    /// `(1 + eps) * h_v + sum of neighbor features`.
    fn gin_sum(&self, h: &Tensor, adj: &Adjacency) -> Tensor {
        let (n, d) = (h.rows(), h.cols());
        let mut s = h.scale(1.0 + self.epsilon);
        for v in 0..n {
            for &u in &adj.neighbors[v] {
                for k in 0..d {
                    s.set(v, k, s.at(v, k) + h.at(u, k));
                }
            }
        }
        s
    }

    /// Backward through graph norm, the MLP and the aggregation. Returns
    /// the gradient w.r.t. the incoming node features.
    pub fn pre_norm_backward(
        &self,
        cache: &LayerCache,
        adj: &Adjacency,
        d_gn: &Tensor,
    ) -> Result<(Tensor, MlpGrads)> {
        let dz = graph_norm_backward(d_gn, cache.rows);
        let (dm, grads) = self.mlp.backward(&cache.mlp, &dz)?;
        let dh = match self.kind {
            LayerKind::Pna => {
                let d = cache.h_in.cols();
                let mut dh = dm.slice_cols(0, d);
                let d_agg = dm.slice_cols(d, d + PNA_BLOCKS * d);
                let agg_cache = cache.agg.as_ref().expect("pna cache");
                dh.add_assign(&pna_aggregate_backward(agg_cache, &cache.h_in, adj, &d_agg)?)?;
                dh
            }
            LayerKind::Gin => {
                let (n, d) = (dm.rows(), dm.cols());
                let mut dh = dm.scale(1.0 + self.epsilon);
                for v in 0..n {
                    for &u in &adj.neighbors[v] {
                        for k in 0..d {
                            // h_u feeds the sums of all its neighbors v.
                            dh.set(u, k, dh.at(u, k) + dm.at(v, k));
                        }
                    }
                }
                dh
            }
        };
        Ok((dh, grads))
    }
}
