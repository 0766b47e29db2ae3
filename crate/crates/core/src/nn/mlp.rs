//! Multi-layer perceptron: affine layers with ReLU between them and a
//! linear output.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::glorot_uniform;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `d_in x d_out`.
    pub w: Tensor,
    /// Length `d_out`.
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Forward cache: the input fed to each affine layer plus the
/// post-activation outputs of the hidden layers (their sign is the ReLU
/// mask).
#[derive(Debug)]
pub struct MlpCache {
    layer_inputs: Vec<Tensor>,
    hidden_post: Vec<Tensor>,
}

#[derive(Debug)]
pub struct MlpGrads {
    /// `(dw, db)` per layer, forward order.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// Builds an MLP over the dimension chain `dims[0] -> ... -> dims[n]`.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|d| Linear { w: glorot_uniform(rng, d[0], d[1]), b: Tensor::zeros(&[d[1]]) })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "mlp expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_post = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(h.clone());
            let z = h.matmul(&layer.w)?.add_row(&layer.b)?;
            h = if l + 1 < self.layers.len() {
                let post = z.map(|v| v.max(0.0));
                hidden_post.push(post.clone());
                post
            } else {
                z
            };
        }
        Ok((h, MlpCache { layer_inputs, hidden_post }))
    }

    /// Exact gradients w.r.t. the input and every parameter.
    pub fn backward(&self, cache: &MlpCache, dy: &Tensor) -> Result<(Tensor, MlpGrads)> {
        let n_layers = self.layers.len();
        let mut grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(n_layers);
        let mut g = dy.clone();
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                // Pass back through the ReLU that followed layer l.
                let mask = &cache.hidden_post[l];
                let mut masked = g.clone();
                for (v, &m) in masked.data_mut().iter_mut().zip(mask.data()) {
                    if m <= 0.0 {
                        *v = 0.0;
                    }
                }
                g = masked;
            }
            let x = &cache.layer_inputs[l];
            let dw = x.matmul_tn(&g)?;
            let mut db = Tensor::zeros(&[g.cols()]);
            for r in 0..g.rows() {
                for (acc, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            grads.push((dw, db));
            g = g.matmul_nt(&self.layers[l].w)?;
        }
        grads.reverse();
        Ok((g, MlpGrads { layers: grads }))
    }
}
