//! Minimal dense network engine: hand-derived gradients over f64 tensors.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod mlp;
pub mod norm;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub use adam::AdamState;
pub use gradcheck::{central_diff_error, GRADCHECK_STEP};
pub use loss::softmax_cross_entropy;
pub use lstm::{LstmGrads, LstmParams};
pub use mlp::{Linear, Mlp, MlpGrads};
pub use norm::{graph_norm, graph_norm_backward, BatchNorm, BnStats};

/// Fan-balanced uniform initialization.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape matches data")
}

/// Name-keyed gradient accumulator. Accumulating under the same name adds
/// elementwise, so per-graph gradients in a batch can be folded in turn.
#[derive(Debug, Default)]
pub struct GradMap(pub BTreeMap<String, Tensor>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, grad: Tensor) {
        let name = name.into();
        match self.0.get_mut(&name) {
            Some(existing) => existing
                .add_assign(&grad)
                .unwrap_or_else(|_| panic!("gradient shape changed for {name}")),
            None => {
                self.0.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in self.0.values_mut() {
            *g = g.scale(s);
        }
    }
}
