//! Single LSTM cell unrolled over a sequence, with exact backpropagation
//! through time. Rows are independent (per-node) lanes.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::glorot_uniform;

/// Gate order used throughout: input, forget, cell, output.
pub const GATES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d_in x hidden` per gate.
    pub wx: [Tensor; GATES],
    /// `hidden x hidden` per gate.
    pub wh: [Tensor; GATES],
    /// Length `hidden` per gate.
    pub b: [Tensor; GATES],
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug)]
pub struct LstmGrads {
    pub wx: [Tensor; GATES],
    pub wh: [Tensor; GATES],
    pub b: [Tensor; GATES],
}

struct StepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    i: Tensor,
    f: Tensor,
    g: Tensor,
    o: Tensor,
    tanh_c: Tensor,
}

pub struct LstmCache {
    steps: Vec<StepCache>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl LstmParams {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = std::array::from_fn(|_| glorot_uniform(rng, input, hidden));
        let wh = std::array::from_fn(|_| glorot_uniform(rng, hidden, hidden));
        let b = std::array::from_fn(|_| Tensor::zeros(&[hidden]));
        LstmParams { wx, wh, b, input, hidden }
    }

    pub fn zeroed(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: std::array::from_fn(|_| Tensor::zeros(&[input, hidden])),
            wh: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
            input,
            hidden,
        }
    }

    /// Runs the cell over `sequence` (each entry `N x d_in`) and returns
    /// the final hidden state (`N x hidden`).
    pub fn forward(&self, sequence: &[Tensor]) -> Result<(Tensor, LstmCache)> {
        if sequence.is_empty() {
            return Err(Error::invalid("lstm sequence must be nonempty"));
        }
        let n = sequence[0].rows();
        for (t, x) in sequence.iter().enumerate() {
            if x.cols() != self.input || x.rows() != n {
                return Err(Error::shape(format!(
                    "sequence step {t} is {}x{}, expected {n}x{}",
                    x.rows(),
                    x.cols(),
                    self.input
                )));
            }
        }
        let mut h = Tensor::zeros(&[n, self.hidden]);
        let mut c = Tensor::zeros(&[n, self.hidden]);
        let mut steps = Vec::with_capacity(sequence.len());
        for x in sequence {
            let mut z: Vec<Tensor> = Vec::with_capacity(GATES);
            for g in 0..GATES {
                let zx = x.matmul(&self.wx[g])?;
                let zh = h.matmul(&self.wh[g])?;
                z.push(zx.add(&zh)?.add_row(&self.b[g])?);
            }
            let i = z[0].map(sigmoid);
            let f = z[1].map(sigmoid);
            let g_ = z[2].map(f64::tanh);
            let o = z[3].map(sigmoid);
            let mut c_new = Tensor::zeros(&[n, self.hidden]);
            for (idx, v) in c_new.data_mut().iter_mut().enumerate() {
                *v = f.data()[idx] * c.data()[idx] + i.data()[idx] * g_.data()[idx];
            }
            let tanh_c = c_new.map(f64::tanh);
            let mut h_new = Tensor::zeros(&[n, self.hidden]);
            for (idx, v) in h_new.data_mut().iter_mut().enumerate() {
                *v = o.data()[idx] * tanh_c.data()[idx];
            }
            steps.push(StepCache {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g: g_,
                o,
                tanh_c,
            });
            h = h_new;
            c = c_new;
        }
        Ok((h, LstmCache { steps }))
    }

    /// Backpropagation through time from the gradient of the final hidden
    /// state. Returns per-step input gradients (forward order) and
    /// parameter gradients.
    pub fn backward(&self, cache: &LstmCache, dh_final: &Tensor) -> Result<(Vec<Tensor>, LstmGrads)> {
        let n = dh_final.rows();
        let mut grads = LstmGrads {
            wx: std::array::from_fn(|g| Tensor::zeros(self.wx[g].shape())),
            wh: std::array::from_fn(|g| Tensor::zeros(self.wh[g].shape())),
            b: std::array::from_fn(|g| Tensor::zeros(self.b[g].shape())),
        };
        let mut dx_steps = vec![Tensor::zeros(&[n, self.input]); cache.steps.len()];
        let mut dh = dh_final.clone();
        let mut dc = Tensor::zeros(&[n, self.hidden]);
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let len = n * self.hidden;
            let mut dz = [
                Tensor::zeros(&[n, self.hidden]),
                Tensor::zeros(&[n, self.hidden]),
                Tensor::zeros(&[n, self.hidden]),
                Tensor::zeros(&[n, self.hidden]),
            ];
            for idx in 0..len {
                let (i, f, g, o) = (
                    step.i.data()[idx],
                    step.f.data()[idx],
                    step.g.data()[idx],
                    step.o.data()[idx],
                );
                let tanh_c = step.tanh_c.data()[idx];
                let dh_v = dh.data()[idx];
                let d_o = dh_v * tanh_c;
                let d_c = dh_v * o * (1.0 - tanh_c * tanh_c) + dc.data()[idx];
                let d_i = d_c * g;
                let d_f = d_c * step.c_prev.data()[idx];
                let d_g = d_c * i;
                dz[0].data_mut()[idx] = d_i * i * (1.0 - i);
                dz[1].data_mut()[idx] = d_f * f * (1.0 - f);
                dz[2].data_mut()[idx] = d_g * (1.0 - g * g);
                dz[3].data_mut()[idx] = d_o * o * (1.0 - o);
                dc.data_mut()[idx] = d_c * f;
            }
            let mut dx = Tensor::zeros(&[n, self.input]);
            let mut dh_prev = Tensor::zeros(&[n, self.hidden]);
            for g in 0..GATES {
                grads.wx[g].add_assign(&step.x.matmul_tn(&dz[g])?)?;
                grads.wh[g].add_assign(&step.h_prev.matmul_tn(&dz[g])?)?;
                for r in 0..n {
                    for (acc, &v) in grads.b[g].data_mut().iter_mut().zip(dz[g].row(r)) {
                        *acc += v;
                    }
                }
                dx.add_assign(&dz[g].matmul_nt(&self.wx[g])?)?;
                dh_prev.add_assign(&dz[g].matmul_nt(&self.wh[g])?)?;
            }
            dx_steps[t] = dx;
            dh = dh_prev;
        }
        Ok((dx_steps, grads))
    }
}
