//! Dense row-major f64 tensor, the numeric currency of the network core.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {:?} ({} slots)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// 2-D tensor from equal-length rows. An empty row list yields a 0xN
    /// matrix with `cols` columns.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {} has {} values, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (or length of a 1-D tensor).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise add-assign of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// `self @ other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}: inner dims {} vs {}",
                self.shape, other.shape, k, k2
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `selfᵀ @ other`; `self` is m×p, `other` m×n, result p×n.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = (self.rows(), self.cols());
        let (m2, n) = (other.rows(), other.cols());
        if m != m2 {
            return Err(Error::shape(format!(
                "matmul_tn of {:?} and {:?}: row counts {} vs {}",
                self.shape, other.shape, m, m2
            )));
        }
        let mut out = vec![0.0; p * n];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (a_idx, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[a_idx * n..(a_idx + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![p, n], data: out })
    }

    /// `self @ otherᵀ`; `self` is m×p, `other` n×p, result m×n.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = (self.rows(), self.cols());
        let (n, p2) = (other.rows(), other.cols());
        if p != p2 {
            return Err(Error::shape(format!(
                "matmul_nt of {:?} and {:?}: col counts {} vs {}",
                self.shape, other.shape, p, p2
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            for j in 0..n {
                let b_row = &other.data[j * p..(j + 1) * p];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Adds a 1-D bias to every row of a 2-D tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if bias.len() != n {
            return Err(Error::shape(format!(
                "bias of length {} against {} columns",
                bias.len(),
                n
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                if p.rows() != rows {
                    return Err(Error::shape("concat_cols with unequal row counts"));
                }
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor { shape: vec![rows, total], data })
    }

    /// Row-wise stack of 2-D tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("vstack with unequal column counts"));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Splits a 2-D tensor into consecutive row blocks of the given sizes.
    pub fn split_rows(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if total != self.rows() {
            return Err(Error::shape(format!(
                "split_rows sizes sum to {}, tensor has {} rows",
                total,
                self.rows()
            )));
        }
        let cols = self.cols();
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in sizes {
            out.push(Tensor {
                shape: vec![s, cols],
                data: self.data[offset * cols..(offset + s) * cols].to_vec(),
            });
            offset += s;
        }
        Ok(out)
    }

    /// Column block `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.rows() * (hi - lo));
        for r in 0..self.rows() {
            data.extend_from_slice(&self.row(r)[lo..hi]);
        }
        Tensor { shape: vec![self.rows(), hi - lo], data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
