//! Dense f64 tensors with row-major storage.
//!
//! All reductions accumulate left-to-right so repeated calls on identical
//! inputs are bit-identical.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (or vector length).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(format!("{what}: expected matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul lhs")?;
        let (k2, n) = other.expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner extents differ, lhs {:?} vs rhs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (t, &a) in arow.iter().enumerate() {
                let brow = &other.data[t * n..(t + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Per-row layer normalization over the last axis, then affine.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = self.cols();
        if gain.len() != n || bias.len() != n {
            return Err(Error::dim(format!(
                "layernorm: gain/bias length {}/{} does not match last extent {}",
                gain.len(),
                bias.len(),
                n
            )));
        }
        let m = self.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Exact-CDF GeLU: x * Phi(x).
    pub fn gelu(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x * gauss_cdf(x)).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    /// Rounds every element to the nearest f32 value. Checkpoints store f32,
    /// so parameters are kept f32-representable at all times.
    pub fn snap_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Standard normal CDF via erf.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        assert_eq!(id.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = Tensor::matrix(7, 5, (0..35).map(|_| next()).collect()).unwrap();
        let b = Tensor::matrix(5, 3, (0..15).map(|_| next()).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..5 {
                    acc += a.at(i, t) * b.at(t, j);
                }
                let denom = acc.abs().max(1.0);
                assert!((c.at(i, j) - acc).abs() / denom < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_deterministic() {
        let a = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).cos()).collect()).unwrap();
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul(&b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let y = x.softmax_rows();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_large_values_no_overflow() {
        let x = Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap();
        let y = x.softmax_rows();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let y = x.softmax_rows();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::matrix(1, 5, vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let shifted = Tensor::matrix(1, 5, x.data().iter().map(|v| v + 17.5).collect()).unwrap();
        let (a, b) = (x.softmax_rows(), shifted.softmax_rows());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn layernorm_constant_row() {
        let x = Tensor::matrix(1, 4, vec![5.0; 4]).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = x.layernorm(&g, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layernorm_two_point_row() {
        let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let y = x.layernorm(&g, &b, 1e-6).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_matches_scalar_oracle() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 37 + 11) as f64 * 0.618).sin()).collect();
        let x = Tensor::matrix(3, 4, data).unwrap();
        let g = Tensor::new(vec![4], vec![1.3, -0.2, 0.8, 2.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.1, 0.0, -0.5, 0.25]).unwrap();
        let y = x.layernorm(&g, &b, 1e-6).unwrap();
        for i in 0..3 {
            let row = x.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let want = (row[j] - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j];
                assert!((y.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_length_mismatch() {
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let g = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(x.layernorm(&g, &b, 1e-6).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap();
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // x * Phi(x) at x = 1 with Phi(1) = 0.8413447460685429
        assert!((y.data()[2] - 0.8413447460685429).abs() < 1e-9);
    }
}
