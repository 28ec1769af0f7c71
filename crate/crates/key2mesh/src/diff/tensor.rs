use crate::{Error, Result};

/// Dense row-major f64 tensor. Rank 0 (shape `[]`) holds one scalar.
///
/// Tensors are plain values: cloning copies the buffer, and nothing in the
/// crate mutates a tensor that has been handed to a [`super::Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality, the standard the checkpoint round trip is held to.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::reshaped",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// `self [m×k] · b [k×n]`.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = b.cols();
        debug_assert_eq!(k, b.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                self.data.as_ptr(), k as isize, 1,
                b.data.as_ptr(), n as isize, 1,
                0.0,
                out.data.as_mut_ptr(), n as isize, 1,
            );
        }
        out
    }

    /// `self [m×k] · b [n×k]ᵀ`.
    pub fn matmul_tb(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = b.rows();
        debug_assert_eq!(k, b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                self.data.as_ptr(), k as isize, 1,
                b.data.as_ptr(), 1, k as isize,
                0.0,
                out.data.as_mut_ptr(), n as isize, 1,
            );
        }
        out
    }

    /// `self [k×m]ᵀ · b [k×n]`.
    pub fn matmul_ta(&self, b: &Tensor) -> Tensor {
        let (k, m) = (self.rows(), self.cols());
        let n = b.cols();
        debug_assert_eq!(k, b.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                self.data.as_ptr(), 1, m as isize,
                b.data.as_ptr(), n as isize, 1,
                0.0,
                out.data.as_mut_ptr(), n as isize, 1,
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Triple-loop reference used to pin the gemm-backed products.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at(i, l) * b.at(l, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn demo(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = demo(3, 4, 1);
        let b = demo(4, 2, 2);
        let got = a.matmul(&b);
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
        }
    }

    #[test]
    fn transposed_products_match_triple_loop() {
        let a = demo(5, 3, 3);
        let b = demo(7, 3, 4);
        let got = a.matmul_tb(&b);
        for i in 0..5 {
            for j in 0..7 {
                let want: f64 = (0..3).map(|l| a.at(i, l) * b.at(j, l)).sum();
                assert!((got.at(i, j) - want).abs() < 1e-12);
            }
        }
        let c = demo(4, 5, 5);
        let d = demo(4, 6, 6);
        let got = c.matmul_ta(&d);
        for i in 0..5 {
            for j in 0..6 {
                let want: f64 = (0..4).map(|l| c.at(l, i) * d.at(l, j)).sum();
                assert!((got.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn bits_eq_distinguishes_zero_signs() {
        let a = Tensor::vector(vec![0.0]);
        let b = Tensor::vector(vec![-0.0]);
        assert!(!a.bits_eq(&b));
        assert!(a.bits_eq(&a.clone()));
    }
}
