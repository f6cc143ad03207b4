//! Dense double-precision tensors used throughout the crate.
//!
//! A [`Tensor`] is a plain row-major value container. Differentiation happens
//! on a [`crate::graph::Graph`]; tensors only carry an optional gradient
//! buffer so that parameters can accumulate gradients across backward passes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("log: non-positive input {value} at flat index {index}")]
    LogDomain { value: f64, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,
    #[error("parameter has no gradient buffer")]
    MissingGrad,
    #[error("{op}: non-finite input value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        value: f64,
        index: usize,
    },
}

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::BadLength {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], values)
    }

    /// Enable gradient accumulation on this tensor (zero-initialized).
    pub fn with_grad(mut self) -> Self {
        let n = self.values.len();
        self.grad = Some(vec![0.0; n]);
        self
    }

    /// Copy of the values without any gradient buffer.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Add `delta` into this tensor's gradient buffer, allocating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `out (+)= a @ b` for row-major matrices, with optional transposed reads.
///
/// `ta` means `a` is stored as the transpose of the operand actually used
/// (i.e. `a` holds a `[k x m]` row-major buffer read as `[m x k]`), same for
/// `tb`. When `accumulate` is false, `out` is overwritten.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadLength { expected: 6, .. }));
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDim(_))
        ));
    }

    #[test]
    fn grad_accumulates_and_zeroes() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        t.accumulate_grad(&[0.5, 1.0]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gemm_matches_hand_arithmetic() {
        // [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(2, 2, 1, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn gemm_transposed_reads() {
        // a^T @ b with a stored [2x3]: effective [3x2] @ [2x1]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 3];
        gemm(3, 2, 1, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -2.0, 0.3, 7.0, 50.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }
}
