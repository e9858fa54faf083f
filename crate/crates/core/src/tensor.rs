//! Dense row-major tensors.
//!
//! Plain storage only: shape plus a flat buffer. Differentiation state lives
//! on the tape ([`crate::autodiff`]), not here, so tensors move freely between
//! contexts (checkpoints, parameter maps, cached activations).

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows: {} vs {}", r.len(), n_cols);
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![n_rows, n_cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Number of rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.rank() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Row length of a rank-1 or rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.rank() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> S {
        assert!(self.is_scalar(), "scalar_value() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2, got {:?}", self.shape);
        assert_eq!(rhs.rank(), 2, "matmul rhs must be rank 2, got {:?}", rhs.shape);
        assert_eq!(
            self.shape[1], rhs.shape[0],
            "matmul dimension mismatch: {:?} x {:?}",
            self.shape, rhs.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_slices(m, k, n, S::one(), &self.data, false, &rhs.data, false, S::zero(), &mut out);
        Tensor::new(vec![m, n], out)
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is `m x k` after `ta`, `b` is `k x n` after `tb`, `c` is `m x n`,
/// all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm_slices<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm a buffer: want {}x{}", m, k);
    assert_eq!(b.len(), k * n, "gemm b buffer: want {}x{}", k, n);
    assert_eq!(c.len(), m * n, "gemm c buffer: want {}x{}", m, n);
    // Transposition is expressed through strides; no copies.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
