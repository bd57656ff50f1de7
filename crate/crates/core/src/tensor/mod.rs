//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! Tensors are plain values (shape + row-major data). Differentiable programs
//! are built on a [`Tape`]: every operation appends a node holding its output
//! and enough context to run the backward step. `Tape::backward` walks the
//! node list in reverse, which is a reverse topological order by construction
//! since an operation can only reference earlier nodes.

mod tape;

pub use tape::{NodeId, Tape};

use thiserror::Error;

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Error, PartialEq, Clone)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch { op: &'static str, len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape; build a fresh graph before differentiating again")]
    BackwardConsumed,
    #[error("dropout probability must lie in [0, 1), got {p}")]
    InvalidDropout { p: f32 },
}

/// Row-major dense f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from explicit data; errors if the length does not match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::LengthMismatch { op: "from_vec", len: data.len(), shape });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of elements (1 for rank-0).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for rank-0 or single-element tensors; backward roots must satisfy this.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows × cols view of the trailing axis: (product of leading dims, last dim).
    /// Rank-0 tensors are treated as 1×1.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.last() {
            Some(&c) => (self.data.len() / c.max(1), c),
            None => (1, 1),
        }
    }
}

/// f32 matrix product kernels on raw row-major slices. Accumulation order is
/// fixed (k-major), so results are bitwise deterministic.
pub(crate) mod kernels {
    /// c[m,n] += a[m,k] * b[k,n]
    pub fn mm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }

    /// c[m,k] += a[m,n] * b[k,n]^T  (rows of a dotted with rows of b)
    pub fn mm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let crow = &mut c[i * k..(i + 1) * k];
            for (kk, cv) in crow.iter_mut().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = 0.0f32;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *cv += acc;
            }
        }
    }

    /// c[k,n] += a[m,k]^T * b[m,n]
    pub fn mm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let crow = &mut c[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 5, .. }));
    }

    #[test]
    fn zeros_has_expected_layout() {
        let t = Tensor::zeros(vec![2, 4]);
        assert_eq!(t.shape(), &[2, 4]);
        assert_eq!(t.len(), 8);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_predicate_covers_rank0_and_single_element() {
        assert!(Tensor::scalar(3.0).is_scalar());
        assert!(Tensor::zeros(vec![1]).is_scalar());
        assert!(!Tensor::zeros(vec![2]).is_scalar());
    }

    #[test]
    fn matmul_kernels_agree_with_reference() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        kernels::mm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // nt: a 2x2 times (3x2)^T -> 2x3
        let mut d = [0.0; 6];
        kernels::mm_nt(&c, &b, &mut d, 2, 2, 3);
        // row0 = [58,64] dot rows of b
        assert_eq!(d[0], 58.0 * 7.0 + 64.0 * 8.0);

        // tn: (2x3)^T * 2x2 -> 3x2
        let mut e = [0.0; 6];
        kernels::mm_tn(&a, &c, &mut e, 2, 3, 2);
        assert_eq!(e[0], 1.0 * 58.0 + 4.0 * 139.0);
    }
}
