//! Dense row-major tensors.
//!
//! Shapes are kept as explicit extent lists; every op in this repo treats the
//! last extent as the feature dimension and the product of the others as the
//! row count, which is all the layers here need.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;

/// Dense tensor with optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], grad: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![S::one(); numel], grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    /// Xavier-uniform init over [-a, a], a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::from_c(rng.uniform_in(-a, a)))
            .collect();
        Tensor { shape: vec![rows, cols], data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Row count under the rows x features view.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Feature (last-dim) extent; 0-rank tensors report 1.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// Raw matmul kernels shared by forward ops and their VJPs. `m/k/n` follow
// C[m x n] = A[m x k] . B[k x n]; the _nt/_tn variants read the transposed
// operand in place instead of materializing it.

pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(S::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (c, &blc) in crow.iter_mut().zip(brow.iter()) {
                *c = ail.mul_add(blc, *c);
            }
        }
    }
}

/// out[m x n] = A[m x k] . B^T where B is [n x k].
pub fn matmul_nt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc = x.mul_add(y, acc);
            }
            out[i * n + j] = acc;
        }
    }
}

/// out[m x n] = A^T . B where A is [k x m], B is [k x n].
pub fn matmul_tn_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(S::zero());
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = ali.mul_add(bv, *c);
            }
        }
    }
}
