//! Scalar abstraction so the same graph code runs in the fast 32-bit mode or
//! the 64-bit reference mode used by gradient checking.

use std::fmt::{Debug, Display};

use crate::tensor::Tensor;

/// Element type of tensors: `f32` for the production path, `f64` for the
/// reference path. Provides the GEMM dispatch and the conversions used at
/// reduction boundaries, where sums are accumulated in `f64` regardless of
/// the tensor element type.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Convert an `f32` tensor into this scalar type. The `f32` instantiation
    /// shares the underlying buffer instead of copying.
    fn lift(t: &Tensor<f32>) -> Tensor<Self>;

    /// `C = alpha*A*B + beta*C` over buffers with explicit row/column strides.
    ///
    /// # Safety
    /// `a`, `b`, `c` must be valid for the `m*k`, `k*n`, `m*n` accesses
    /// implied by the strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn lift(t: &Tensor<f32>) -> Tensor<f32> {
        t.clone()
    }

    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn lift(t: &Tensor<f32>) -> Tensor<f64> {
        Tensor::from_vec(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v as f64).collect(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
