//! Element type abstraction: training runs at `f32`, gradient-check builds at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type usable by the tensor engine.
pub trait Scalar:
    num_traits::Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents implied by (m, k, n).
    unsafe fn gemm_raw(
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
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
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
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
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

/// Matrix view over a flat slice: byte layout is defined by row/col strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    /// Contiguous row-major [rows, cols] view.
    pub fn row_major(data: &'a [S], cols: usize) -> Self {
        MatRef { data, row_stride: cols as isize, col_stride: 1 }
    }

    /// Transposed view of a contiguous row-major [cols, rows] buffer.
    pub fn transposed(data: &'a [S], cols_of_storage: usize) -> Self {
        MatRef { data, row_stride: 1, col_stride: cols_of_storage as isize }
    }
}

/// C(m,n) <- alpha * A(m,k) * B(k,n) + beta * C. `c` is contiguous row-major.
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    beta: S,
    c: &mut [S],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(required_len(m, k, a.row_stride, a.col_stride) <= a.data.len());
    debug_assert!(required_len(k, n, b.row_stride, b.col_stride) <= b.data.len());
    debug_assert!(m * n <= c.len());
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn required_len(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // [3,4]
        let mut c = vec![0.0f64; 8];
        gemm(2, 3, 4, 1.0, MatRef::row_major(&a, 3), MatRef::row_major(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_view_multiplies_b_transpose() {
        // A[2,3] * B^T where B stored as [4,3]
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        let mut c = vec![0.0f32; 8];
        gemm(2, 3, 4, 1.0, MatRef::row_major(&a, 3), MatRef::transposed(&b, 3), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-5);
            }
        }
    }
}
