//! Thin wrapper over the `matrixmultiply` kernels.

use crate::Real;

/// Strided matrix view: element (i, j) lives at `i * row_stride + j * col_stride`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [Real],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [Real], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [Real], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [Real], beta: Real) {
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_index = |v: &View<'_>, rows: usize, cols: usize| {
        (rows as isize - 1) * v.row_stride + (cols as isize - 1) * v.col_stride
    };
    assert!((max_index(&a, m, k) as usize) < a.data.len(), "gemm lhs out of bounds");
    assert!((max_index(&b, k, n) as usize) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is an exclusive borrow of at least m * n elements.
    unsafe {
        kernel(
            m,
            k,
            n,
            1.0,
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

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as kernel;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as kernel;
