//! Dense linear algebra used by the transforms, GPTQ and the Cayley solver.
//!
//! Products go through `matrixmultiply` behind bounds-checked strided views;
//! the factorizations are small enough to write out directly.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// Strided mutable view of a matrix.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows × cols` view starting at `data[0]`.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Sub-block of a row-major matrix with leading dimension `ld`.
    pub fn block(
        data: &'a [T],
        ld: usize,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        Self {
            data: &data[row0 * ld + col0..],
            rows,
            cols,
            row_stride: ld,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn block(
        data: &'a mut [T],
        ld: usize,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        Self {
            data: &mut data[row0 * ld + col0..],
            rows,
            cols,
            row_stride: ld,
            col_stride: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
        // Overlapping output elements would make the product ill-defined.
        assert!(
            self.rows <= 1 || self.cols <= 1 || self.row_stride != self.col_stride,
            "aliased output view"
        );
    }
}

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        /// `c ← alpha·a·b + beta·c` on strided views.
        #[allow(unsafe_code)]
        pub fn $name(alpha: $t, a: MatRef<'_, $t>, b: MatRef<'_, $t>, beta: $t, c: MatMut<'_, $t>) {
            assert_eq!(a.cols, b.rows, "gemm inner dimensions");
            assert_eq!(a.rows, c.rows, "gemm output rows");
            assert_eq!(b.cols, c.cols, "gemm output cols");
            a.check();
            b.check();
            c.check();
            if c.rows == 0 || c.cols == 0 {
                return;
            }
            // SAFETY: every index the kernel touches, (i·rs + j·cs) for i < rows
            // and j < cols, was bounds-checked above against each slice; `c` is a
            // unique borrow with distinct strides, and `a`, `b` are shared borrows
            // that cannot alias it.
            unsafe {
                $kernel(
                    a.rows,
                    a.cols,
                    b.cols,
                    alpha,
                    a.data.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    beta,
                    c.data.as_mut_ptr(),
                    c.row_stride as isize,
                    c.col_stride as isize,
                );
            }
        }
    };
}

gemm_impl!(gemm_f32, f32, matrixmultiply::sgemm);
gemm_impl!(gemm_f64, f64, matrixmultiply::dgemm);

/// Row-major `(m×k)·(k×n)`.
pub fn matmul_f32(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = alloc::vec![0.0f32; m * n];
    gemm_f32(
        1.0,
        MatRef::row_major(a, m, k),
        MatRef::row_major(b, k, n),
        0.0,
        MatMut::row_major(&mut out, m, n),
    );
    out
}

/// In-place lower Cholesky factor of a symmetric positive definite matrix
/// (row-major `n×n`). The strict upper triangle is zeroed.
pub fn cholesky_lower(a: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    for j in 0..n {
        let (upper, lower) = a.split_at_mut((j + 1) * n);
        let row_j = &mut upper[j * n..];
        let d = row_j[j] - dot(&row_j[..j], &row_j[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::SingularHessian {
                column: j,
                pivot: d,
            });
        }
        let ljj = libm::sqrt(d);
        row_j[j] = ljj;
        for v in &mut row_j[j + 1..] {
            *v = 0.0;
        }
        let row_j = &row_j[..j];
        for row_i in lower.chunks_exact_mut(n) {
            row_i[j] = (row_i[j] - dot(&row_i[..j], row_j)) / ljj;
        }
    }
    Ok(())
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_lower(&mut l, n)?;
    // Row j of `yt` holds column j of L⁻¹ (entries j..n).
    let mut yt = alloc::vec![0.0f64; n * n];
    for j in 0..n {
        let row = &mut yt[j * n..(j + 1) * n];
        for i in j..n {
            let li = &l[i * n..i * n + i];
            let acc = if i == j { 1.0 } else { 0.0 } - dot(&li[j..i], &row[j..i]);
            row[i] = acc / l[i * n + i];
        }
    }
    // A⁻¹ = L⁻ᵀL⁻¹ = Yt·Ytᵀ.
    let mut inv = alloc::vec![0.0f64; n * n];
    gemm_f64(
        1.0,
        MatRef::row_major(&yt, n, n),
        MatRef::row_major(&yt, n, n).t(),
        0.0,
        MatMut::row_major(&mut inv, n, n),
    );
    symmetrize(&mut inv, n);
    Ok(inv)
}

/// Upper factor `U` with `A = UᵀU`.
pub fn cholesky_upper(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_lower(&mut l, n)?;
    let mut u = alloc::vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            u[j * n + i] = l[i * n + j];
        }
    }
    Ok(u)
}

pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
}

/// Solves `A·X = B` for square `A` (`n×n`) and `B` (`n×m`), row-major,
/// by Gaussian elimination with partial pivoting. `None` if `A` is
/// numerically singular.
pub fn solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Option<Vec<f64>> {
    let mut a = a.to_vec();
    let mut x = b.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let tiny = scale * 1e-13;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))
            .unwrap();
        if !(a[pivot * n + col].abs() > tiny) {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            for k in 0..m {
                x.swap(col * m + k, pivot * m + k);
            }
        }
        let p = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                x[r * m + k] -= f * x[col * m + k];
            }
        }
    }
    for col in (0..n).rev() {
        let p = a[col * n + col];
        for k in 0..m {
            let mut v = x[col * m + k];
            for j in col + 1..n {
                v -= a[col * n + j] * x[j * m + k];
            }
            x[col * m + k] = v / p;
        }
    }
    Some(x)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four lanes let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
