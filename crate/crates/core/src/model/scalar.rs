//! Floating-point element trait and a bounds-checked strided GEMM.
//!
//! Training and inference run in `f32`; gradient checks run the same code in
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe matrices that lie entirely inside
    /// live allocations; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A row-major matrix view with unit column stride and row stride `rs`,
/// optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub trans: bool,
}

impl<'a, F> MatRef<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            trans: false,
        }
    }

    /// Columns `col..col + width` of a matrix with row stride `rs`.
    pub fn cols_of(data: &'a [F], rows: usize, rs: usize, col: usize, width: usize) -> Self {
        Self {
            data: &data[col.min(data.len())..],
            rows,
            cols: width,
            rs,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            assert!(
                (self.rows - 1) * self.rs + self.cols <= self.data.len(),
                "matrix view out of bounds"
            );
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rs as isize)
        } else {
            (self.rs as isize, 1)
        }
    }
}

pub struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
}

impl<'a, F> MatMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
        }
    }

    pub fn cols_of(data: &'a mut [F], rows: usize, rs: usize, col: usize, width: usize) -> Self {
        let start = col.min(data.len());
        Self {
            data: &mut data[start..],
            rows,
            cols: width,
            rs,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<F: Scalar>(c: MatMut<'_, F>, a: MatRef<'_, F>, b: MatRef<'_, F>, alpha: F, beta: F) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    a.check();
    b.check();
    if m > 0 && n > 0 {
        assert!((m - 1) * c.rs + n <= c.data.len(), "output view out of bounds");
    }
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c.data[i * c.rs..i * c.rs + n] {
                *v = if beta == F::zero() { F::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three views were bounds-checked above, and `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        F::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_plain_and_transposed() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(
            MatMut::new(&mut c, 2, 4),
            MatRef::new(&a, 2, 3),
            MatRef::new(&b, 3, 4),
            1.0,
            0.0,
        );
        assert_eq!(c, naive(&a, &b, 2, 3, 4));

        // a^T stored as 3x2.
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0];
        let mut c2 = vec![1.0; 8];
        gemm(
            MatMut::new(&mut c2, 2, 4),
            MatRef::new(&at, 3, 2).t(),
            MatRef::new(&b, 3, 4),
            1.0,
            1.0,
        );
        let want: Vec<f64> = naive(&a, &b, 2, 3, 4).iter().map(|v| v + 1.0).collect();
        assert_eq!(c2, want);
    }

    #[test]
    fn gemm_column_slices() {
        // Multiply the middle two columns of a 2x4 matrix by a 2x2 identity.
        let a: Vec<f32> = vec![1., 2., 3., 4., 5., 6., 7., 8.];
        let eye: Vec<f32> = vec![1., 0., 0., 1.];
        let mut out = vec![0f32; 8];
        gemm(
            MatMut::cols_of(&mut out, 2, 4, 1, 2),
            MatRef::cols_of(&a, 2, 4, 1, 2),
            MatRef::new(&eye, 2, 2),
            1.0,
            0.0,
        );
        assert_eq!(out, vec![0., 2., 3., 0., 0., 6., 7., 0.]);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn gemm_rejects_short_buffers() {
        let a = vec![0f32; 5];
        let b = vec![0f32; 4];
        let mut c = vec![0f32; 4];
        gemm(
            MatMut::new(&mut c, 2, 2),
            MatRef::new(&a, 2, 3),
            MatRef::new(&b, 3, 2),
            1.0,
            0.0,
        );
    }
}
