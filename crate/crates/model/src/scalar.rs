//! Floating-point element type and the dense matrix product everything else
//! is built on. Single precision is used for training and sampling; double
//! precision exists for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// Raw strided product, see [`matrixmultiply::sgemm`].
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the respective buffers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
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
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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

/// Row-major view description of one gemm operand.
#[derive(Clone, Copy, Debug)]
pub struct Op {
    /// Use the transpose of the stored matrix.
    pub t: bool,
    /// Distance between consecutive stored rows.
    pub ld: usize,
}

impl Op {
    pub const fn n(ld: usize) -> Op {
        Op { t: false, ld }
    }

    pub const fn t(ld: usize) -> Op {
        Op { t: true, ld }
    }

    fn strides(self) -> (isize, isize) {
        if self.t {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    /// Elements needed to hold an `rows x cols` view (after transposition).
    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        let (sr, sc) = if self.t { (cols, rows) } else { (rows, cols) };
        (sr - 1) * self.ld + sc
    }
}

/// `c[m x n] = alpha * op(a)[m x k] * op(b)[k x n] + beta * c`, with `c`
/// row-major at leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(m: usize, n: usize, k: usize, alpha: S, a: &[S], oa: Op, b: &[S], ob: Op, beta: S, c: &mut [S], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == S::zero() { S::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.len() >= oa.extent(m, k), "gemm: lhs too short");
    assert!(b.len() >= ob.extent(k, n), "gemm: rhs too short");
    assert!(c.len() >= Op::n(ldc).extent(m, n), "gemm: output too short");
    let (rsa, csa) = oa.strides();
    let (rsb, csb) = ob.strides();
    // SAFETY: extents were checked above and `c` is a distinct &mut borrow.
    unsafe {
        S::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize, 1);
    }
}

/// `y = x * w` for `x: rows x k` and `w: k x n`, all densely packed.
pub fn matmul<S: Scalar>(x: &[S], w: &[S], rows: usize, k: usize, n: usize) -> Vec<S> {
    let mut y = vec![S::zero(); rows * n];
    gemm(rows, n, k, S::one(), x, Op::n(k), w, Op::n(n), S::zero(), &mut y, n);
    y
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
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

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, oa) in [(&a, Op::n(k)), (&at, Op::t(m))] {
            for (bb, ob) in [(&b, Op::n(n)), (&bt, Op::t(k))] {
                let mut c = vec![1.0; m * n];
                gemm(m, n, k, 2.0, aa, oa, bb, ob, 0.5, &mut c, n);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - (2.0 * y + 0.5)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_submatrix() {
        // Multiply the middle two columns of a 2x4 matrix by a 2x1 vector.
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let b = [1.0f32, 1.0];
        let mut c = [0.0f32; 2];
        gemm(2, 1, 2, 1.0, &a[1..], Op::n(4), &b, Op::n(1), 0.0, &mut c, 1);
        assert_eq!(c, [5.0, 13.0]);
    }
}
