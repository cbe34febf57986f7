//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All operators, networks and losses are generic over [`Scalar`]. `f32` is the
//! training default, `f64` is used for gradient checks and reference codecs, and
//! [`Dual`] carries a forward-mode tangent through a reverse-mode pass so that
//! gradient penalties can be differentiated exactly.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use crate::dual::Dual;

/// On-disk element type of a [`Scalar`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    F32,
    F64,
}

/// Floating-point element type usable inside the autodiff tape.
pub trait Scalar:
    Float + FromPrimitive + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + DivAssign + Sum
{
    /// Converts an `f64` constant into this type.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    /// Element type used when parameters are serialized.
    const STORAGE: Storage;

    /// Primal value as `f64` (drops any tangent part).
    fn real(self) -> f64;

    /// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary row/column strides.
    ///
    /// `beta` is 0 (overwrite) or 1 (accumulate).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        naive_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc, accumulate)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn naive_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    rsc: isize,
    csc: isize,
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                acc += av * bv;
            }
            let idx = (i as isize * rsc + j as isize * csc) as usize;
            if accumulate {
                c[idx] += acc;
            } else {
                c[idx] = acc;
            }
        }
    }
}

impl Scalar for f32 {
    const STORAGE: Storage = Storage::F32;
    #[inline]
    fn real(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: callers size the slices for the given shapes and strides; the
        // bounds are asserted in `checked_extent` below.
        checked_extent(m, k, a.len(), rsa, csa);
        checked_extent(k, n, b.len(), rsb, csb);
        checked_extent(m, n, c.len(), rsc, csc);
        unsafe {
            matrixmultiply::sgemm(
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
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    const STORAGE: Storage = Storage::F64;
    #[inline]
    fn real(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        checked_extent(m, k, a.len(), rsa, csa);
        checked_extent(k, n, b.len(), rsb, csb);
        checked_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above.
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
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

fn checked_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand too small: need {} got {len}", last + 1);
}

impl<F: Scalar> Scalar for Dual<F> {
    const STORAGE: Storage = F::STORAGE;
    #[inline]
    fn real(self) -> f64 {
        self.re.real()
    }

    /// Splits into primal and tangent planes: `(a + εa')(b + εb') = ab + ε(a'b + ab')`.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let (a_re, a_eps): (Vec<F>, Vec<F>) = a.iter().map(|d| (d.re, d.eps)).unzip();
        let (b_re, b_eps): (Vec<F>, Vec<F>) = b.iter().map(|d| (d.re, d.eps)).unzip();
        // Output planes are packed row-major so the three products can accumulate.
        let mut c_re = vec![F::zero(); m * n];
        let mut c_eps = vec![F::zero(); m * n];
        let (rc, cc) = (n as isize, 1isize);
        F::gemm(m, k, n, &a_re, rsa, csa, &b_re, rsb, csb, &mut c_re, rc, cc, false);
        F::gemm(m, k, n, &a_eps, rsa, csa, &b_re, rsb, csb, &mut c_eps, rc, cc, false);
        F::gemm(m, k, n, &a_re, rsa, csa, &b_eps, rsb, csb, &mut c_eps, rc, cc, true);
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                let v = Dual::new(c_re[i * n + j], c_eps[i * n + j]);
                if accumulate {
                    c[idx] += v;
                } else {
                    c[idx] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_case<T: Scalar>() {
        // [2x3] * [3x2]
        let a: Vec<T> = [1., 2., 3., 4., 5., 6.].iter().map(|&v| T::of(v)).collect();
        let b: Vec<T> = [7., 8., 9., 10., 11., 12.].iter().map(|&v| T::of(v)).collect();
        let mut c = vec![T::zero(); 4];
        T::gemm(2, 3, 2, &a, 3, 1, &b, 2, 1, &mut c, 2, 1, false);
        let want = [58., 64., 139., 154.];
        for (got, w) in c.iter().zip(want) {
            assert_eq!(got.real(), w);
        }
        // transposed a via strides: aᵀ is [3x2]
        let mut c2 = vec![T::zero(); 9];
        T::gemm(3, 2, 3, &a, 1, 3, &a, 3, 1, &mut c2, 3, 1, false);
        assert_eq!(c2[0].real(), 1. + 16.);
        assert_eq!(c2[4].real(), 4. + 25.);
    }

    #[test]
    fn gemm_all_scalars() {
        gemm_case::<f32>();
        gemm_case::<f64>();
        gemm_case::<Dual<f64>>();
    }

    #[test]
    fn dual_gemm_tangent() {
        let a = vec![Dual::new(1.0, 1.0), Dual::new(2.0, 0.0)];
        let b = vec![Dual::new(3.0, 0.0), Dual::new(4.0, 2.0)];
        let mut c = vec![Dual::new(0.0, 0.0)];
        Dual::<f64>::gemm(1, 2, 1, &a, 2, 1, &b, 1, 1, &mut c, 1, 1, false);
        // 1*3 + 2*4 = 11 ; tangent 1*3 + 2*2 = 7
        assert_eq!(c[0], Dual::new(11.0, 7.0));
        let mut naive = vec![Dual::new(0.0, 0.0)];
        naive_gemm(1, 2, 1, &a, 2, 1, &b, 1, 1, &mut naive, 1, 1, false);
        assert_eq!(naive, c);
    }
}
