//! Floating-point scalar abstraction shared by the autodiff engine and the
//! optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar the tensor engine can compute with.
///
/// Besides the usual float arithmetic the trait carries a dense GEMM entry
/// point so matrix products can dispatch to a tuned kernel per width.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary
    /// element strides on the operands. `c` is dense row-major `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
    );

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &[T],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);
