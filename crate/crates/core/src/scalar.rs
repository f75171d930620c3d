use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point element type used by volumes, tensors and networks: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; always succeeds for finite inputs.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Name written into checkpoints so a file is never loaded at the wrong precision.
    const NAME: &'static str;

    /// `C = A B + beta C` for an `m x k` matrix `A` and a `k x n` matrix `B`.
    /// Each matrix is given as a slice with (row, column) strides.
    fn gemm(m: usize, k: usize, n: usize, a: Mat<Self>, b: Mat<Self>, beta: Self, c: MatMut<Self>);
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

/// A strided mutable matrix view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rs: usize,
    pub cs: usize,
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "matrix view exceeds its buffer");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(m: usize, k: usize, n: usize, a: Mat<Self>, b: Mat<Self>, beta: Self, c: MatMut<Self>) {
                check_extent(a.data.len(), m, k, a.rs, a.cs);
                check_extent(b.data.len(), k, n, b.rs, b.cs);
                check_extent(c.data.len(), m, n, c.rs, c.cs);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every accessed element lies inside its slice (checked above) and
                // `c` is borrowed mutably, so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.data.as_ptr(), a.rs as isize, a.cs as isize,
                        b.data.as_ptr(), b.rs as isize, b.cs as isize,
                        beta,
                        c.data.as_mut_ptr(), c.rs as isize, c.cs as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
