use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

/// Element type of tensors. Storage is `f32`; `f64` exists for gradient checks.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Converts a literal, rounding to the nearest representable value.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// `C ← A·B + beta·C` for an `m×k` by `k×n` product, each matrix given by
    /// a row and a column stride into its slice.
    fn gemm(dims: [usize; 3], a: (&[Self], [isize; 2]), b: (&[Self], [isize; 2]), c: (&mut [Self], [isize; 2]), beta: Self);
}

/// Largest element offset of a strided matrix, checked against its slice.
fn check_extent(rows: usize, cols: usize, [rs, cs]: [isize; 2], len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "strided matrix exceeds its buffer");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                [m, k, n]: [usize; 3],
                (a, sa): (&[Self], [isize; 2]),
                (b, sb): (&[Self], [isize; 2]),
                (c, sc): (&mut [Self], [isize; 2]),
                beta: Self,
            ) {
                check_extent(m, k, sa, a.len());
                check_extent(k, n, sb, b.len());
                check_extent(m, n, sc, c.len());
                // SAFETY: every index the kernel touches is below the extents
                // checked above.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], beta, c.as_mut_ptr(), sc[0],
                        sc[1],
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
