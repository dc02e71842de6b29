use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Real scalar the whole codec is generic over.
///
/// Training and inference run in `f32`; gradient verification runs the same
/// code paths in `f64`.
pub trait Scalar:
    Float + FftNum + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Tag written into checkpoints and reported by tensors.
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for strided row/column-major operands.
    ///
    /// `a` is m×k, `b` is k×n and `c` is m×n; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

/// Element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Real32,
    Real64,
    Complex64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Real64 => 1,
            DType::Complex64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::Real32),
            1 => Some(DType::Real64),
            2 => Some(DType::Complex64),
            _ => None,
        }
    }
}

// Largest offset touched by a strided matrix, used to bounds-check the raw gemm call.
fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides));
                assert!(b.len() >= extent(k, n, b_strides));
                assert!(c.len() >= extent(m, n, c_strides));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every offset reachable through the given shapes and strides
                // lies inside the slices, checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, DType::Real32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::Real64, matrixmultiply::dgemm);
