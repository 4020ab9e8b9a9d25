use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Environment variable selecting the run precision (`single` or `double`).
    pub const ENV_VAR: &'static str = "USEG_PRECISION";

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!(
                "unknown precision `{other}` (expected single or double)"
            ))),
        }
    }

    /// Reads [`Precision::ENV_VAR`], falling back to `default` when unset.
    pub fn from_env_or(default: Precision) -> Result<Self> {
        match std::env::var(Self::ENV_VAR) {
            Ok(v) if !v.trim().is_empty() => Self::parse(&v),
            _ => Ok(default),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

/// Scalar type of tensors: implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Strides and extents must address memory inside the given slices.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Row-major matrix product `c (+)= op(a) * op(b)` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// row-major layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above cover every address touched by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
