//! Thin row-major wrappers over `matrixmultiply`.

use super::Real;

/// Index of the last element addressed by a `rows×cols` view.
fn last(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    a: usize,
    rsb: isize,
    csb: isize,
    b: usize,
    rsc: usize,
    c: usize,
) {
    assert!(
        rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0,
        "gemm: negative stride"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(
            last(m, k, rsa, csa) < a,
            "gemm: lhs view exceeds {a} elements"
        );
        assert!(
            last(k, n, rsb, csb) < b,
            "gemm: rhs view exceeds {b} elements"
        );
    }
    assert!(
        last(m, n, rsc as isize, 1) < c,
        "gemm: out view exceeds {c} elements"
    );
}

/// `c (m×n, row stride rsc) = a (m×k, row stride rsa) · b (k×n) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(super) fn nn_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    b: &[T],
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    T::gemm(m, k, n, a, rsa as isize, 1, b, n as isize, 1, beta, c, rsc);
}

/// `c (m×n) = a · b + beta·c`, all contiguous.
pub(super) fn nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    nn_strided(m, k, n, a, k, b, beta, c, n);
}

/// `c (m×n) = aᵀ · b + beta·c` where `a` is stored k×m and `b` has row stride `rsb`.
#[allow(clippy::too_many_arguments)]
pub(super) fn tn_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    rsb: usize,
    beta: T,
    c: &mut [T],
) {
    T::gemm(m, k, n, a, 1, m as isize, b, rsb as isize, 1, beta, c, n);
}

/// `c (m×n) = aᵀ · b + beta·c` where `a` is stored k×m.
pub(super) fn tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    tn_strided(m, k, n, a, b, n, beta, c);
}

/// `c (m×n) = a · bᵀ + beta·c` where `a` (m×k) has row stride `rsa` and
/// `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub(super) fn nt_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    T::gemm(m, k, n, a, rsa as isize, 1, b, 1, k as isize, beta, c, n);
}

/// `c (m×n) = a · bᵀ + beta·c` where `b` is stored n×k.
pub(super) fn nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    nt_strided(m, k, n, a, k, b, beta, c);
}
