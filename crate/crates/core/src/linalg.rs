//! Strided GEMM over row-major buffers.
//!
//! Transposed operands are expressed as strides, never materialized. The
//! kernel is single threaded, so results are bitwise reproducible for a given
//! shape on a given machine.

/// How a row-major buffer is viewed as a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum View {
    /// Buffer holds the operand as `[rows, cols]`.
    Normal,
    /// Buffer holds the transpose of the operand, i.e. `[cols, rows]`.
    Trans,
}

impl View {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            View::Normal => (cols as isize, 1),
            View::Trans => (1, rows as isize),
        }
    }
}

/// `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`, each
/// stored according to its [`View`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_view: View,
    b: &[f64],
    b_view: View,
    beta: f64,
    c: &mut [f64],
    c_view: View,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_view.strides(m, k);
    let (rsb, csb) = b_view.strides(k, n);
    let (rsc, csc) = c_view.strides(m, n);
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides lies inside the corresponding slice, and
    // `c` is uniquely borrowed.
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

/// Convenience: fresh `m×n` product.
pub(crate) fn matmul_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_view: View,
    b: &[f64],
    b_view: View,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, a_view, b, b_view, 0.0, &mut c, View::Normal);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn all_views_agree_with_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (av, abuf) in [(View::Normal, &a), (View::Trans, &at)] {
            for (bv, bbuf) in [(View::Normal, &b), (View::Trans, &bt)] {
                let got = matmul_new(m, k, n, abuf, av, bbuf, bv);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-13);
                }
            }
        }
        let mut ct = vec![0.0; m * n];
        gemm(m, k, n, &a, View::Normal, &b, View::Normal, 0.0, &mut ct, View::Trans);
        assert_eq!(transpose(n, m, &ct).len(), want.len());
        for (g, w) in transpose(n, m, &ct).iter().zip(&want) {
            assert!((g - w).abs() < 1e-13);
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, View::Normal, &b, View::Normal, 1.0, &mut c, View::Normal);
        assert_eq!(c[0], 21.0);
    }
}
