//! Dense f64 factorizations backing the Hessian-guided weight sweep.
//!
//! Matrices are row-major `Vec<f64>` with explicit dimension. Only the sizes
//! arising from unfolded decoder layers are targeted (n up to a few
//! thousand), so the kernels are plain inner-product loops that the compiler
//! vectorizes; no external BLAS.

use crate::error::{Error, Result};

/// In-place lower Cholesky of a symmetric positive definite matrix.
/// The strict upper triangle of the output is zeroed. Fails with the pivot
/// index when a non-positive diagonal is met.
pub fn cholesky_lower(a: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    for j in 0..n {
        let (head, tail) = a.split_at_mut(j * n + j);
        let row_j = &head[j * n..]; // first j entries of row j
        let mut d = tail[0];
        for v in row_j.iter() {
            d -= v * v;
        }
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::CholeskyFailed { pivot: j });
        }
        let d = d.sqrt();
        tail[0] = d;
        for i in j + 1..n {
            let (upper, lower) = a.split_at_mut(i * n);
            let row_j = &upper[j * n..j * n + j];
            let row_i = &lower[..j];
            let mut s = lower[j];
            for (x, y) in row_i.iter().zip(row_j.iter()) {
                s -= x * y;
            }
            lower[j] = s / d;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Inverse of a lower-triangular matrix (nonzero diagonal assumed).
pub fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(l.len(), n * n);
    let mut x = vec![0.0f64; n * n];
    for j in 0..n {
        x[j * n + j] = 1.0 / l[j * n + j];
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * x[k * n + j];
            }
            x[i * n + j] = -s / l[i * n + i];
        }
    }
    x
}

/// Inverse of an upper-triangular matrix (nonzero diagonal assumed).
/// Accumulates into the transposed inverse so both inner-loop operands are
/// row-contiguous, then transposes once at the end.
pub fn invert_upper(u: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(u.len(), n * n);
    // xt[j * n + k] = X[k][j]
    let mut xt = vec![0.0f64; n * n];
    for j in (0..n).rev() {
        xt[j * n + j] = 1.0 / u[j * n + j];
        for i in (0..j).rev() {
            let mut s = 0.0;
            let u_row = &u[i * n + i + 1..i * n + j + 1];
            let x_col = &xt[j * n + i + 1..j * n + j + 1];
            for (a, b) in u_row.iter().zip(x_col.iter()) {
                s += a * b;
            }
            xt[j * n + i] = -s / u[i * n + i];
        }
    }
    let mut x = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            x[i * n + j] = xt[j * n + i];
        }
    }
    x
}

/// Upper factor `U` with `H^-1 = U^T U`, i.e. the transpose of the lower
/// Cholesky factor of the inverse Hessian — the matrix the greedy sweep
/// consumes.
///
/// Computed without forming `H^-1`: reverse-permute `H`, take its lower
/// Cholesky `L_r`, un-reverse it into the upper factor `Ũ` of `H = Ũ Ũ^T`,
/// and invert; `U = Ũ^-1`. This is algebraically identical to
/// `chol(inv(H))^T` (both are the unique positive-diagonal factor) at half
/// the flops.
pub fn inv_cholesky_upper(h: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(h.len(), n * n);
    let mut rev = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            rev[i * n + j] = h[(n - 1 - i) * n + (n - 1 - j)];
        }
    }
    cholesky_lower(&mut rev, n).map_err(|e| match e {
        Error::CholeskyFailed { pivot } => Error::CholeskyFailed { pivot: n - 1 - pivot },
        other => other,
    })?;
    let mut upper = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            upper[i * n + j] = rev[(n - 1 - i) * n + (n - 1 - j)];
        }
    }
    Ok(invert_upper(&upper, n))
}

/// Reference route for [`inv_cholesky_upper`]: explicitly forms `H^-1` from
/// the Cholesky factor of `H` and factorizes it again. Kept as the
/// independent cross-check of the cheaper reverse-permutation route.
pub fn inv_cholesky_upper_reference(h: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = h.to_vec();
    cholesky_lower(&mut l, n)?;
    let k = invert_lower(&l, n); // K = L^-1, H^-1 = K^T K
    let mut hinv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for kk in j..n {
                s += k[kk * n + i] * k[kk * n + j];
            }
            hinv[i * n + j] = s;
            hinv[j * n + i] = s;
        }
    }
    cholesky_lower(&mut hinv, n)?;
    // U = L2^T
    let mut u = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            u[i * n + j] = hinv[j * n + i];
        }
    }
    Ok(u)
}

/// Max |a - b| over two equally sized buffers.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
