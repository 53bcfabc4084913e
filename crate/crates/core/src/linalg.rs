//! Small dense K×K kernels. Square matrices are row-major `Vec<f64>`;
//! factor matrices are column-major K×S (one K-vector per entity).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter added to the diagonal when a Cholesky factorization fails.
pub const JITTER: f64 = 1e-10;
/// How many times the jitter is added before giving up.
pub const JITTER_RETRIES: usize = 3;

/// `M Mᵀ` for a column-major K×S matrix.
pub fn gram(m: &[f64], k: usize) -> Vec<f64> {
    let mut g = vec![0.0; k * k];
    for col in m.chunks_exact(k) {
        add_outer(&mut g, col, 1.0);
    }
    // mirror the upper triangle
    for r in 0..k {
        for c in 0..r {
            g[r * k + c] = g[c * k + r];
        }
    }
    g
}

/// Adds `scale * v vᵀ` into the upper triangle of `a`.
#[inline]
fn add_outer(a: &mut [f64], v: &[f64], scale: f64) {
    let k = v.len();
    for r in 0..k {
        let s = scale * v[r];
        if s == 0.0 {
            continue;
        }
        let row = &mut a[r * k..(r + 1) * k];
        for c in r..k {
            row[c] += s * v[c];
        }
    }
}

/// Adds `scale * v vᵀ` into the full symmetric matrix `a`.
#[inline]
pub fn add_scaled_outer(a: &mut [f64], v: &[f64], scale: f64) {
    let k = v.len();
    for r in 0..k {
        let s = scale * v[r];
        let row = &mut a[r * k..(r + 1) * k];
        for (dst, &vc) in row.iter_mut().zip(v) {
            *dst += s * vc;
        }
    }
}

pub fn hadamard_assign(acc: &mut [f64], other: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a *= b;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = A x` for a row-major K×K matrix.
#[inline]
pub fn sym_matvec(a: &[f64], x: &[f64], y: &mut [f64]) {
    let k = x.len();
    for (r, out) in y.iter_mut().enumerate() {
        *out = dot(&a[r * k..(r + 1) * k], x);
    }
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky,
/// retrying with `JITTER·I` added up to `JITTER_RETRIES` times.
pub fn spd_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let k = b.len();
    let mut m = DMatrix::from_row_slice(k, k, a);
    let rhs = DVector::from_column_slice(b);
    for attempt in 0..=JITTER_RETRIES {
        if attempt > 0 {
            for i in 0..k {
                m[(i, i)] += JITTER;
            }
        }
        if let Some(chol) = m.clone().cholesky() {
            let x = chol.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x.as_slice().to_vec());
            }
        }
    }
    Err(Error::NotPositiveDefinite)
}

/// Lower-triangular `L` with `L Lᵀ = A` for a symmetric positive
/// semidefinite row-major `A`.
///
/// Pivots that vanish (relative to the largest diagonal entry) produce a
/// zero column instead of failing, provided the rest of that column also
/// vanishes; a rank-deficient `A` therefore factors exactly. A negative
/// pivot, or a zero pivot with a nonzero remainder, triggers the jitter
/// retries before failing with [`Error::NotPositiveDefinite`].
pub fn psd_cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut work = a.to_vec();
    for attempt in 0..=JITTER_RETRIES {
        if attempt > 0 {
            for i in 0..n {
                work[i * n + i] += JITTER;
            }
        }
        if let Some(l) = try_psd_cholesky(&work, n, tol) {
            return Ok(l);
        }
    }
    Err(Error::NotPositiveDefinite)
}

fn try_psd_cholesky(a: &[f64], n: usize, tol: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !d.is_finite() || d < -tol {
            return None;
        }
        if d <= tol {
            // zero pivot: the remaining column must vanish too
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                if s.abs() > tol {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}
