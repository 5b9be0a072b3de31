//! Dense eigensolver for real nonsymmetric matrices.
//!
//! Pipeline: diagonal balancing, Householder reduction to upper Hessenberg
//! form, Francis double-shift QR to real Schur form with accumulated Schur
//! vectors, then eigenvectors of the quasi-triangular factor by complex
//! back-substitution. Left eigenvectors are the rows of the inverse of the
//! right-eigenvector matrix, which makes the two sets biorthonormal.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

pub type C64 = Complex<f64>;

const MAX_ITER_PER_EIGENVALUE: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("QR iteration did not converge on an active {size}x{size} block after {iterations} iterations")]
    NoConvergence { size: usize, iterations: usize },
    #[error("eigenvector matrix is singular; the matrix is defective or nearly so")]
    Defective,
}

/// Raw output of [`decompose`].
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C64>,
    /// Right eigenvectors as columns, scaled so their largest entry is 1.
    pub right: DMatrix<C64>,
    /// Left eigenvectors as rows; `left * right = I`.
    pub left: DMatrix<C64>,
}

/// Parlett-Reinsch diagonal scaling by powers of two. Returns `D` with
/// `A <- D^-1 A D` applied in place.
fn balance(a: &mut DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut scale = vec![1.0; n];
    loop {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / 2.0;
            while c < g {
                f *= 2.0;
                c *= 4.0;
            }
            g = r * 2.0;
            while c >= g {
                f /= 2.0;
                c /= 4.0;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                scale[i] *= f;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
        if done {
            return scale;
        }
    }
}

/// Householder reduction to Hessenberg form, returning the orthogonal factor.
fn hessenberg(a: &mut DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut q = DMatrix::identity(n, n);
    if n < 3 {
        return q;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let norm = (k + 1..n).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[(k + 1, k)] > 0.0 { -norm } else { norm };
        for i in k + 1..n {
            v[i] = a[(i, k)];
        }
        v[k + 1] -= alpha;
        let vnorm2: f64 = (k + 1..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // A <- (I - beta v v^T) A
        for j in k..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * a[(i, j)]).sum();
            let f = beta * dot;
            for i in k + 1..n {
                a[(i, j)] -= f * v[i];
            }
        }
        // A <- A (I - beta v v^T), Q <- Q (I - beta v v^T)
        for mat in [&mut *a, &mut q] {
            for i in 0..n {
                let dot: f64 = (k + 1..n).map(|j| mat[(i, j)] * v[j]).sum();
                let f = beta * dot;
                for j in k + 1..n {
                    mat[(i, j)] -= f * v[j];
                }
            }
        }
        a[(k + 1, k)] = alpha;
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
    q
}

/// Francis double-shift QR on a Hessenberg matrix, reducing it in place to
/// real Schur form `T` and accumulating the transformations into `z`.
fn real_schur(h: &mut DMatrix<f64>, z: &mut DMatrix<f64>) -> Result<(), EigenError> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let norm: f64 = h.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut hi = n - 1;
    let mut iter = 0usize;

    loop {
        // Deflation: locate the start of the active unreduced block.
        let mut lo = hi;
        while lo > 0 {
            let mut s = h[(lo - 1, lo - 1)].abs() + h[(lo, lo)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(lo, lo - 1)].abs() < eps * s {
                h[(lo, lo - 1)] = 0.0;
                break;
            }
            lo -= 1;
        }

        if lo == hi {
            iter = 0;
            if hi == 0 {
                break;
            }
            hi -= 1;
            continue;
        }

        if lo + 1 == hi {
            split_2x2(h, z, hi);
            iter = 0;
            if hi < 2 {
                break;
            }
            hi -= 2;
            continue;
        }

        iter += 1;
        if iter > MAX_ITER_PER_EIGENVALUE {
            return Err(EigenError::NoConvergence { size: hi - lo + 1, iterations: iter - 1 });
        }

        // Shift polynomial x^2 - s x + t.
        let (s, t) = if iter.is_multiple_of(10) {
            let w = h[(hi, hi - 1)].abs() + h[(hi - 1, hi - 2)].abs();
            let d = 0.75 * w + h[(hi, hi)];
            (2.0 * d, d * d + 0.4375 * w * w)
        } else {
            let a = h[(hi - 1, hi - 1)];
            let b = h[(hi - 1, hi)];
            let c = h[(hi, hi - 1)];
            let d = h[(hi, hi)];
            (a + d, a * d - b * c)
        };

        // Look for two consecutive small subdiagonal elements.
        let mut m = hi - 2;
        let (mut p, mut q, mut r);
        loop {
            let h00 = h[(m, m)];
            let h10 = h[(m + 1, m)];
            let h11 = h[(m + 1, m + 1)];
            p = h00 * h00 + h[(m, m + 1)] * h10 - s * h00 + t;
            q = h10 * (h00 + h11 - s);
            r = h10 * h[(m + 2, m + 1)];
            let scale = p.abs() + q.abs() + r.abs();
            if scale != 0.0 {
                p /= scale;
                q /= scale;
                r /= scale;
            }
            if m == lo {
                break;
            }
            let lhs = h[(m, m - 1)].abs() * (q.abs() + r.abs());
            let rhs = eps * p.abs() * (h[(m - 1, m - 1)].abs() + h00.abs() + h11.abs());
            if lhs < rhs {
                break;
            }
            m -= 1;
        }

        for i in m + 2..=hi {
            h[(i, i - 2)] = 0.0;
            if i > m + 2 {
                h[(i, i - 3)] = 0.0;
            }
        }

        // Chase the bulge.
        for k in m..hi {
            let last = k == hi - 1;
            let mut bulge_scale = 0.0;
            if k != m {
                p = h[(k, k - 1)];
                q = h[(k + 1, k - 1)];
                r = if last { 0.0 } else { h[(k + 2, k - 1)] };
                bulge_scale = p.abs() + q.abs() + r.abs();
                if bulge_scale == 0.0 {
                    continue;
                }
                p /= bulge_scale;
                q /= bulge_scale;
                r /= bulge_scale;
            }
            let mut s = (p * p + q * q + r * r).sqrt();
            if p < 0.0 {
                s = -s;
            }
            if s == 0.0 {
                continue;
            }
            if k != m {
                h[(k, k - 1)] = -s * bulge_scale;
                h[(k + 1, k - 1)] = 0.0;
                if !last {
                    h[(k + 2, k - 1)] = 0.0;
                }
            } else if lo != m {
                h[(k, k - 1)] = -h[(k, k - 1)];
            }
            p += s;
            let x = p / s;
            let y = q / s;
            let zz = r / s;
            q /= p;
            r /= p;

            for j in k..n {
                let mut pp = h[(k, j)] + q * h[(k + 1, j)];
                if !last {
                    pp += r * h[(k + 2, j)];
                    h[(k + 2, j)] -= pp * zz;
                }
                h[(k, j)] -= pp * x;
                h[(k + 1, j)] -= pp * y;
            }
            let top = hi.min(k + 3);
            for i in 0..=top {
                let mut pp = x * h[(i, k)] + y * h[(i, k + 1)];
                if !last {
                    pp += zz * h[(i, k + 2)];
                    h[(i, k + 2)] -= pp * r;
                }
                h[(i, k)] -= pp;
                h[(i, k + 1)] -= pp * q;
            }
            for i in 0..n {
                let mut pp = x * z[(i, k)] + y * z[(i, k + 1)];
                if !last {
                    pp += zz * z[(i, k + 2)];
                    z[(i, k + 2)] -= pp * r;
                }
                z[(i, k)] -= pp;
                z[(i, k + 1)] -= pp * q;
            }
        }
    }

    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Handles a converged trailing 2x2 block at rows `hi-1..=hi`: real pairs are
/// rotated to upper-triangular form, complex pairs are left as a block.
fn split_2x2(h: &mut DMatrix<f64>, z: &mut DMatrix<f64>, hi: usize) {
    let n = h.nrows();
    let lo = hi - 1;
    let w = h[(hi, lo)] * h[(lo, hi)];
    let p = (h[(lo, lo)] - h[(hi, hi)]) / 2.0;
    let disc = p * p + w;
    if disc < 0.0 {
        return;
    }
    let root = disc.sqrt();
    let zeta = if p >= 0.0 { p + root } else { p - root };
    let x = h[(hi, lo)];
    let s = x.abs() + zeta.abs();
    if s == 0.0 {
        return;
    }
    let (mut ps, mut qs) = (x / s, zeta / s);
    let rr = (ps * ps + qs * qs).sqrt();
    ps /= rr;
    qs /= rr;
    for j in lo..n {
        let t = h[(lo, j)];
        h[(lo, j)] = qs * t + ps * h[(hi, j)];
        h[(hi, j)] = qs * h[(hi, j)] - ps * t;
    }
    for i in 0..=hi {
        let t = h[(i, lo)];
        h[(i, lo)] = qs * t + ps * h[(i, hi)];
        h[(i, hi)] = qs * h[(i, hi)] - ps * t;
    }
    for i in 0..n {
        let t = z[(i, lo)];
        z[(i, lo)] = qs * t + ps * z[(i, hi)];
        z[(i, hi)] = qs * z[(i, hi)] - ps * t;
    }
    h[(hi, lo)] = 0.0;
}

/// Eigenvalues of the quasi-triangular Schur factor, with the position of
/// each one's diagonal block.
fn schur_eigenvalues(t: &DMatrix<f64>) -> Vec<(C64, usize)> {
    let n = t.nrows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let p = 0.5 * (a - d);
            let disc = p * p + b * c;
            let re = 0.5 * (a + d);
            let im = (-disc).max(0.0).sqrt();
            out.push((C64::new(re, im), i + 1));
            out.push((C64::new(re, -im), i + 1));
            i += 2;
        } else {
            out.push((C64::new(t[(i, i)], 0.0), i));
            i += 1;
        }
    }
    out
}

/// Eigenvector of the quasi-triangular `t` for `lambda`, whose diagonal
/// block ends at row `k`. Entries below the block are zero.
fn schur_eigenvector(t: &DMatrix<f64>, lambda: C64, k: usize, small: f64) -> DVector<C64> {
    let n = t.nrows();
    let mut y = DVector::from_element(n, C64::new(0.0, 0.0));
    let in_block = k > 0 && t[(k, k - 1)] != 0.0;
    let start = if in_block {
        let a = t[(k - 1, k - 1)] - lambda;
        let b = C64::new(t[(k - 1, k)], 0.0);
        let c = C64::new(t[(k, k - 1)], 0.0);
        let d = t[(k, k)] - lambda;
        if a.norm() + b.norm() >= c.norm() + d.norm() {
            y[k - 1] = -b;
            y[k] = a;
        } else {
            y[k - 1] = -d;
            y[k] = c;
        }
        k - 1
    } else {
        y[k] = C64::new(1.0, 0.0);
        k
    };

    let guard = |den: C64| if den.norm() < small { C64::new(small, 0.0) } else { den };
    let mut i = start;
    while i > 0 {
        let row = i - 1;
        let rhs = |r: usize, y: &DVector<C64>| -> C64 {
            let mut acc = C64::new(0.0, 0.0);
            for j in r + 1..=k {
                acc += y[j] * t[(r, j)];
            }
            -acc
        };
        if row > 0 && t[(row, row - 1)] != 0.0 {
            let top = row - 1;
            // Rows top and row form a 2x2 block; both right-hand sides only
            // involve already-solved entries beyond `row`.
            let r1 = rhs(top, &y);
            let r2 = rhs(row, &y);
            let a = t[(top, top)] - lambda;
            let b = C64::new(t[(top, row)], 0.0);
            let c = C64::new(t[(row, top)], 0.0);
            let d = t[(row, row)] - lambda;
            let det = guard(a * d - b * c);
            y[top] = (r1 * d - b * r2) / det;
            y[row] = (a * r2 - c * r1) / det;
            i = top;
        } else {
            let den = guard(t[(row, row)] - lambda);
            y[row] = rhs(row, &y) / den;
            i = row;
        }
        let big = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if big > 1e100 {
            y /= C64::new(big, 0.0);
        }
    }
    y
}

/// Scales `v` by its entry of largest modulus (first one on ties).
fn normalize_max(v: &mut DVector<C64>) {
    let mut best = 0;
    let mut best_norm = -1.0;
    for (i, x) in v.iter().enumerate() {
        let nrm = x.norm();
        if nrm > best_norm * (1.0 + 1e-12) {
            best = i;
            best_norm = nrm;
        }
    }
    if best_norm > 0.0 {
        let pivot = v[best];
        *v /= pivot;
    }
}

/// Full eigendecomposition of a real square matrix.
pub fn decompose(a: &DMatrix<f64>) -> Result<Eigen, EigenError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(EigenError::NotSquare { rows, cols });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(EigenError::NonFinite);
    }
    let n = rows;
    let mut h = a.clone();
    let scale = balance(&mut h);
    let mut z = hessenberg(&mut h);
    real_schur(&mut h, &mut z)?;

    let tnorm = h.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * tnorm;
    let mut eig = schur_eigenvalues(&h);
    eig.sort_by(|(x, _), (y, _)| {
        y.norm()
            .partial_cmp(&x.norm())
            .unwrap()
            .then(y.im.partial_cmp(&x.im).unwrap())
            .then(y.re.partial_cmp(&x.re).unwrap())
    });

    let mut right = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let z_c = z.map(|v| C64::new(v, 0.0));
    for (col, &(lambda, k)) in eig.iter().enumerate() {
        let y = if lambda.im < 0.0 {
            schur_eigenvector(&h, lambda.conj(), k, small).map(|v| v.conj())
        } else {
            schur_eigenvector(&h, lambda, k, small)
        };
        let mut x = &z_c * y;
        for (xi, d) in x.iter_mut().zip(&scale) {
            *xi *= *d;
        }
        normalize_max(&mut x);
        right.set_column(col, &x);
    }
    let left = right.clone().try_inverse().ok_or(EigenError::Defective)?;
    if left.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(EigenError::Defective);
    }
    Ok(Eigen { values: eig.into_iter().map(|(v, _)| v).collect(), right, left })
}
