//! Eigenvalues of small dense real matrices.
//!
//! Householder reduction to upper Hessenberg form followed by the Francis
//! implicit double-shift QR iteration with deflation. Every eigenvalue is
//! checked afterwards by inverse iteration: the backward residual
//! `‖M·v − λ·v‖ / ‖v‖` is reported and eigenvalues whose residual exceeds
//! [`RESIDUAL_TOL`] (scaled by `max(1, max|Mᵢⱼ|)`) are flagged rather than
//! silently trusted.

#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Residual bound for an accepted eigenpair, relative to `max(1, max|Mᵢⱼ|)`.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Largest supported dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EigenError {
    #[error("matrix must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension {0} exceeds the supported maximum of {MAX_DIM}")]
    TooLarge(usize),
    #[error("matrix has non-finite entries")]
    NotFinite,
    #[error("QR iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
}

/// All eigenvalues of a matrix together with their verification residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Sorted by real part, then imaginary part.
    pub eigenvalues: Vec<Complex64>,
    pub residuals: Vec<f64>,
    /// `true` where the residual check failed.
    pub flagged: Vec<bool>,
}

impl Spectrum {
    pub fn is_verified(&self) -> bool {
        !self.flagged.iter().any(|&f| f)
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Largest real part.
    pub fn abscissa(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Computes every eigenvalue of a square real matrix of dimension ≤ 8.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Spectrum, EigenError> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(EigenError::NotSquare {
            rows: n,
            cols: m.ncols(),
        });
    }
    if n > MAX_DIM {
        return Err(EigenError::TooLarge(n));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EigenError::NotFinite);
    }
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: vec![],
            residuals: vec![],
            flagged: vec![],
        });
    }

    let mut h = m.clone();
    hessenberg(&mut h);
    let mut vals = francis_qr(h)?;
    vals.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));

    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let residuals: Vec<f64> = vals.iter().map(|&z| residual(m, z, scale)).collect();
    let flagged = residuals.iter().map(|&r| !(r <= RESIDUAL_TOL * scale)).collect();
    Ok(Spectrum {
        eigenvalues: vals,
        residuals,
        flagged,
    })
}

/// In-place Householder reduction to upper Hessenberg form.
fn hessenberg(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    if n < 3 {
        return;
    }
    for k in 0..n - 2 {
        let alpha_norm = (k + 1..n).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if alpha_norm == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
        let mut v = vec![0.0; n];
        v[k + 1] = x0 - alpha;
        for i in k + 2..n {
            v[i] = a[(i, k)];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        // A ← (I − 2vvᵀ/vᵀv) A
        for j in 0..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * a[(i, j)]).sum();
            let f = 2.0 * dot / vtv;
            for i in k + 1..n {
                a[(i, j)] -= f * v[i];
            }
        }
        // A ← A (I − 2vvᵀ/vᵀv)
        for i in 0..n {
            let dot: f64 = (k + 1..n).map(|j| a[(i, j)] * v[j]).sum();
            let f = 2.0 * dot / vtv;
            for j in k + 1..n {
                a[(i, j)] -= f * v[j];
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
///
/// Indices are 1-based internally (row/column 0 unused) to keep the
/// deflation bookkeeping readable.
fn francis_qr(h: DMatrix<f64>) -> Result<Vec<Complex64>, EigenError> {
    let n = h.nrows();
    let mut a = vec![vec![0.0f64; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i + 1][j + 1] = h[(i, j)];
        }
    }
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];

    let mut anorm = 0.0;
    for i in 1..=n {
        for j in (i.max(2) - 1)..=n {
            anorm += a[i][j].abs();
        }
    }

    let cap = 100 * n;
    let mut total = 0usize;
    let mut nn = n;
    let mut t = 0.0;
    while nn >= 1 {
        let mut its = 0;
        loop {
            // look for a single small subdiagonal element
            let mut l = nn;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nn][nn];
            if l == nn {
                // one root found
                wr[nn] = x + t;
                wi[nn] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[nn - 1][nn - 1];
            let mut w = a[nn][nn - 1] * a[nn - 1][nn];
            if l == nn - 1 {
                // two roots found
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + z.copysign(p);
                    wr[nn - 1] = x + z;
                    wr[nn] = x + z;
                    if z != 0.0 {
                        wr[nn] = x - w / z;
                    }
                    wi[nn - 1] = 0.0;
                    wi[nn] = 0.0;
                } else {
                    wr[nn - 1] = x + p;
                    wr[nn] = x + p;
                    wi[nn - 1] = -z;
                    wi[nn] = z;
                }
                nn = nn.saturating_sub(2);
                break;
            }

            if total >= cap {
                return Err(EigenError::NoConvergence(cap));
            }
            if its == 10 || its == 20 {
                // exceptional shift
                t += x;
                for i in 1..=nn {
                    a[i][i] -= x;
                }
                let s = a[nn][nn - 1].abs() + a[nn - 1][nn - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            total += 1;

            // look for two consecutive small subdiagonal elements
            let mut m = nn - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[m][m];
                let r0 = x - z;
                let s0 = y - z;
                p = (r0 * s0 - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - r0 - s0;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nn {
                a[i][i - 2] = 0.0;
                if i != m + 2 {
                    a[i][i - 3] = 0.0;
                }
            }
            // double QR step on rows l..nn and columns m..nn
            let mut xk = 0.0;
            for k in m..nn {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = if k != nn - 1 { a[k + 2][k - 1] } else { 0.0 };
                    xk = p.abs() + q.abs() + r.abs();
                    if xk != 0.0 {
                        p /= xk;
                        q /= xk;
                        r /= xk;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * xk;
                    }
                    p += s;
                    let xx = p / s;
                    let yy = q / s;
                    let zz = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nn {
                        let mut pp = a[k][j] + q * a[k + 1][j];
                        if k != nn - 1 {
                            pp += r * a[k + 2][j];
                            a[k + 2][j] -= pp * zz;
                        }
                        a[k + 1][j] -= pp * yy;
                        a[k][j] -= pp * xx;
                    }
                    let mmin = nn.min(k + 3);
                    for i in l..=mmin {
                        let mut pp = xx * a[i][k] + yy * a[i][k + 1];
                        if k != nn - 1 {
                            pp += zz * a[i][k + 2];
                            a[i][k + 2] -= pp * r;
                        }
                        a[i][k + 1] -= pp * q;
                        a[i][k] -= pp;
                    }
                }
            }
        }
    }
    Ok((1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect())
}

/// Backward residual of the eigenvector obtained by inverse iteration.
fn residual(m: &DMatrix<f64>, lambda: Complex64, scale: f64) -> f64 {
    let n = m.nrows();
    let mc: DMatrix<Complex64> = m.map(|v| Complex64::new(v, 0.0));
    let shift = lambda + Complex64::new(1e-10 * scale, 1e-10 * scale);
    let mut shifted = mc.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.3 - 0.05 * i as f64));
    for _ in 0..4 {
        let Some(next) = lu.solve(&v) else {
            return f64::INFINITY;
        };
        let norm = next.norm();
        if !norm.is_finite() || norm == 0.0 {
            return f64::INFINITY;
        }
        v = next / Complex64::new(norm, 0.0);
    }
    let r = &mc * &v - &v * lambda;
    r.norm() / v.norm()
}
