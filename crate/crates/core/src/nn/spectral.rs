//! Power iteration for the largest singular value of a weight viewed as a
//! `shape[0] × rest` matrix.

use rand::Rng;
use rand_distr::StandardNormal;

/// Floor on the estimated singular value.
pub const SIGMA_EPS: f64 = 1e-12;

fn norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, v| a + v * v).sqrt()
}

/// Rescales `x` to unit length. A (numerically) zero vector is left alone so
/// the persistent state keeps its unit norm.
fn normalize_into(x: Vec<f64>, into: &mut [f64]) {
    let n = norm(&x);
    if n > SIGMA_EPS {
        into.iter_mut().zip(&x).for_each(|(d, s)| *d = s / n);
    }
}

/// `W v` for row-major `W`.
pub fn matvec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).fold(0.0, |a, (x, y)| a + x * y))
        .collect()
}

/// `Wᵀ u` for row-major `W`.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate().take(rows) {
        for (o, x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += ur * x;
        }
    }
    out
}

pub fn unit_random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&x);
    x.iter_mut().for_each(|v| *v /= n);
    x
}

/// `iters` rounds of `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖`, then returns `uᵀWv`.
pub fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) -> f64 {
    for _ in 0..iters {
        normalize_into(matvec_t(w, rows, cols, u), v);
        normalize_into(matvec(w, rows, cols, v), u);
    }
    sigma_estimate(w, rows, cols, u, v)
}

pub fn sigma_estimate(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(matvec(w, rows, cols, v)).fold(0.0, |a, (x, y)| a + x * y)
}

/// Largest singular value from the eigenvalues of the smaller Gram
/// matrix (`WWᵀ` or `WᵀW`), found by cyclic Jacobi rotations. Exact up to
/// rounding; used for monitoring, never inside the training update.
pub fn exact_top_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
    let n = rows.min(cols);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = if rows <= cols {
                (0..cols).fold(0.0, |a, k| a + w[i * cols + k] * w[j * cols + k])
            } else {
                (0..rows).fold(0.0, |a, k| a + w[k * cols + i] * w[k * cols + j])
            };
            g[i * n + j] = s;
            g[j * n + i] = s;
        }
    }
    jacobi_eigenvalues(&mut g, n).into_iter().fold(0.0, f64::max).max(0.0).sqrt()
}

/// Eigenvalues of the symmetric `n×n` matrix `a` (destroyed).
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let frob = a.iter().fold(0.0, |s, x| s + x * x).sqrt();
    for _sweep in 0..100 {
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .fold(0.0, |s, (i, j)| s + a[i * n + j] * a[i * n + j]);
        if off.sqrt() <= 1e-13 * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
