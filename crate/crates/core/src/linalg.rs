//! Small dense and iterative helpers shared by the numerical modules.

use crate::scalar::Real;
use faer::{Mat, MatRef, Side};

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn max_abs<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled<T: Real>(alpha: T, x: &[T]) -> Vec<T> {
    x.iter().map(|&v| alpha * v).collect()
}

pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn hadamard<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// Conjugate-gradient solve of `A x = b` for symmetric positive definite `A`,
/// starting from `x`. Returns the final relative residual and iteration count.
pub fn conjugate_gradient<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    b: &[T],
    x: &mut [T],
    rel_tol: T,
    max_iter: usize,
) -> (T, usize) {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return (T::zero(), 0);
    }
    let mut ax = vec![T::zero(); n];
    apply(x, &mut ax);
    let mut r = sub(b, &ax);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![T::zero(); n];
    for it in 0..max_iter {
        if rr.sqrt() <= rel_tol * bnorm {
            return (rr.sqrt() / bnorm, it);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= T::zero() {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    // recompute the true residual rather than trusting the recurrence
    apply(x, &mut ax);
    let res = norm(&sub(b, &ax)) / bnorm;
    (res, max_iter)
}

/// Largest singular value of a linear map given `M` and `M^T` actions,
/// by power iteration on `M^T M`. Stops once the estimate changes by less
/// than `rel_tol` between sweeps.
pub fn power_norm<T: Real>(
    apply: impl Fn(&[T]) -> Vec<T>,
    apply_t: impl Fn(&[T]) -> Vec<T>,
    start: Vec<T>,
    rel_tol: T,
    max_iter: usize,
) -> PowerResult<T> {
    let mut x = start;
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut est = T::zero();
    for it in 0..max_iter {
        let y = apply(&x);
        let z = apply_t(&y);
        let nz = norm(&z);
        if nz == T::zero() {
            return PowerResult { value: T::zero(), iterations: it + 1, converged: true };
        }
        let new = nz.sqrt();
        x = z.into_iter().map(|v| v / nz).collect();
        if it > 2 && (new - est).abs() <= rel_tol * new {
            return PowerResult { value: new, iterations: it + 1, converged: true };
        }
        est = new;
    }
    PowerResult { value: est, iterations: max_iter, converged: false }
}

#[derive(Clone, Copy, Debug)]
pub struct PowerResult<T> {
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi sweeps.
/// `a` is row-major `n x n`; returns eigenvalues in ascending order.
pub fn small_sym_eigenvalues<T: Real>(a: &[T], n: usize) -> Vec<T> {
    let mut m = a.to_vec();
    let scale = a.iter().fold(T::zero(), |acc, &x| acc + x * x);
    for _ in 0..64 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= T::epsilon() * T::epsilon() * scale * T::lit(1e-4) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Inverse of a small dense matrix (row-major) by Gauss-Jordan with partial
/// pivoting. Returns `None` when a pivot vanishes.
pub fn small_inverse<T: Real>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[piv * n + col] == T::zero() || !m[piv * n + col].is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
                inv.swap(piv * n + k, col * n + k);
            }
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != T::zero() {
                    for k in 0..n {
                        m[r * n + k] = m[r * n + k] - f * m[col * n + k];
                        inv[r * n + k] = inv[r * n + k] - f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

pub fn small_det<T: Real>(a: &[T], n: usize) -> T {
    match n {
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => panic!("small_det supports n <= 3"),
    }
}

/// Symmetric eigen-decomposition with ascending eigenvalues.
pub fn sym_eig<T: Real>(m: MatRef<'_, T>) -> Option<(Vec<T>, Mat<T>)> {
    let e = m.self_adjoint_eigen(Side::Lower).ok()?;
    let s = e.S().column_vector();
    let vals: Vec<T> = (0..s.nrows()).map(|i| s[i]).collect();
    Some((vals, e.U().to_owned()))
}

/// Spectral norm of a dense matrix.
pub fn spectral_norm<T: Real>(m: MatRef<'_, T>) -> T {
    if m.nrows() == 0 || m.ncols() == 0 {
        return T::zero();
    }
    // Gram route is cheaper than a full SVD for tall or wide blocks.
    let g = if m.nrows() >= m.ncols() { m.transpose() * m } else { m * m.transpose() };
    match sym_eig(g.as_ref()) {
        Some((vals, _)) => vals.last().copied().unwrap_or(T::zero()).max(T::zero()).sqrt(),
        None => T::nan(),
    }
}

/// Applies a real function to a symmetric matrix through its eigenbasis.
pub fn sym_function<T: Real>(m: MatRef<'_, T>, f: impl Fn(T) -> T) -> Mat<T> {
    let n = m.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let (vals, u) = sym_eig(m).expect("symmetric eigensolver converged");
    let scaled = Mat::from_fn(n, n, |i, j| u[(i, j)] * f(vals[j]));
    &scaled * u.transpose()
}

pub fn col_to_vec<T: Real>(m: MatRef<'_, T>, j: usize) -> Vec<T> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn mat_from_cols<T: Real>(nrows: usize, cols: &[Vec<T>]) -> Mat<T> {
    Mat::from_fn(nrows, cols.len(), |i, j| cols[j][i])
}

/// `M^T x` for a dense matrix.
pub fn mat_t_vec<T: Real>(m: MatRef<'_, T>, x: &[T]) -> Vec<T> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).fold(T::zero(), |acc, i| acc + m[(i, j)] * x[i]))
        .collect()
}

/// `M x` for a dense matrix.
pub fn mat_vec<T: Real>(m: MatRef<'_, T>, x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); m.nrows()];
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj == T::zero() {
            continue;
        }
        for i in 0..m.nrows() {
            y[i] += m[(i, j)] * xj;
        }
    }
    y
}

pub fn max_abs_mat<T: Real>(m: MatRef<'_, T>) -> T {
    let mut r = T::zero();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            r = r.max(m[(i, j)].abs());
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_tridiagonal() {
        let n = 50;
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut v = 3.0 * x[i];
                if i > 0 {
                    v -= x[i - 1];
                }
                if i + 1 < n {
                    v -= x[i + 1];
                }
                y[i] = v;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = vec![0.0; n];
        let (res, _) = conjugate_gradient(apply, &b, &mut x, 1e-13, 500);
        assert!(res < 1e-12);
        let mut y = vec![0.0; n];
        apply(&x, &mut y);
        assert!(norm(&sub(&y, &b)) < 1e-11);
    }

    #[test]
    fn jacobi_matches_closed_form() {
        let a = [2.0f64, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let ev = small_sym_eigenvalues(&a, 3);
        assert!((ev[0] - 1.0).abs() < 1e-14);
        assert!((ev[1] - 3.0).abs() < 1e-14);
        assert!((ev[2] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn small_inverse_roundtrip() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = small_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!((small_det(&a, 3) - 21.29).abs() < 1e-12);
    }

    #[test]
    fn power_norm_of_diagonal() {
        let d = [1.0, -7.0, 3.0];
        let f = |x: &[f64]| x.iter().zip(&d).map(|(a, b)| a * b).collect::<Vec<_>>();
        let r = power_norm(f, f, vec![1.0, 1.0, 1.0], 1e-12, 500);
        assert!((r.value - 7.0).abs() < 1e-8);
    }
}
