//! Quadrature rules: Gauss-Legendre nodes and composite Simpson sums.

use crate::scalar::Real;

/// Gauss-Legendre nodes and weights on `[a, b]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre<T: Real>(n: usize, a: T, b: T) -> (Vec<T>, Vec<T>) {
    assert!(n > 0);
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let half = (b - a) / T::lit(2.0);
    let mid = (a + b) / T::lit(2.0);
    for i in 0..n.div_ceil(2) {
        // Newton in f64 regardless of T; nodes are then rounded once
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = mid - half * T::lit(x);
        nodes[n - 1 - i] = mid + half * T::lit(x);
        weights[i] = half * T::lit(w);
        weights[n - 1 - i] = half * T::lit(w);
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// Composite Simpson weights for `n_intervals` equal panels of width `dt`.
/// An odd panel count closes with the three-eighths rule on the last three
/// panels.
pub fn simpson_weights<T: Real>(n_intervals: usize, dt: T) -> Vec<T> {
    let n = n_intervals;
    let mut w = vec![T::zero(); n + 1];
    match n {
        0 => return w,
        1 => {
            w[0] = dt / T::lit(2.0);
            w[1] = dt / T::lit(2.0);
            return w;
        }
        2 => {
            w[0] = dt / T::lit(3.0);
            w[1] = dt * T::lit(4.0 / 3.0);
            w[2] = dt / T::lit(3.0);
            return w;
        }
        3 => {
            let c = dt * T::lit(3.0 / 8.0);
            w[0] = c;
            w[1] = c * T::lit(3.0);
            w[2] = c * T::lit(3.0);
            w[3] = c;
            return w;
        }
        _ => {}
    }
    let even = if n.is_multiple_of(2) { n } else { n - 3 };
    for k in (0..even).step_by(2) {
        w[k] += dt / T::lit(3.0);
        w[k + 1] += dt * T::lit(4.0 / 3.0);
        w[k + 2] += dt / T::lit(3.0);
    }
    if even < n {
        let c = dt * T::lit(3.0 / 8.0);
        w[even] += c;
        w[even + 1] += c * T::lit(3.0);
        w[even + 2] += c * T::lit(3.0);
        w[even + 3] += c;
    }
    w
}

pub fn simpson<T: Real>(values: &[T], dt: T) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let w = simpson_weights(values.len() - 1, dt);
    w.iter().zip(values).fold(T::zero(), |acc, (&wi, &fi)| acc + wi * fi)
}

/// Running integral `I_k = int_0^{t_k} f` on a uniform grid. Even indices use
/// the Simpson rule; odd indices add a one-panel step built from the
/// quadratic through the neighbouring samples.
pub fn cumulative_simpson<T: Real>(values: &[T], dt: T) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = dt * (values[0] + values[1]) / T::lit(2.0);
        return out;
    }
    let c12 = dt / T::lit(12.0);
    for k in 1..n {
        if k % 2 == 0 {
            out[k] = out[k - 2] + dt / T::lit(3.0) * (values[k - 2] + T::lit(4.0) * values[k - 1] + values[k]);
        } else if k + 1 < n {
            out[k] = out[k - 1] + c12 * (T::lit(5.0) * values[k - 1] + T::lit(8.0) * values[k] - values[k + 1]);
        } else {
            out[k] = out[k - 1] + c12 * (-values[k - 2] + T::lit(8.0) * values[k - 1] + T::lit(5.0) * values[k]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre::<f64>(5, 0.0, 2.0);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((s - 2f64.powi(10) / 10.0).abs() < 1e-10);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_large_order() {
        let (x, w) = gauss_legendre::<f64>(40, 0.0, std::f64::consts::FRAC_PI_2);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn simpson_odd_and_even_counts() {
        for n in [2usize, 3, 4, 5, 9, 10] {
            let dt = 1.0 / n as f64;
            let v: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powi(3)).collect();
            assert!((simpson(&v, dt) - 0.25).abs() < 1e-14, "n = {n}");
        }
    }

    #[test]
    fn cumulative_matches_antiderivative() {
        let n = 64;
        let dt = 3.0 / n as f64;
        let v: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).cos()).collect();
        let c = cumulative_simpson(&v, dt);
        for (k, ck) in c.iter().enumerate() {
            assert!((ck - (k as f64 * dt).sin()).abs() < 1e-6);
        }
    }
}
