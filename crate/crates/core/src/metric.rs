//! Asymptotically Euclidean metric families and heuristic checks of the
//! decay and non-trapping hypotheses.

use crate::linalg::{small_det, small_inverse, small_sym_eigenvalues};
use crate::report::{fit_power_law, Report, Row, Verdict};
use crate::scalar::Real;
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension must be at least 1")]
    BadDimension,
    #[error("decay rate must be positive, got {0}")]
    BadDecayRate(f64),
    #[error("metric loses positive definiteness at {point:?} (smallest eigenvalue {min_eigenvalue})")]
    NotPositive { point: Vec<f64>, min_eigenvalue: f64 },
    #[error("derivatives above order 3 are not available")]
    DerivativeOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricFamily {
    Flat,
    RadialBump,
    AnisotropicBump,
}

impl MetricFamily {
    pub fn name(self) -> &'static str {
        match self {
            MetricFamily::Flat => "flat",
            MetricFamily::RadialBump => "radial_bump",
            MetricFamily::AnisotropicBump => "anisotropic_bump",
        }
    }
}

impl std::str::FromStr for MetricFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flat" => Ok(MetricFamily::Flat),
            "radial_bump" => Ok(MetricFamily::RadialBump),
            "anisotropic_bump" => Ok(MetricFamily::AnisotropicBump),
            other => Err(format!("unknown metric family `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

type EntryFn<T> = dyn Fn(&[T], &mut [T]) + Send + Sync;

#[derive(Clone)]
enum Kind<T> {
    Family(MetricFamily),
    Custom(Arc<EntryFn<T>>),
}

/// Smooth metric `g_ij(x)` on `R^d` with a declared decay rate.
#[derive(Clone)]
pub struct MetricField<T> {
    dim: usize,
    decay_rate: T,
    amplitude: T,
    kind: Kind<T>,
}

impl<T: Real> fmt::Debug for MetricField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            Kind::Family(fam) => fam.name(),
            Kind::Custom(_) => "custom",
        };
        f.debug_struct("MetricField")
            .field("kind", &kind)
            .field("dim", &self.dim)
            .field("decay_rate", &self.decay_rate)
            .field("amplitude", &self.amplitude)
            .finish()
    }
}

/// Half-width of the box probed for positivity at construction.
pub const DEFAULT_PROBE_HALF_WIDTH: f64 = 64.0;
const POSITIVITY_PROBES: usize = 10_000;

pub fn make_metric<T: Real>(family: MetricFamily, d: usize, rho: T, amplitude: T) -> Result<MetricField<T>, MetricError> {
    if d == 0 {
        return Err(MetricError::BadDimension);
    }
    if !(rho > T::zero()) {
        return Err(MetricError::BadDecayRate(rho.f64()));
    }
    let amplitude = if family == MetricFamily::Flat { T::zero() } else { amplitude };
    let m = MetricField { dim: d, decay_rate: rho, amplitude, kind: Kind::Family(family) };
    m.check_positivity(T::lit(DEFAULT_PROBE_HALF_WIDTH))?;
    Ok(m)
}

impl<T: Real> MetricField<T> {
    /// User-supplied metric; `entries(x, out)` fills the row-major `d x d`
    /// matrix. Derivatives come from central finite differences.
    pub fn custom(d: usize, rho: T, entries: impl Fn(&[T], &mut [T]) + Send + Sync + 'static) -> Result<Self, MetricError> {
        if d == 0 {
            return Err(MetricError::BadDimension);
        }
        let m = MetricField { dim: d, decay_rate: rho, amplitude: T::zero(), kind: Kind::Custom(Arc::new(entries)) };
        m.check_positivity(T::lit(DEFAULT_PROBE_HALF_WIDTH))?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay_rate(&self) -> T {
        self.decay_rate
    }

    pub fn amplitude(&self) -> T {
        self.amplitude
    }

    pub fn family(&self) -> Option<MetricFamily> {
        match self.kind {
            Kind::Family(f) => Some(f),
            Kind::Custom(_) => None,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, Kind::Family(MetricFamily::Flat))
    }

    pub fn derivative_source(&self) -> DerivativeSource {
        match self.kind {
            Kind::Family(_) => DerivativeSource::Analytic,
            Kind::Custom(_) => DerivativeSource::FiniteDifference,
        }
    }

    /// Same field with a different declared decay rate.
    pub fn with_declared_rate(&self, rho: T) -> Self {
        MetricField { decay_rate: rho, ..self.clone() }
    }

    /// Row-major `g_ij(x)`.
    pub fn entries(&self, x: &[T]) -> Vec<T> {
        self.derivative(x, &[]).expect("order zero is always available")
    }

    /// `∂^α g_ij(x)` with `alpha` listing differentiation axes (order <= 3).
    pub fn derivative(&self, x: &[T], alpha: &[usize]) -> Result<Vec<T>, MetricError> {
        if alpha.len() > 3 {
            return Err(MetricError::DerivativeOrder);
        }
        let d = self.dim;
        debug_assert_eq!(x.len(), d);
        Ok(match &self.kind {
            Kind::Family(fam) => {
                let mut out = vec![T::zero(); d * d];
                let a = self.amplitude;
                let rho = self.decay_rate;
                if *fam == MetricFamily::Flat || a == T::zero() {
                    if alpha.is_empty() {
                        for i in 0..d {
                            out[i * d + i] = T::one();
                        }
                    }
                    return Ok(out);
                }
                // radial part a * s^(-rho/2), s = 1 + |x|^2
                let radial = a * radial_power_derivative(x, -rho / T::lit(2.0), alpha);
                for i in 0..d {
                    out[i * d + i] = radial + if alpha.is_empty() { T::one() } else { T::zero() };
                }
                if *fam == MetricFamily::AnisotropicBump {
                    let p = -(rho + T::lit(2.0)) / T::lit(2.0);
                    for i in 0..d {
                        for j in 0..d {
                            if i != j {
                                out[i * d + j] = a * leibniz_xx_radial(x, i, j, p, alpha);
                            }
                        }
                    }
                }
                out
            }
            Kind::Custom(f) => fd_derivative(&**f, x, d, alpha),
        })
    }

    pub fn inverse(&self, x: &[T]) -> Option<Vec<T>> {
        small_inverse(&self.entries(x), self.dim)
    }

    /// `g(x) = det(g_ij)^(1/4)`; `None` when the determinant is not positive.
    pub fn conformal_factor(&self, x: &[T]) -> Option<T> {
        let e = self.entries(x);
        if self.is_flat() {
            return Some(T::one());
        }
        let det = small_det(&e, self.dim);
        if det > T::zero() && det.is_finite() {
            Some(det.powf(T::lit(0.25)))
        } else {
            None
        }
    }

    pub fn min_eigenvalue(&self, x: &[T]) -> T {
        small_sym_eigenvalues(&self.entries(x), self.dim)[0]
    }

    /// Largest eigenvalue of `(g^jk)^(1/2)`, the local propagation speed.
    pub fn speed(&self, x: &[T]) -> T {
        self.min_eigenvalue(x).recip().sqrt()
    }

    /// Probes positive definiteness on a Halton set in `[-w, w]^d` plus the origin.
    pub fn check_positivity(&self, half_width: T) -> Result<(), MetricError> {
        let d = self.dim;
        let probe = |x: &[T]| -> Result<(), MetricError> {
            let ev = self.min_eigenvalue(x);
            if !(ev > T::zero()) || self.conformal_factor(x).is_none() {
                return Err(MetricError::NotPositive { point: x.iter().map(|v| v.f64()).collect(), min_eigenvalue: ev.f64() });
            }
            Ok(())
        };
        probe(&vec![T::zero(); d])?;
        for k in 1..=POSITIVITY_PROBES {
            let x: Vec<T> = (0..d).map(|a| half_width * T::lit(2.0 * halton(k, PRIMES[a % PRIMES.len()]) - 1.0)).collect();
            probe(&x)?;
        }
        Ok(())
    }

    /// `∂_k g^{ij}` for each k, as `d` row-major matrices.
    pub fn inverse_gradient(&self, x: &[T]) -> Option<Vec<Vec<T>>> {
        let d = self.dim;
        let ginv = self.inverse(x)?;
        let mut out = Vec::with_capacity(d);
        for k in 0..d {
            let dg = self.derivative(x, &[k]).ok()?;
            let mut tmp = vec![T::zero(); d * d];
            for i in 0..d {
                for j in 0..d {
                    tmp[i * d + j] = (0..d).fold(T::zero(), |acc, l| acc + ginv[i * d + l] * dg[l * d + j]);
                }
            }
            let mut r = vec![T::zero(); d * d];
            for i in 0..d {
                for j in 0..d {
                    r[i * d + j] = -(0..d).fold(T::zero(), |acc, l| acc + tmp[i * d + l] * ginv[l * d + j]);
                }
            }
            out.push(r);
        }
        Some(out)
    }
}

const PRIMES: [usize; 3] = [2, 3, 5];

/// Radical inverse of `index` in `base`.
pub fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// `∂^α s^p` with `s = 1 + |x|^2` and `alpha` a list of at most three axes.
fn radial_power_derivative<T: Real>(x: &[T], p: T, alpha: &[usize]) -> T {
    let s = T::one() + x.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let two = T::lit(2.0);
    let f = |k: i32| -> T {
        // k-th derivative of s^p with respect to s
        let mut c = T::one();
        for m in 0..k {
            c *= p - T::of(m as usize);
        }
        c * s.powf(p - T::of(k as usize))
    };
    let delta = |a: usize, b: usize| if a == b { T::one() } else { T::zero() };
    match alpha {
        [] => f(0),
        [k] => f(1) * two * x[*k],
        [k, l] => f(2) * T::lit(4.0) * x[*k] * x[*l] + f(1) * two * delta(*k, *l),
        [k, l, m] => {
            f(3) * T::lit(8.0) * x[*k] * x[*l] * x[*m]
                + f(2) * T::lit(4.0) * (delta(*k, *l) * x[*m] + delta(*k, *m) * x[*l] + delta(*l, *m) * x[*k])
        }
        _ => unreachable!(),
    }
}

/// `∂^α (x_i x_j s^p)` by the Leibniz rule over subsets of `alpha`.
fn leibniz_xx_radial<T: Real>(x: &[T], i: usize, j: usize, p: T, alpha: &[usize]) -> T {
    let n = alpha.len();
    let mut total = T::zero();
    for mask in 0..(1usize << n) {
        let on: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).map(|b| alpha[b]).collect();
        let off: Vec<usize> = (0..n).filter(|b| mask & (1 << b) == 0).map(|b| alpha[b]).collect();
        let poly = xx_derivative(x, i, j, &on);
        if poly != T::zero() {
            total += poly * radial_power_derivative(x, p, &off);
        }
    }
    total
}

fn xx_derivative<T: Real>(x: &[T], i: usize, j: usize, axes: &[usize]) -> T {
    let delta = |a: usize, b: usize| if a == b { T::one() } else { T::zero() };
    match axes {
        [] => x[i] * x[j],
        [k] => delta(i, *k) * x[j] + x[i] * delta(j, *k),
        [k, l] => delta(i, *k) * delta(j, *l) + delta(i, *l) * delta(j, *k),
        _ => T::zero(),
    }
}

fn fd_derivative<T: Real>(f: &EntryFn<T>, x: &[T], d: usize, alpha: &[usize]) -> Vec<T> {
    match alpha.split_first() {
        None => {
            let mut out = vec![T::zero(); d * d];
            f(x, &mut out);
            out
        }
        Some((&k, rest)) => {
            let r2 = x.iter().fold(T::zero(), |acc, &v| acc + v * v);
            let h = T::lit(1e-4) * (T::one() + r2).sqrt();
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let fp = fd_derivative(f, &xp, d, rest);
            let fm = fd_derivative(f, &xm, d, rest);
            fp.iter().zip(&fm).map(|(&a, &b)| (a - b) / (h + h)).collect()
        }
    }
}

/// Non-decreasing axis lists of the given order.
pub fn multi_indices(d: usize, order: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, order: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for a in start..d {
            cur.push(a);
            rec(d, order, a, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, order, 0, &mut Vec::new(), &mut out);
    out
}

/// Unit directions used to probe radial behaviour: axes, diagonals and a
/// low-discrepancy fill.
fn probe_directions(d: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for a in 0..d {
        let mut e = vec![0.0; d];
        e[a] = 1.0;
        dirs.push(e.clone());
        e[a] = -1.0;
        dirs.push(e);
    }
    if d > 1 {
        dirs.push(vec![1.0 / (d as f64).sqrt(); d]);
        for k in 1..=32 {
            let v: Vec<f64> = (0..d).map(|a| 2.0 * halton(k, PRIMES[a % 3]) - 1.0).collect();
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-3 {
                dirs.push(v.iter().map(|c| c / n).collect());
            }
        }
    }
    dirs
}

pub fn decay_check<T: Real>(m: &MetricField<T>, probe_radii: &[T], alpha_max: usize) -> Result<Report, MetricError> {
    decay_check_at_rate(m, probe_radii, alpha_max, m.decay_rate())
}

/// Sup of `|∂^α(g_ij - δ_ij)| <x>^{|α| + rho}` per order and radius. The
/// verdict is consistent when the outer radii show no growth trend.
pub fn decay_check_at_rate<T: Real>(m: &MetricField<T>, probe_radii: &[T], alpha_max: usize, rho: T) -> Result<Report, MetricError> {
    if alpha_max > 3 {
        return Err(MetricError::DerivativeOrder);
    }
    let d = m.dim();
    let dirs = probe_directions(d);
    let mut report = Report::new("decay_check");
    let mut radii: Vec<T> = probe_radii.to_vec();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut verdicts = Vec::new();
    for order in 0..=alpha_max {
        let alphas = multi_indices(d, order);
        let mut sups = Vec::with_capacity(radii.len());
        for &r in &radii {
            let mut sup = T::zero();
            for dir in &dirs {
                let x: Vec<T> = dir.iter().map(|&c| r * T::lit(c)).collect();
                let br = r.bracket();
                let w = br.powf(T::of(order) + rho);
                for alpha in &alphas {
                    let mut der = m.derivative(&x, alpha)?;
                    if order == 0 {
                        for i in 0..d {
                            der[i * d + i] -= T::one();
                        }
                    }
                    for v in der {
                        sup = sup.max(v.abs() * w);
                    }
                }
            }
            sups.push(sup);
            report.rows.push(Row::new(&[("order", order as f64), ("radius", r.f64())], sup.f64(), f64::NAN, Verdict::Pass));
        }
        let outer = radii.len() / 2;
        let xs: Vec<f64> = radii[outer..].iter().map(|r| r.bracket().f64()).collect();
        let ys: Vec<f64> = sups[outer..].iter().map(|s| s.f64()).collect();
        let max_sup = ys.iter().cloned().fold(0.0, f64::max);
        let verdict = if max_sup < 1e-300 {
            Verdict::Pass
        } else {
            match fit_power_law(&xs, &ys) {
                Some(fit) => {
                    report.note(format!("order {order}: outer growth exponent {:.3}", fit.exponent));
                    Verdict::from_bool(fit.exponent <= 0.5)
                }
                None => Verdict::Inconclusive,
            }
        };
        for row in report.rows.iter_mut().filter(|r| r.param("order") == Some(order as f64)) {
            row.verdict = verdict;
        }
        verdicts.push(verdict);
    }
    report.verdict = Verdict::all(verdicts);
    report.note(if report.verdict == Verdict::Pass { "consistent" } else { "inconsistent" });
    Ok(report)
}

/// Outcome of one integrated ray.
#[derive(Clone, Debug)]
pub struct RayOutcome {
    pub escaped: bool,
    pub time: f64,
    pub p0_drift: f64,
    pub failure: Option<String>,
}

pub const RAY_SEED_RADIUS: f64 = 1.0;

/// Integrates the flow of `p0/2` for rays seeded in the ball of radius
/// [`RAY_SEED_RADIUS`] on the cosphere `p0 = 1`.
pub fn geodesic_escape<T: Real>(m: &MetricField<T>, n_rays: usize, t_max: T, r_escape: T) -> Report {
    let d = m.dim();
    let seeds: Vec<(Vec<T>, Vec<T>)> = (1..=n_rays)
        .map(|k| {
            let u: Vec<f64> = (0..2 * d).map(|a| halton(k + 17, [2, 3, 5, 7, 11, 13][a])).collect();
            let mut x: Vec<f64> = (0..d).map(|a| 2.0 * u[a] - 1.0).collect();
            let nx = x.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
            let rad = RAY_SEED_RADIUS * u[0].powf(1.0 / d as f64);
            x.iter_mut().for_each(|c| *c *= rad / nx);
            let mut dir: Vec<f64> = (0..d).map(|a| 2.0 * u[d + a] - 1.0).collect();
            if d == 1 {
                dir[0] = if u[1] < 0.5 { -1.0 } else { 1.0 };
            }
            let nd = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
            (x.iter().map(|&c| T::lit(c)).collect(), dir.iter().map(|&c| T::lit(c / nd)).collect())
        })
        .collect();
    let outcomes: Vec<RayOutcome> = seeds.par_iter().map(|(x, dir)| integrate_ray(m, x, dir, t_max, r_escape)).collect();

    let mut report = Report::new("geodesic_escape");
    let mut slowest = 0.0f64;
    let mut all = true;
    let mut worst_drift = 0.0f64;
    for (k, o) in outcomes.iter().enumerate() {
        all &= o.escaped;
        if o.escaped {
            slowest = slowest.max(o.time);
        }
        worst_drift = worst_drift.max(o.p0_drift);
        if let Some(f) = &o.failure {
            report.note(format!("ray {k}: {f}"));
        }
        report.rows.push(Row::new(
            &[("ray", k as f64), ("p0_drift", o.p0_drift)],
            o.time,
            r_escape.f64(),
            Verdict::from_bool(o.escaped),
        ));
    }
    report.predicted = Some(r_escape.f64());
    report.verdict = Verdict::from_bool(all);
    report.note(format!("slowest escape time {slowest:.6}"));
    report.note(format!("max relative p0 drift {worst_drift:.3e}"));
    report.note(if all { "escaped" } else { "possibly trapping" });
    report
}

fn p0<T: Real>(m: &MetricField<T>, x: &[T], xi: &[T]) -> Option<T> {
    let d = m.dim();
    let ginv = m.inverse(x)?;
    let mut s = T::zero();
    for j in 0..d {
        for k in 0..d {
            s += ginv[j * d + k] * xi[j] * xi[k];
        }
    }
    Some(s)
}

fn ray_rhs<T: Real>(m: &MetricField<T>, y: &[T]) -> Option<Vec<T>> {
    let d = m.dim();
    let (x, xi) = y.split_at(d);
    let ginv = m.inverse(x)?;
    let grad = m.inverse_gradient(x)?;
    let mut out = vec![T::zero(); 2 * d];
    for j in 0..d {
        out[j] = (0..d).fold(T::zero(), |acc, k| acc + ginv[j * d + k] * xi[k]);
    }
    let half = T::lit(0.5);
    for l in 0..d {
        let mut s = T::zero();
        for j in 0..d {
            for k in 0..d {
                s += grad[l][j * d + k] * xi[j] * xi[k];
            }
        }
        out[d + l] = -half * s;
    }
    Some(out)
}

fn integrate_ray<T: Real>(m: &MetricField<T>, x0: &[T], dir: &[T], t_max: T, r_escape: T) -> RayOutcome {
    let d = m.dim();
    let fail = |msg: &str, t: T| RayOutcome { escaped: false, time: t.f64(), p0_drift: f64::NAN, failure: Some(msg.to_string()) };
    let Some(norm2) = p0(m, x0, dir) else { return fail("metric not invertible at seed", T::zero()) };
    let xi0: Vec<T> = dir.iter().map(|&c| c / norm2.sqrt()).collect();
    let mut y: Vec<T> = x0.iter().chain(xi0.iter()).copied().collect();
    let radius = |y: &[T]| y[..d].iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    let p_start = T::one();
    let mut t = T::zero();
    let mut h = T::lit(0.05);
    let rtol = T::lit(1e-10);
    let atol = T::lit(1e-12);
    let mut drift = T::zero();
    let mut steps = 0usize;
    while t < t_max {
        if radius(&y) > r_escape {
            return RayOutcome { escaped: true, time: t.f64(), p0_drift: drift.f64(), failure: None };
        }
        steps += 1;
        if steps > 2_000_000 {
            return fail("step budget exhausted", t);
        }
        h = h.min(t_max - t);
        let Some((y_new, err)) = dopri_step(m, &y, h) else { return fail("metric not invertible along ray", t) };
        let scale = y
            .iter()
            .zip(&y_new)
            .map(|(&a, &b)| atol + rtol * a.abs().max(b.abs()))
            .collect::<Vec<_>>();
        let e = err
            .iter()
            .zip(&scale)
            .fold(T::zero(), |acc, (&e, &s)| acc.max((e / s).abs()));
        if e <= T::one() {
            t += h;
            y = y_new;
            if let Some(p) = p0(m, &y[..d], &y[d..]) {
                drift = drift.max((p - p_start).abs() / p_start);
            }
        }
        let factor = if e == T::zero() { T::lit(5.0) } else { (T::lit(0.9) * e.powf(T::lit(-0.2))).min(T::lit(5.0)).max(T::lit(0.2)) };
        h *= factor;
        if h < T::lit(1e-12) {
            return fail("step size underflow", t);
        }
    }
    let escaped = radius(&y) > r_escape;
    RayOutcome { escaped, time: t.f64(), p0_drift: drift.f64(), failure: None }
}

/// One Dormand-Prince 5(4) step; returns the fifth-order solution and the
/// embedded error estimate.
fn dopri_step<T: Real>(m: &MetricField<T>, y: &[T], h: T) -> Option<(Vec<T>, Vec<T>)> {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let n = y.len();
    let mut k: Vec<Vec<T>> = Vec::with_capacity(7);
    k.push(ray_rhs(m, y)?);
    for stage in 0..6 {
        let mut ys = y.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = T::lit(A[stage][j]);
            if a != T::zero() {
                for i in 0..n {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        k.push(ray_rhs(m, &ys)?);
    }
    let mut y5 = y.to_vec();
    let mut err = vec![T::zero(); n];
    for (j, kj) in k.iter().enumerate() {
        let b5 = T::lit(B5[j]);
        let db = T::lit(B5[j] - B4[j]);
        for i in 0..n {
            y5[i] += h * b5 * kj[i];
            err[i] += h * db * kj[i];
        }
    }
    Some((y5, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_is_exact_identity() {
        let m = make_metric::<f64>(MetricFamily::Flat, 3, 2.0, 0.0).unwrap();
        let x = [0.3, -1.2, 4.0];
        assert_eq!(m.entries(&x), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.inverse(&x).unwrap(), m.entries(&x));
        assert_eq!(m.conformal_factor(&x), Some(1.0));
    }

    #[test]
    fn radial_conformal_factor_at_origin() {
        let m = make_metric::<f64>(MetricFamily::RadialBump, 3, 1.0, 0.3).unwrap();
        let g = m.conformal_factor(&[0.0, 0.0, 0.0]).unwrap();
        assert!((g - 1.3f64.powf(0.75)).abs() < 1e-15);
    }

    #[test]
    fn positivity_rejected() {
        let e = make_metric::<f64>(MetricFamily::RadialBump, 3, 1.0, -1.5).unwrap_err();
        assert!(matches!(e, MetricError::NotPositive { .. }));
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for fam in [MetricFamily::RadialBump, MetricFamily::AnisotropicBump] {
            let m = make_metric::<f64>(fam, 3, 1.5, 0.4).unwrap();
            let fam_copy = m.clone();
            let fd = MetricField::custom(3, 1.5, move |x: &[f64], out: &mut [f64]| {
                out.copy_from_slice(&fam_copy.entries(x));
            })
            .unwrap();
            let x = [0.7, -0.4, 1.1];
            for order in 1..=2 {
                for alpha in multi_indices(3, order) {
                    let a = m.derivative(&x, &alpha).unwrap();
                    let b = fd.derivative(&x, &alpha).unwrap();
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() < 1e-6, "{fam:?} {alpha:?}: {u} vs {v}");
                    }
                }
            }
            // third order against a difference of analytic second derivatives
            let h = 1e-5;
            for alpha in multi_indices(3, 3) {
                let (k, rest) = alpha.split_first().unwrap();
                let mut xp = x;
                let mut xm = x;
                xp[*k] += h;
                xm[*k] -= h;
                let dp = m.derivative(&xp, rest).unwrap();
                let dm = m.derivative(&xm, rest).unwrap();
                let a = m.derivative(&x, &alpha).unwrap();
                for i in 0..9 {
                    assert!((a[i] - (dp[i] - dm[i]) / (2.0 * h)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(3, 0).len(), 1);
        assert_eq!(multi_indices(3, 2).len(), 6);
        assert_eq!(multi_indices(3, 3).len(), 10);
        assert_eq!(multi_indices(1, 3), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn halton_base_two() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(3, 2), 0.75);
        assert!((halton(5, 3) - 7.0 / 9.0).abs() < 1e-15);
    }
}
