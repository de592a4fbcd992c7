//! Wave evolution `u'' + P u = G`: exact spectral propagation with Duhamel
//! sources, the first-order system and its diagonalization, half-wave groups
//! and a leapfrog fallback for grids beyond the dense cap.

use crate::linalg::{dot, norm};
use crate::quadrature::{cumulative_simpson, simpson};
use crate::scalar::Real;
use crate::sparse::Csr;
use crate::spectral::{largest_eigenvalue, SpectralData, SpectralError};
use faer::Mat;
use num_complex::Complex;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("time step {dt} exceeds the stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("leapfrog went unstable at step {step}")]
    Unstable { step: usize },
    #[error("source has {got} samples, expected {expected}")]
    SourceLength { got: usize, expected: usize },
    #[error("vector length {got} does not match the operator size {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub t: T,
}

impl<T: Real> WaveState<T> {
    pub fn new(u: Vec<T>, v: Vec<T>) -> Self {
        WaveState { u, v, t: T::zero() }
    }

    pub fn zero(n: usize) -> Self {
        WaveState::new(vec![T::zero(); n], vec![T::zero(); n])
    }
}

/// `<P u, u> + ||v||^2`.
pub fn energy<T: Real>(s: &SpectralData<T>, state: &WaveState<T>) -> T {
    energy_op(s.operator(), state)
}

pub fn energy_op<T: Real>(op: &Csr<T>, state: &WaveState<T>) -> T {
    let pu = op.mul_vec(&state.u);
    dot(&pu, &state.u) + dot(&state.v, &state.v)
}

/// Source samples `G(t0 + j dt)`, `j = 0..=n`, in node coordinates.
#[derive(Clone, Debug)]
pub struct SampledSource<T> {
    pub dt: T,
    pub samples: Vec<Vec<T>>,
}

impl<T: Real> SampledSource<T> {
    pub fn from_fn(dt: T, n_intervals: usize, f: impl Fn(T) -> Vec<T> + Sync) -> Self {
        let samples = (0..=n_intervals).into_par_iter().map(|j| f(dt * T::of(j))).collect();
        SampledSource { dt, samples }
    }

    pub fn intervals(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub struct Propagated<T> {
    pub state: WaveState<T>,
    pub warnings: Vec<String>,
}

/// `t sinc(omega t)`, the kernel of `P^(-1/2) sin(t P^(1/2))`.
#[inline]
pub fn sin_over<T: Real>(omega: T, t: T) -> T {
    let x = omega * t;
    if x.abs() < T::lit(1e-4) {
        t * (T::one() - x * x / T::lit(6.0))
    } else {
        x.sin() / omega
    }
}

/// Below this frequency the Duhamel integral is evaluated without the
/// `1/omega` factorization.
const TINY_OMEGA: f64 = 1e-6;

/// Exact solution at time `state.t + t`. The source, when given, is sampled
/// on `[state.t, state.t + t]` and integrated by composite Simpson.
pub fn propagate_exact<T: Real>(
    s: &SpectralData<T>,
    state: &WaveState<T>,
    t: T,
    source: Option<&SampledSource<T>>,
    causal_window: Option<T>,
) -> Result<Propagated<T>, EvolveError> {
    let n = s.len();
    check_len(state.u.len(), n)?;
    check_len(state.v.len(), n)?;
    let sig = s.eigenvalues()?;
    let c0 = s.coefficients(&state.u)?;
    let c1 = s.coefficients(&state.v)?;
    let mut warnings = Vec::new();
    let end = state.t + t;
    if let Some(w) = causal_window {
        if end > w {
            let msg = format!("t = {} is beyond the causal window {}", end.f64(), w.f64());
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut cu = vec![T::zero(); n];
    let mut cv = vec![T::zero(); n];
    for k in 0..n {
        let om = sig[k].max(T::zero()).sqrt();
        let (sn, cs) = (om * t).sin_cos();
        cu[k] = cs * c0[k] + sin_over(om, t) * c1[k];
        cv[k] = -om * sn * c0[k] + cs * c1[k];
    }
    if let Some(src) = source {
        if src.samples.is_empty() || (src.dt * T::of(src.intervals()) - t).abs() > T::lit(1e-9) * t.abs().max(T::one()) {
            return Err(EvolveError::SourceLength { got: src.samples.len(), expected: 1 + (t / src.dt).round().to_usize().unwrap_or(0) });
        }
        let g: Vec<Vec<T>> = src.samples.par_iter().map(|x| s.coefficients(x)).collect::<Result<_, _>>()?;
        let nt = src.intervals();
        let du: Vec<(T, T)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let om = sig[k].max(T::zero()).sqrt();
                let gk: Vec<T> = g.iter().map(|row| row[k]).collect();
                let times = (0..=nt).map(|j| src.dt * T::of(j));
                let ku: Vec<T> = times.clone().map(|sj| sin_over(om, t - sj)).collect();
                let kv: Vec<T> = times.map(|sj| (om * (t - sj)).cos()).collect();
                let fu: Vec<T> = ku.iter().zip(&gk).map(|(a, b)| *a * *b).collect();
                let fv: Vec<T> = kv.iter().zip(&gk).map(|(a, b)| *a * *b).collect();
                (simpson(&fu, src.dt), simpson(&fv, src.dt))
            })
            .collect();
        for k in 0..n {
            cu[k] += du[k].0;
            cv[k] += du[k].1;
        }
    }
    Ok(Propagated {
        state: WaveState { u: s.synthesize(&cu)?, v: s.synthesize(&cv)?, t: end },
        warnings,
    })
}

fn check_len(got: usize, expected: usize) -> Result<(), EvolveError> {
    if got != expected {
        return Err(EvolveError::Dimension { got, expected });
    }
    Ok(())
}

/// Solution sampled at `t_j = j dt`, `j = 0..=n_steps`, kept in eigen
/// coordinates (one column per time).
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub dt: T,
    pub u: Mat<T>,
    pub v: Mat<T>,
    /// Source coefficients at the same times, if any.
    pub g: Option<Mat<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.u.ncols() == 0
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len()).map(|j| self.dt * T::of(j)).collect()
    }

    pub fn final_time(&self) -> T {
        self.dt * T::of(self.len().saturating_sub(1))
    }

    /// Node values of `u` at every sample time (n x n_t).
    pub fn nodal_u(&self, s: &SpectralData<T>) -> Result<Mat<T>, SpectralError> {
        Ok(s.vectors()? * &self.u)
    }

    pub fn nodal_v(&self, s: &SpectralData<T>) -> Result<Mat<T>, SpectralError> {
        Ok(s.vectors()? * &self.v)
    }

    /// Eigen coefficients of `u_tt = -P u + G`.
    pub fn accel_coefficients(&self, s: &SpectralData<T>) -> Result<Mat<T>, SpectralError> {
        let sig = s.eigenvalues()?;
        Ok(Mat::from_fn(self.u.nrows(), self.len(), |k, j| {
            let g = self.g.as_ref().map(|g| g[(k, j)]).unwrap_or(T::zero());
            g - sig[k] * self.u[(k, j)]
        }))
    }

    pub fn state_at(&self, s: &SpectralData<T>, j: usize) -> Result<WaveState<T>, SpectralError> {
        let cu: Vec<T> = (0..self.u.nrows()).map(|k| self.u[(k, j)]).collect();
        let cv: Vec<T> = (0..self.v.nrows()).map(|k| self.v[(k, j)]).collect();
        Ok(WaveState { u: s.synthesize(&cu)?, v: s.synthesize(&cv)?, t: self.dt * T::of(j) })
    }

    /// Energy at every sample, from the eigen coefficients.
    pub fn energies(&self, s: &SpectralData<T>) -> Result<Vec<T>, SpectralError> {
        let sig = s.eigenvalues()?;
        Ok((0..self.len())
            .map(|j| {
                (0..self.u.nrows()).fold(T::zero(), |acc, k| {
                    acc + sig[k] * self.u[(k, j)] * self.u[(k, j)] + self.v[(k, j)] * self.v[(k, j)]
                })
            })
            .collect())
    }
}

/// Samples the exact solution on a uniform grid. Source samples, if given,
/// must sit on the same grid and are supplied as eigen coefficients
/// (modes x times).
pub fn trajectory<T: Real>(
    s: &SpectralData<T>,
    u0: &[T],
    u1: &[T],
    source: Option<Mat<T>>,
    dt: T,
    n_steps: usize,
) -> Result<Trajectory<T>, EvolveError> {
    let n = s.len();
    check_len(u0.len(), n)?;
    check_len(u1.len(), n)?;
    let sig = s.eigenvalues()?;
    let c0 = s.coefficients(u0)?;
    let c1 = s.coefficients(u1)?;
    let nt = n_steps + 1;
    if let Some(g) = &source {
        if g.ncols() != nt || g.nrows() != n {
            return Err(EvolveError::SourceLength { got: g.ncols(), expected: nt });
        }
    }
    let rows: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let om = sig[k].max(T::zero()).sqrt();
            let mut ru = Vec::with_capacity(nt);
            let mut rv = Vec::with_capacity(nt);
            for j in 0..nt {
                let t = dt * T::of(j);
                let (sn, cs) = (om * t).sin_cos();
                ru.push(cs * c0[k] + sin_over(om, t) * c1[k]);
                rv.push(-om * sn * c0[k] + cs * c1[k]);
            }
            if let Some(g) = &source {
                let gk: Vec<T> = (0..nt).map(|j| g[(k, j)]).collect();
                let (du, dv) = duhamel_mode(om, &gk, dt);
                for j in 0..nt {
                    ru[j] += du[j];
                    rv[j] += dv[j];
                }
            }
            (ru, rv)
        })
        .collect();
    let u = Mat::from_fn(n, nt, |k, j| rows[k].0[j]);
    let v = Mat::from_fn(n, nt, |k, j| rows[k].1[j]);
    Ok(Trajectory { dt, u, v, g: source })
}

/// Duhamel response of one mode at every sample time.
fn duhamel_mode<T: Real>(om: T, g: &[T], dt: T) -> (Vec<T>, Vec<T>) {
    let nt = g.len();
    if om < T::lit(TINY_OMEGA) {
        let mut du = vec![T::zero(); nt];
        let mut dv = vec![T::zero(); nt];
        for j in 1..nt {
            let t = dt * T::of(j);
            let fu: Vec<T> = (0..=j).map(|i| sin_over(om, t - dt * T::of(i)) * g[i]).collect();
            let fv: Vec<T> = (0..=j).map(|i| (om * (t - dt * T::of(i))).cos() * g[i]).collect();
            du[j] = simpson(&fu, dt);
            dv[j] = simpson(&fv, dt);
        }
        return (du, dv);
    }
    let (sn, cs): (Vec<T>, Vec<T>) = (0..nt).map(|j| (om * dt * T::of(j)).sin_cos()).unzip();
    let fc: Vec<T> = cs.iter().zip(g).map(|(a, b)| *a * *b).collect();
    let fs: Vec<T> = sn.iter().zip(g).map(|(a, b)| *a * *b).collect();
    let ic = cumulative_simpson(&fc, dt);
    let is = cumulative_simpson(&fs, dt);
    let du = (0..nt).map(|j| (sn[j] * ic[j] - cs[j] * is[j]) / om).collect();
    let dv = (0..nt).map(|j| cs[j] * ic[j] + sn[j] * is[j]).collect();
    (du, dv)
}

/// `e^{-it P^(1/2)} v`.
pub fn half_wave<T: Real>(s: &SpectralData<T>, v: &[T], t: T) -> Result<Vec<Complex<T>>, SpectralError> {
    let z: Vec<Complex<T>> = v.iter().map(|&x| Complex::new(x, T::zero())).collect();
    half_wave_complex(s, &z, t)
}

pub fn half_wave_complex<T: Real>(s: &SpectralData<T>, v: &[Complex<T>], t: T) -> Result<Vec<Complex<T>>, SpectralError> {
    let sig = s.eigenvalues()?;
    let re: Vec<T> = v.iter().map(|z| z.re).collect();
    let im: Vec<T> = v.iter().map(|z| z.im).collect();
    let cr = s.coefficients(&re)?;
    let ci = s.coefficients(&im)?;
    let mut or = vec![T::zero(); sig.len()];
    let mut oi = vec![T::zero(); sig.len()];
    for k in 0..sig.len() {
        let ph = Complex::new(T::zero(), -t * sig[k].max(T::zero()).sqrt()).exp();
        let z = ph * Complex::new(cr[k], ci[k]);
        or[k] = z.re;
        oi[k] = z.im;
    }
    let a = s.synthesize(&or)?;
    let b = s.synthesize(&oi)?;
    Ok(a.into_iter().zip(b).map(|(x, y)| Complex::new(x, y)).collect())
}

/// The system `d/dt (u, v) = -i R (u, v)` with `R = [[0, i], [-iP, 0]]`,
/// handled mode by mode. In energy-normalized coordinates
/// `(sqrt(s) a, b)` the transform `U` is `(1/sqrt 2) [[1, i], [1, -i]]`.
pub struct FirstOrderSystem<'a, T> {
    s: &'a SpectralData<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FirstOrderCheck {
    /// `max_k ||U R U^* - L||` relative to `||L||`.
    pub diagonalization: f64,
    /// `max_k ||U^* U - I||`.
    pub unitarity: f64,
}

type C2<T> = [[Complex<T>; 2]; 2];

fn mul2<T: Real>(a: &C2<T>, b: &C2<T>) -> C2<T> {
    let mut c = [[Complex::new(T::zero(), T::zero()); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn adjoint2<T: Real>(a: &C2<T>) -> C2<T> {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

fn max_dev2<T: Real>(a: &C2<T>, b: &C2<T>) -> T {
    let mut m = T::zero();
    for i in 0..2 {
        for j in 0..2 {
            m = m.max((a[i][j] - b[i][j]).norm());
        }
    }
    m
}

impl<'a, T: Real> FirstOrderSystem<'a, T> {
    pub fn new(s: &'a SpectralData<T>) -> Self {
        FirstOrderSystem { s }
    }

    fn blocks(sigma: T) -> (C2<T>, C2<T>, C2<T>) {
        let z = Complex::new(T::zero(), T::zero());
        let one = Complex::new(T::one(), T::zero());
        let i = Complex::new(T::zero(), T::one());
        let w = Complex::new(sigma.max(T::zero()).sqrt(), T::zero());
        let r = T::lit(0.5).sqrt();
        let u = [[one * r, i * r], [one * r, -i * r]];
        let rr = [[z, i * w], [-i * w, z]];
        let l = [[w, z], [z, -w]];
        (u, rr, l)
    }

    /// Checks the diagonalization on modes with `sigma > floor`.
    pub fn check(&self, floor: T) -> Result<FirstOrderCheck, SpectralError> {
        let sig = self.s.eigenvalues()?;
        let mut diag = T::zero();
        let mut unit = T::zero();
        let id = {
            let o = Complex::new(T::one(), T::zero());
            let z = Complex::new(T::zero(), T::zero());
            [[o, z], [z, o]]
        };
        for &sk in sig.iter().filter(|&&x| x > floor) {
            let (u, r, l) = Self::blocks(sk);
            let ua = adjoint2(&u);
            let url = mul2(&mul2(&u, &r), &ua);
            diag = diag.max(max_dev2(&url, &l) / sk.sqrt());
            unit = unit.max(max_dev2(&mul2(&ua, &u), &id));
        }
        Ok(FirstOrderCheck { diagonalization: diag.f64(), unitarity: unit.f64() })
    }

    /// Diagonal coordinates `(w+, w-)` of a state, per mode.
    pub fn to_diagonal(&self, state: &WaveState<T>) -> Result<Vec<[Complex<T>; 2]>, SpectralError> {
        let sig = self.s.eigenvalues()?;
        let a = self.s.coefficients(&state.u)?;
        let b = self.s.coefficients(&state.v)?;
        Ok((0..sig.len())
            .map(|k| {
                let (u, _, _) = Self::blocks(sig[k]);
                let p = Complex::new(sig[k].max(T::zero()).sqrt() * a[k], T::zero());
                let q = Complex::new(b[k], T::zero());
                [u[0][0] * p + u[0][1] * q, u[1][0] * p + u[1][1] * q]
            })
            .collect())
    }

    /// Inverse of [`Self::to_diagonal`]; modes with `sigma <= floor` lose
    /// their displacement component.
    pub fn from_diagonal(&self, w: &[[Complex<T>; 2]], t: T, floor: T) -> Result<WaveState<T>, SpectralError> {
        let sig = self.s.eigenvalues()?;
        let mut a = vec![T::zero(); sig.len()];
        let mut b = vec![T::zero(); sig.len()];
        for k in 0..sig.len() {
            let (u, _, _) = Self::blocks(sig[k]);
            let ua = adjoint2(&u);
            let p = ua[0][0] * w[k][0] + ua[0][1] * w[k][1];
            let q = ua[1][0] * w[k][0] + ua[1][1] * w[k][1];
            if sig[k] > floor {
                a[k] = p.re / sig[k].sqrt();
            }
            b[k] = q.re;
        }
        Ok(WaveState { u: self.s.synthesize(&a)?, v: self.s.synthesize(&b)?, t })
    }

    /// `e^{-itR}` applied through `U^* e^{-itL} U`.
    pub fn evolve(&self, state: &WaveState<T>, t: T) -> Result<WaveState<T>, SpectralError> {
        let sig = self.s.eigenvalues()?;
        let mut w = self.to_diagonal(state)?;
        for (k, wk) in w.iter_mut().enumerate() {
            let om = sig[k].max(T::zero()).sqrt();
            wk[0] *= Complex::new(T::zero(), -om * t).exp();
            wk[1] *= Complex::new(T::zero(), om * t).exp();
        }
        self.from_diagonal(&w, state.t + t, T::zero())
    }
}

/// `0.9 * 2 / sqrt(sigma_max)`.
pub fn leapfrog_limit<T: Real>(op: &Csr<T>) -> T {
    T::lit(1.8) / largest_eigenvalue(op).sqrt()
}

/// Two-step leapfrog for `u'' = -P u + G(t)`. The returned velocity is the
/// centered difference around the final step.
pub fn propagate_leapfrog<T: Real>(
    op: &Csr<T>,
    state: &WaveState<T>,
    dt: T,
    n_steps: usize,
    source: Option<&(dyn Fn(T) -> Vec<T> + Sync)>,
) -> Result<WaveState<T>, EvolveError> {
    let n = op.nrows();
    check_len(state.u.len(), n)?;
    check_len(state.v.len(), n)?;
    let limit = leapfrog_limit(op);
    if dt > limit {
        return Err(EvolveError::Cfl { dt: dt.f64(), limit: limit.f64() });
    }
    let t0 = state.t;
    let accel = |u: &[T], t: T| -> Vec<T> {
        let mut a = op.mul_vec(u);
        a.iter_mut().for_each(|x| *x = -*x);
        if let Some(g) = source {
            for (x, y) in a.iter_mut().zip(g(t)) {
                *x += y;
            }
        }
        a
    };
    let half = T::lit(0.5);
    let a0 = accel(&state.u, t0);
    let mut prev = state.u.clone();
    let mut cur: Vec<T> = (0..n).map(|i| state.u[i] + dt * state.v[i] + half * dt * dt * a0[i]).collect();
    let mut norms = vec![norm(&state.u)];
    for step in 1..=n_steps {
        let a = accel(&cur, t0 + dt * T::of(step));
        let next: Vec<T> = (0..n).map(|i| T::lit(2.0) * cur[i] - prev[i] + dt * dt * a[i]).collect();
        prev = std::mem::replace(&mut cur, next);
        if source.is_none() {
            let nn = norm(&prev);
            if !nn.is_finite() {
                return Err(EvolveError::Unstable { step });
            }
            norms.push(nn);
            if norms.len() > 10 {
                let old = norms[norms.len() - 11];
                if old > T::zero() && nn > T::lit(2.0) * old && nn > T::lit(2.0) * norms[0] {
                    return Err(EvolveError::Unstable { step });
                }
            }
        }
    }
    // prev = u_n, cur = u_{n+1}; one backward value is needed for the velocity
    let a = accel(&prev, t0 + dt * T::of(n_steps));
    let before: Vec<T> = (0..n).map(|i| T::lit(2.0) * prev[i] - cur[i] + dt * dt * a[i]).collect();
    let v: Vec<T> = (0..n).map(|i| (cur[i] - before[i]) / (T::lit(2.0) * dt)).collect();
    Ok(WaveState { u: prev, v, t: t0 + dt * T::of(n_steps) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble_operators, build_grid, Operator};
    use crate::metric::{make_metric, MetricFamily};
    use crate::spectral::{decompose, Mode};

    fn flat_1d(n: usize) -> (crate::discretize::DiscreteModel<f64>, SpectralData<f64>) {
        let m = make_metric(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
        let model = assemble_operators(&m, &build_grid(1, n, 16.0).unwrap()).unwrap();
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        (model, s)
    }

    fn mode(s: &SpectralData<f64>, k: usize) -> Vec<f64> {
        crate::linalg::col_to_vec(s.vectors().unwrap().as_ref(), k)
    }

    #[test]
    fn eigenmode_oscillates() {
        let (_, s) = flat_1d(48);
        let k = 5;
        let phi = mode(&s, k);
        let sk = s.eigenvalues().unwrap()[k];
        let out = propagate_exact(&s, &WaveState::new(phi.clone(), vec![0.0; 48]), 3.7, None, None).unwrap();
        for (a, b) in out.state.u.iter().zip(&phi) {
            assert!((a - (3.7 * sk.sqrt()).cos() * b).abs() < 1e-10);
        }
        assert!((energy(&s, &WaveState::new(phi, vec![0.0; 48])) - sk).abs() < 1e-12);
    }

    #[test]
    fn constant_source_response() {
        let (_, s) = flat_1d(32);
        let k = 3;
        let phi = mode(&s, k);
        let sk = s.eigenvalues().unwrap()[k];
        let t = 2.5;
        let src = SampledSource::from_fn(t / 200.0, 200, |_| phi.clone());
        let out = propagate_exact(&s, &WaveState::zero(32), t, Some(&src), None).unwrap();
        let expect = (1.0 - (t * sk.sqrt()).cos()) / sk;
        for (a, b) in out.state.u.iter().zip(&phi) {
            assert!((a - expect * b).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_matches_pointwise_propagation() {
        let (model, s) = flat_1d(32);
        let u0: Vec<f64> = (0..32).map(|i| (-(model.grid.coord(i, 0) / 3.0).powi(2)).exp()).collect();
        let u1 = vec![0.0; 32];
        let g: Vec<f64> = (0..32).map(|i| (-(model.grid.coord(i, 0) - 2.0).powi(2)).exp()).collect();
        let dt = 0.02;
        let steps = 100;
        let gsrc = |t: f64| g.iter().map(|x| x * (1.0 + t).recip()).collect::<Vec<_>>();
        let gc: Vec<Vec<f64>> = (0..=steps).map(|j| s.coefficients(&gsrc(j as f64 * dt)).unwrap()).collect();
        let gm = Mat::from_fn(32, steps + 1, |k, j| gc[j][k]);
        let tr = trajectory(&s, &u0, &u1, Some(gm), dt, steps).unwrap();
        for j in [37, 100] {
            let t = j as f64 * dt;
            let src = SampledSource::from_fn(dt, j, gsrc);
            let p = propagate_exact(&s, &WaveState::new(u0.clone(), u1.clone()), t, Some(&src), None).unwrap();
            let st = tr.state_at(&s, j).unwrap();
            for i in 0..32 {
                assert!((st.u[i] - p.state.u[i]).abs() < 1e-8, "{j} {i}");
                assert!((st.v[i] - p.state.v[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn first_order_system_diagonalizes() {
        let (_, s) = flat_1d(32);
        let sys = FirstOrderSystem::new(&s);
        let chk = sys.check(1e-12).unwrap();
        assert!(chk.diagonalization < 1e-12 && chk.unitarity < 1e-12, "{chk:?}");
        let u: Vec<f64> = (0..32).map(|i| (i as f64 * 0.4).sin()).collect();
        let v: Vec<f64> = (0..32).map(|i| (i as f64 * 0.1).cos()).collect();
        let st = WaveState::new(u, v);
        let a = sys.evolve(&st, 1.3).unwrap();
        let b = propagate_exact(&s, &st, 1.3, None, None).unwrap().state;
        for i in 0..32 {
            assert!((a.u[i] - b.u[i]).abs() < 1e-10);
            assert!((a.v[i] - b.v[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn half_wave_group_law() {
        let (_, s) = flat_1d(24);
        let v: Vec<f64> = (0..24).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let a = half_wave(&s, &v, 0.7).unwrap();
        let ab = half_wave_complex(&s, &a, 1.1).unwrap();
        let c = half_wave(&s, &v, 1.8).unwrap();
        for (x, y) in ab.iter().zip(&c) {
            assert!((x - y).norm() < 1e-9);
        }
        let n2: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        assert!((n2.sqrt() - norm(&v)).abs() < 1e-10);
    }

    #[test]
    fn leapfrog_rejects_large_steps() {
        let (model, _) = flat_1d(32);
        let lim = leapfrog_limit(&model.p);
        let st = WaveState::new(vec![1.0; 32], vec![0.0; 32]);
        assert!(matches!(propagate_leapfrog(&model.p, &st, lim * 1.2, 10, None), Err(EvolveError::Cfl { .. })));
    }

    #[test]
    fn leapfrog_tracks_exact_frequency() {
        let (model, s) = flat_1d(64);
        let k = 2;
        let phi = mode(&s, k);
        let om = s.eigenvalues().unwrap()[k].sqrt();
        // at a quarter period the displacement is first order in the phase error
        let quarter = 0.5 * std::f64::consts::PI / om;
        let err = |steps: usize| {
            let dt = quarter / steps as f64;
            let out = propagate_leapfrog(&model.p, &WaveState::new(phi.clone(), vec![0.0; 64]), dt, steps, None).unwrap();
            norm(&out.u)
        };
        let (e1, e2) = (err(200), err(400));
        assert!((e1 / e2 - 4.0).abs() < 0.2, "{e1} {e2}");
    }
}
