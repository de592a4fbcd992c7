//! Quadratic semilinear waves `box u = Q(u')`: Picard iteration, the
//! iteration functionals and lifespan sweeps.

use crate::discretize::DiscreteModel;
use crate::estimates::{apply_spatial, field_words, weighted_derivative_sq, Derivative, EstimateError};
use crate::evolve::{trajectory, EvolveError, Trajectory};
use crate::metric::multi_indices;
use crate::quadrature::simpson;
use crate::report::{fit_power_law, Report, Row, Verdict};
use crate::scalar::Real;
use crate::spectral::{SpectralData, SpectralError};
use faer::Mat;
use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

pub use crate::estimates::sobolev_weight_check;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("quadratic form must be symmetric of size {expected}")]
    Form { expected: usize },
    #[error("{0}")]
    Parameter(String),
}

/// `Q(u') = sum_ab q_ab u'_a u'_b` with `u' = (d_t u, d_1 g^-1 u, ..., d_d g^-1 u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm<T> {
    dim: usize,
    q: Vec<T>,
}

impl<T: Real> QuadraticForm<T> {
    /// Row-major `(1+d) x (1+d)` coefficients.
    pub fn new(d: usize, q: Vec<T>) -> Result<Self, NonlinearError> {
        let m = d + 1;
        if q.len() != m * m {
            return Err(NonlinearError::Form { expected: m });
        }
        for a in 0..m {
            for b in 0..a {
                if (q[a * m + b] - q[b * m + a]).abs() > T::lit(1e-14) * (q[a * m + b].abs() + T::one()) {
                    return Err(NonlinearError::Form { expected: m });
                }
            }
        }
        Ok(QuadraticForm { dim: d, q })
    }

    /// `(d_t u)^2` scaled by `c`.
    pub fn time_squared(d: usize, c: T) -> Self {
        let m = d + 1;
        let mut q = vec![T::zero(); m * m];
        q[0] = c;
        QuadraticForm { dim: d, q }
    }

    pub fn zero(d: usize) -> Self {
        QuadraticForm { dim: d, q: vec![T::zero(); (d + 1) * (d + 1)] }
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().all(|x| *x == T::zero())
    }

    pub fn coefficient(&self, a: usize, b: usize) -> T {
        self.q[a * (self.dim + 1) + b]
    }

    fn uses_space(&self) -> bool {
        let m = self.dim + 1;
        (0..m).any(|a| (1..m).any(|b| self.q[a * m + b] != T::zero()))
    }

    /// Pointwise evaluation on node-value matrices (one column per time).
    pub fn evaluate(&self, model: &DiscreteModel<T>, u: &Mat<T>, ut: &Mat<T>) -> Mat<T> {
        let m = self.dim + 1;
        let mut parts = vec![ut.clone()];
        if self.uses_space() {
            for a in 0..self.dim {
                parts.push(model.dcentered_tilde[a].mul_dense(u.as_ref()));
            }
        }
        let k = parts.len();
        Mat::from_fn(ut.nrows(), ut.ncols(), |i, j| {
            let mut acc = T::zero();
            for a in 0..k {
                for b in 0..k {
                    let c = self.q[a * m + b];
                    if c != T::zero() {
                        acc += c * parts[a][(i, j)] * parts[b][(i, j)];
                    }
                }
            }
            acc
        })
    }
}

/// Default number of vector fields in the data norm, `2 (ceil((d-1)/2) + 1)`.
pub fn default_data_order(d: usize) -> usize {
    2 * (d.saturating_sub(1).div_ceil(2) + 1)
}

/// `sum ||d^j Omega^a u0|| (|a| + j <= M + 1) + sum ||d^j Omega^a u1|| (<= M)`
/// with the flat difference and rotation matrices.
pub fn data_norm<T: Real>(model: &DiscreteModel<T>, u0: &[T], u1: &[T], m: usize) -> T {
    let d = model.dim();
    let n_rot = model.rot.len();
    let part = |h: &[T], order: usize| -> T {
        let mut total = T::zero();
        for k in 0..=order {
            for rot in multi_indices(n_rot.max(1), k) {
                if n_rot == 0 && k > 0 {
                    continue;
                }
                let mut base = h.to_vec();
                for &r in rot.iter().rev() {
                    base = model.rot[r].1.mul_vec(&base);
                }
                for j in 0..=(order - k) {
                    for der in multi_indices(d, j) {
                        let mut v = base.clone();
                        for &a in der.iter().rev() {
                            v = model.dcentered[a].mul_vec(&v);
                        }
                        total += model.l2(&v);
                    }
                }
            }
        }
        total
    };
    part(u0, m + 1) + part(u1, m)
}

/// Settings shared by the iteration functionals.
#[derive(Clone, Copy, Debug)]
pub struct FunctionalOptions {
    /// Number of vector fields in `M_k` and `A_k`.
    pub order: usize,
    /// Exponent in `K_n(T) = T^(1/n)`.
    pub n: f64,
}

impl Default for FunctionalOptions {
    fn default() -> Self {
        FunctionalOptions { order: 1, n: 2.0 }
    }
}

/// `(d - 1) / 4`.
pub fn mu_d(d: usize) -> f64 {
    (d as f64 - 1.0) / 4.0
}

/// `T^(1/n)` for `d = 3` or decay rate 1, otherwise 1.
pub fn k_n<T: Real>(model: &DiscreteModel<T>, t: T, n: f64) -> T {
    if model.dim() == 3 || model.metric.decay_rate() <= T::one() {
        t.powf(T::lit(1.0 / n))
    } else {
        T::one()
    }
}

/// Node values of `u`, `d_t u` and `d_t^2 u`.
struct Nodal<T> {
    tower: Vec<Mat<T>>,
}

impl<T: Real> Nodal<T> {
    fn from(s: &SpectralData<T>, traj: &Trajectory<T>) -> Result<Self, SpectralError> {
        let v = s.vectors()?;
        let acc = traj.accel_coefficients(s)?;
        Ok(Nodal { tower: vec![v * &traj.u, v * &traj.v, v * &acc] })
    }

    fn sub(&self, other: &Nodal<T>) -> Nodal<T> {
        Nodal { tower: self.tower.iter().zip(&other.tower).map(|(a, b)| a - b).collect() }
    }
}

/// Eigen coefficients of `d_t^i u`, `i = 0, 1, 2`.
fn coefficient_tower<T: Real>(s: &SpectralData<T>, traj: &Trajectory<T>) -> Result<Vec<Mat<T>>, SpectralError> {
    Ok(vec![traj.u.clone(), traj.v.clone(), traj.accel_coefficients(s)?])
}

fn check_order(order: usize) -> Result<(), NonlinearError> {
    if order > 1 {
        return Err(NonlinearError::Parameter(format!("functional order {order} above 1 is not supported")));
    }
    Ok(())
}

fn functional_parts<T: Real>(
    model: &DiscreteModel<T>,
    s: &SpectralData<T>,
    coeffs: &[Mat<T>],
    nodal: &Nodal<T>,
    dt: T,
    opts: &FunctionalOptions,
) -> Result<T, NonlinearError> {
    let sig = s.eigenvalues()?;
    let vol = model.grid.cell_volume();
    let nt = coeffs[0].ncols();
    let mut sup = T::zero();
    for j in 0..nt {
        let mut acc = T::zero();
        for i in 0..=opts.order + 1 {
            for p in 0..=(opts.order + 1 - i) {
                if i + p == 0 {
                    continue;
                }
                let c = &coeffs[i];
                let sq = (0..c.nrows()).fold(T::zero(), |a, k| {
                    let x = c[(k, j)];
                    a + sig[k].max(T::zero()).powi(p as i32) * x * x
                });
                acc += (sq * vol).sqrt();
            }
        }
        sup = sup.max(acc);
    }
    let t = dt * T::of(nt - 1);
    let mu = T::lit(mu_d(model.dim()));
    let mut weighted = T::zero();
    for (m, word) in field_words(model.dim(), opts.order) {
        let w = apply_spatial(model, &word, &nodal.tower[m]);
        let wt = apply_spatial(model, &word, &nodal.tower[m + 1]);
        let profile = weighted_derivative_sq(model, s, &w, &wt, mu, Derivative::Gradient)?;
        weighted += simpson(&profile, dt).max(T::zero()).sqrt();
    }
    Ok(sup + weighted / k_n(model, t, opts.n))
}

/// `M_k(T)` of a sampled solution, with `T` the last sample time.
pub fn functional_m<T: Real>(model: &DiscreteModel<T>, s: &SpectralData<T>, traj: &Trajectory<T>, opts: &FunctionalOptions) -> Result<T, NonlinearError> {
    check_order(opts.order)?;
    let nodal = Nodal::from(s, traj)?;
    functional_parts(model, s, &coefficient_tower(s, traj)?, &nodal, traj.dt, opts)
}

/// One Picard iterate with everything the functionals need.
pub struct Iterate<T> {
    pub traj: Trajectory<T>,
    nodal: Nodal<T>,
}

impl<T: Real> Iterate<T> {
    pub fn nodal_u(&self) -> &Mat<T> {
        &self.nodal.tower[0]
    }

    pub fn sup_abs(&self) -> T {
        let u = &self.nodal.tower[0];
        let mut m = T::zero();
        for j in 0..u.ncols() {
            for i in 0..u.nrows() {
                m = m.max(u[(i, j)].abs());
            }
        }
        m
    }
}

/// Solves `box u_k = Q(u'_{k-1})` with the given data on `dt * (0..=steps)`.
/// `prev = None` stands for `u_{-1} = 0`.
#[allow(clippy::too_many_arguments)]
pub fn picard_step<T: Real>(
    model: &DiscreteModel<T>,
    s: &SpectralData<T>,
    prev: Option<&Iterate<T>>,
    u0: &[T],
    u1: &[T],
    q: &QuadraticForm<T>,
    dt: T,
    steps: usize,
) -> Result<Iterate<T>, NonlinearError> {
    let source = match prev {
        Some(p) if !q.is_zero() => {
            let g = q.evaluate(model, &p.nodal.tower[0], &p.nodal.tower[1]);
            for j in 0..g.ncols() {
                for i in 0..g.nrows() {
                    if !g[(i, j)].is_finite() {
                        return Err(NonlinearError::Parameter("non-finite nonlinearity".into()));
                    }
                }
            }
            Some(s.vectors()?.transpose() * &g)
        }
        _ => None,
    };
    let traj = trajectory(s, u0, u1, source, dt, steps)?;
    let nodal = Nodal::from(s, &traj)?;
    Ok(Iterate { traj, nodal })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    HorizonReached,
    FunctionalBlowup,
    IterationDivergence,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::HorizonReached => "horizon_reached",
            Termination::FunctionalBlowup => "functional_blowup",
            Termination::IterationDivergence => "iteration_divergence",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PicardOptions {
    pub max_iter: usize,
    /// Convergence when `A_k < tol * M_0`.
    pub tol: f64,
    /// Blow-up when `sup |u|` exceeds this multiple of the data amplitude.
    pub blowup_factor: f64,
    pub panels_per_unit: usize,
    pub functional: FunctionalOptions,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { max_iter: 20, tol: 1e-8, blowup_factor: 1e3, panels_per_unit: 16, functional: FunctionalOptions::default() }
    }
}

/// Outcome of Picard iteration on one window.
#[derive(Clone, Debug)]
pub struct PicardRun {
    pub t: f64,
    pub converged: bool,
    /// Set when the run did not converge.
    pub failure: Option<Termination>,
    pub m_trace: Vec<f64>,
    /// `A_k` for `k = 1, 2, ...`.
    pub a_trace: Vec<f64>,
}

impl PicardRun {
    pub fn iterations(&self) -> usize {
        self.m_trace.len()
    }

    /// Largest `A_k / A_{k-1}` for `k >= 2`.
    pub fn worst_contraction(&self) -> Option<f64> {
        self.a_trace.windows(2).map(|w| w[1] / w[0]).filter(|r| r.is_finite()).reduce(f64::max)
    }
}

fn amplitude<T: Real>(u0: &[T], u1: &[T]) -> T {
    u0.iter().chain(u1).fold(T::zero(), |m, x| m.max(x.abs()))
}

fn window_steps<T: Real>(t: T, panels: usize) -> (T, usize) {
    let dt = T::one() / T::of(panels);
    let mut steps = (t / dt).ceil().to_usize().unwrap_or(2).max(2);
    steps += steps % 2;
    (dt, steps)
}

/// Picard iteration from `u_{-1} = 0` on `[0, t]`.
pub fn picard<T: Real>(
    model: &DiscreteModel<T>,
    s: &SpectralData<T>,
    u0: &[T],
    u1: &[T],
    q: &QuadraticForm<T>,
    t: T,
    opts: &PicardOptions,
) -> Result<PicardRun, NonlinearError> {
    check_order(opts.functional.order)?;
    let (dt, steps) = window_steps(t, opts.panels_per_unit);
    let amp = amplitude(u0, u1).f64();
    let mut run = PicardRun { t: (dt * T::of(steps)).f64(), converged: false, failure: None, m_trace: Vec::new(), a_trace: Vec::new() };
    let mut prev = picard_step(model, s, None, u0, u1, q, dt, steps)?;
    let m0 = functional_parts(model, s, &coefficient_tower(s, &prev.traj)?, &prev.nodal, dt, &opts.functional)?.f64();
    run.m_trace.push(m0);
    if q.is_zero() || m0 == 0.0 {
        run.converged = true;
        return Ok(run);
    }
    let mut growth = 0;
    for _ in 1..opts.max_iter {
        let next = match picard_step(model, s, Some(&prev), u0, u1, q, dt, steps) {
            Ok(x) => x,
            Err(NonlinearError::Parameter(_)) => {
                run.failure = Some(Termination::IterationDivergence);
                return Ok(run);
            }
            Err(e) => return Err(e),
        };
        if !(next.sup_abs().f64() <= opts.blowup_factor * amp) {
            run.failure = Some(Termination::FunctionalBlowup);
            return Ok(run);
        }
        let coeffs: Vec<Mat<T>> = coefficient_tower(s, &next.traj)?.iter().zip(coefficient_tower(s, &prev.traj)?).map(|(a, b)| a - &b).collect();
        let diff = next.nodal.sub(&prev.nodal);
        let a = functional_parts(model, s, &coeffs, &diff, dt, &opts.functional)?.f64();
        let m = functional_parts(model, s, &coefficient_tower(s, &next.traj)?, &next.nodal, dt, &opts.functional)?.f64();
        run.m_trace.push(m);
        if !a.is_finite() || !m.is_finite() {
            run.failure = Some(Termination::IterationDivergence);
            return Ok(run);
        }
        if let Some(&last) = run.a_trace.last() {
            growth = if a >= last { growth + 1 } else { 0 };
        }
        run.a_trace.push(a);
        if a < opts.tol * m0 {
            run.converged = true;
            return Ok(run);
        }
        // three growing differences in a row, or differences far above the data size
        if growth >= 3 || a > opts.blowup_factor * m0 {
            run.failure = Some(Termination::IterationDivergence);
            return Ok(run);
        }
        prev = next;
    }
    run.failure = Some(Termination::IterationDivergence);
    Ok(run)
}

#[derive(Clone, Debug)]
pub struct LifespanRecord {
    pub delta: f64,
    pub t_obs: f64,
    pub reason: Termination,
    pub iterations: usize,
    pub final_m: f64,
    pub m_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LifespanOptions {
    pub picard: PicardOptions,
    pub t_max: f64,
    pub refinements: usize,
    /// Radius holding the data, for the causal window.
    pub r_data: f64,
}

impl Default for LifespanOptions {
    fn default() -> Self {
        LifespanOptions { picard: PicardOptions::default(), t_max: f64::INFINITY, refinements: 4, r_data: 0.0 }
    }
}

/// Largest window on which the iteration converges, searched by doubling
/// from `T = 1` and then bisecting.
pub fn lifespan<T: Real>(
    model: &DiscreteModel<T>,
    s: &SpectralData<T>,
    u0: &[T],
    u1: &[T],
    delta: f64,
    q: &QuadraticForm<T>,
    opts: &LifespanOptions,
) -> Result<LifespanRecord, NonlinearError> {
    if !(delta > 0.0) {
        return Err(NonlinearError::Parameter(format!("delta = {delta} must be positive")));
    }
    let horizon = opts.t_max.min(model.causal_window(T::lit(opts.r_data)).f64());
    if !(horizon > 0.0) {
        return Err(NonlinearError::Parameter("empty causal window".into()));
    }
    let run = |t: f64| picard(model, s, u0, u1, q, T::lit(t), &opts.picard);
    let mut good: Option<PicardRun> = None;
    let mut good_t = 0.0;
    let mut t = horizon.min(1.0);
    let (mut bad_t, reason) = loop {
        let r = run(t)?;
        if r.converged {
            good_t = t;
            good = Some(r);
            if t >= horizon {
                let g = good.unwrap();
                return Ok(LifespanRecord {
                    delta,
                    t_obs: good_t,
                    reason: Termination::HorizonReached,
                    iterations: g.iterations(),
                    final_m: *g.m_trace.last().unwrap_or(&0.0),
                    m_trace: g.m_trace,
                });
            }
            t = (2.0 * t).min(horizon);
        } else {
            break (t, r.failure.unwrap_or(Termination::IterationDivergence));
        }
    };
    for _ in 0..opts.refinements {
        let mid = 0.5 * (good_t + bad_t);
        let r = run(mid)?;
        if r.converged {
            good_t = mid;
            good = Some(r);
        } else {
            bad_t = mid;
        }
    }
    let (iterations, m_trace) = good.map(|g| (g.iterations(), g.m_trace)).unwrap_or((0, Vec::new()));
    Ok(LifespanRecord { delta, t_obs: good_t, reason, iterations, final_m: *m_trace.last().unwrap_or(&0.0), m_trace })
}

/// Data of unit size in the data norm, scaled by `delta`.
pub fn scaled_data<T: Real>(model: &DiscreteModel<T>, u0: &[T], u1: &[T], delta: T, m: usize) -> (Vec<T>, Vec<T>) {
    let base = data_norm(model, u0, u1, m);
    let c = delta / base;
    (u0.iter().map(|x| *x * c).collect(), u1.iter().map(|x| *x * c).collect())
}

/// Lifespans for a descending list of data sizes, and the growth exponent
/// of `T_obs` in `1 / delta`.
#[allow(clippy::too_many_arguments)]
pub fn lifespan_sweep<T: Real>(
    model: &DiscreteModel<T>,
    s: &SpectralData<T>,
    u0: &[T],
    u1: &[T],
    deltas: &[f64],
    q: &QuadraticForm<T>,
    opts: &LifespanOptions,
    data_order: usize,
) -> Result<(Report, Vec<LifespanRecord>), NonlinearError> {
    if deltas.len() < 4 {
        return Err(NonlinearError::Parameter("at least four data sizes are needed".into()));
    }
    let hi = deltas.iter().cloned().fold(0.0, f64::max);
    let lo = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    if (hi / lo).log10() < 1.0 {
        log::warn!("data sizes span {:.2} decades", (hi / lo).log10());
    }
    let records: Vec<LifespanRecord> = deltas
        .par_iter()
        .map(|&d| {
            let (a, b) = scaled_data(model, u0, u1, T::lit(d), data_order);
            lifespan(model, s, &a, &b, d, q, opts)
        })
        .collect::<Result<_, _>>()?;
    let mut report = Report::new("lifespan_sweep");
    let horizon = opts.t_max.min(model.causal_window(T::lit(opts.r_data)).f64());
    report.note(format!("lifespans are capped at {horizon:.4}; the fit certifies a lower bound on the growth rate only"));
    if q.is_zero() {
        report.note("linear");
    }
    let mut sorted = records.clone();
    sorted.sort_by(|a, b| b.delta.partial_cmp(&a.delta).unwrap());
    let mut monotone = true;
    for w in sorted.windows(2) {
        if w[1].t_obs < w[0].t_obs * (1.0 - 1e-9) {
            monotone = false;
            report.note(format!("T_obs decreases from delta {} to {}", w[0].delta, w[1].delta));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in &sorted {
        let truncated = r.reason == Termination::HorizonReached;
        report.rows.push(
            Row::new(&[("delta", r.delta), ("iterations", r.iterations as f64), ("final_m", r.final_m)], r.t_obs, f64::NAN, if truncated { Verdict::Inconclusive } else { Verdict::Pass })
                .named(r.reason.to_string()),
        );
        if truncated {
            report.note(format!("delta {}: horizon reached, excluded from the fit", r.delta));
        } else if r.t_obs > 0.0 {
            xs.push(1.0 / r.delta);
            ys.push(r.t_obs);
        }
    }
    let fit = fit_power_law(&xs, &ys);
    report.fit = fit;
    report.predicted = Some(1.0);
    report.set_series("1/delta", "T_obs", xs.iter().cloned().zip(ys.iter().cloned()).collect());
    report.verdict = match fit {
        _ if xs.len() < 2 => Verdict::Inconclusive,
        Some(f) if f.r_squared >= 0.85 => Verdict::from_bool(f.exponent >= 1.0 && monotone),
        Some(_) => Verdict::Inconclusive,
        None => Verdict::Inconclusive,
    };
    if !monotone && report.verdict == Verdict::Pass {
        report.verdict = Verdict::Fail;
    }
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble_operators, build_grid, Operator};
    use crate::metric::{make_metric, MetricFamily};
    use crate::spectral::{decompose, Mode};

    fn setup(d: usize, n: usize, l: f64) -> (DiscreteModel<f64>, SpectralData<f64>) {
        let m = make_metric(MetricFamily::Flat, d, 2.0, 0.0).unwrap();
        let model = assemble_operators(&m, &build_grid(d, n, l).unwrap()).unwrap();
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        (model, s)
    }

    fn bump(model: &DiscreteModel<f64>, w: f64) -> Vec<f64> {
        (0..model.len()).map(|i| (-(model.grid.radius(i) / w).powi(2)).exp()).collect()
    }

    #[test]
    fn order_formula() {
        assert_eq!(default_data_order(3), 4);
        assert_eq!(default_data_order(1), 2);
    }

    #[test]
    fn data_norm_is_homogeneous() {
        let (m, _) = setup(2, 10, 4.0);
        let u = bump(&m, 1.5);
        let a = data_norm(&m, &u, &u, 2);
        let b = data_norm(&m, &u.iter().map(|x| -3.0 * x).collect::<Vec<_>>(), &u.iter().map(|x| -3.0 * x).collect::<Vec<_>>(), 2);
        assert!((b - 3.0 * a).abs() <= 1e-12 * b);
        assert_eq!(data_norm(&m, &vec![0.0; m.len()], &vec![0.0; m.len()], 2), 0.0);
    }

    #[test]
    fn asymmetric_form_rejected() {
        assert!(QuadraticForm::new(1, vec![1.0, 2.0, 0.0, 1.0]).is_err());
        assert!(QuadraticForm::new(1, vec![1.0, 2.0, 2.0, 1.0]).is_ok());
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let (m, s) = setup(1, 24, 8.0);
        let z = vec![0.0; m.len()];
        let q = QuadraticForm::time_squared(1, 1.0);
        let r = picard(&m, &s, &z, &z, &q, 2.0, &PicardOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.m_trace.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn linear_iterates_do_not_move() {
        let (m, s) = setup(1, 24, 8.0);
        let u = bump(&m, 1.5);
        let q = QuadraticForm::zero(1);
        let a = picard_step(&m, &s, None, &u, &u, &q, 1.0 / 16.0, 16).unwrap();
        let b = picard_step(&m, &s, Some(&a), &u, &u, &q, 1.0 / 16.0, 16).unwrap();
        assert_eq!(a.traj.u, b.traj.u);
    }

    #[test]
    fn eigenmode_energy_part() {
        // u = cos(t w) phi with ||phi|| = 1: the energy sum is a polynomial in w
        let (m, s) = setup(1, 16, 4.0);
        let k = 3;
        let sig = s.eigenvalues().unwrap()[k];
        let w = sig.sqrt();
        let phi: Vec<f64> = (0..m.len()).map(|i| s.vectors().unwrap()[(i, k)] / m.grid.cell_volume().sqrt()).collect();
        let (dt, steps) = (1.0 / 64.0, 64);
        let traj = trajectory(&s, &phi, &vec![0.0; m.len()], None, dt, steps).unwrap();
        let opts = FunctionalOptions { order: 1, n: 2.0 };
        let total = functional_m(&m, &s, &traj, &opts).unwrap();
        let nodal = Nodal::from(&s, &traj).unwrap();
        let zero = Nodal { tower: nodal.tower.iter().map(|x| Mat::zeros(x.nrows(), x.ncols())).collect() };
        let energy_only = functional_parts(&m, &s, &coefficient_tower(&s, &traj).unwrap(), &zero, dt, &opts).unwrap();
        // terms: (i,p) = (0,1) |cos| w, (0,2) |cos| w^2, (1,0) |sin| w, (1,1) |sin| w^2, (2,0) |cos| w^2
        let expect = (0..=steps)
            .map(|j| {
                let t = dt * j as f64;
                let (sn, cs) = (w * t).sin_cos();
                cs.abs() * (w + 2.0 * w * w) + sn.abs() * (w + w * w)
            })
            .fold(0.0, f64::max);
        assert!((energy_only - expect).abs() < 1e-10 * expect);
        assert!(total > energy_only);
    }

    #[test]
    fn linear_lifespan_reaches_horizon() {
        let (m, s) = setup(1, 24, 8.0);
        let u = bump(&m, 1.0);
        let opts = LifespanOptions { t_max: 3.0, ..Default::default() };
        let r = lifespan(&m, &s, &u, &u, 0.1, &QuadraticForm::zero(1), &opts).unwrap();
        assert_eq!(r.reason, Termination::HorizonReached);
        assert_eq!(r.t_obs, 3.0);
    }

    #[test]
    fn large_data_stops_early() {
        let (m, s) = setup(1, 64, 16.0);
        let u = bump(&m, 1.0);
        let z = vec![0.0; m.len()];
        let q = QuadraticForm::time_squared(1, 1.0);
        let opts = LifespanOptions { r_data: 3.0, ..Default::default() };
        let mut last = 0.0;
        for delta in [10.0, 5.0, 2.5] {
            let (a, b) = scaled_data(&m, &z, &u, delta, default_data_order(1));
            let r = lifespan(&m, &s, &a, &b, delta, &q, &opts).unwrap();
            assert_ne!(r.reason, Termination::HorizonReached);
            assert!(r.t_obs >= last);
            last = r.t_obs;
        }
    }
}
