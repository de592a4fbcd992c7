//! Functional calculus for the assembled operators: eigendecompositions,
//! shifted solves, the quadrature square root, smooth cutoffs and spectral
//! projectors.

use crate::discretize::{DiscreteModel, Operator};
use crate::linalg::{conjugate_gradient, dot, norm, sym_eig};
use crate::quadrature::gauss_legendre;
use crate::scalar::Real;
use crate::sparse::Csr;
use faer::Mat;
use num_complex::Complex;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("dense decomposition of {n} unknowns exceeds the cap of {cap}")]
    DenseCapExceeded { n: usize, cap: usize },
    #[error("this request needs the full spectrum; build the data in dense mode")]
    RequiresDense,
    #[error("eigenvalue {value} lies below the clamping tolerance {tol}")]
    NegativeEigenvalue { value: f64, tol: f64 },
    #[error("eigensolver failed")]
    EigenFailure,
    #[error("shifted solve did not converge; worst relative residual {worst_residual:e}")]
    SolverNotConverged { worst_residual: f64 },
    #[error("operator is numerically singular (smallest eigenvalue {sigma_min:e})")]
    KernelComponent { sigma_min: f64 },
    #[error("quadrature needs at least 8 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("n_max must be at least 1")]
    BadPartition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    DenseEig,
    Iterative,
}

pub const DEFAULT_DENSE_CAP: usize = 5000;
const SOLVE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Eigen<T> {
    values: Vec<T>,
    vectors: Mat<T>,
}

/// Eigendecomposition or iterative handle for one symmetric operator.
#[derive(Clone, Debug)]
pub struct SpectralData<T> {
    op: Csr<T>,
    eig: Option<Eigen<T>>,
    clamped: usize,
}

pub fn decompose<T: Real>(model: &DiscreteModel<T>, which: Operator, mode: Mode) -> Result<SpectralData<T>, SpectralError> {
    decompose_with_cap(model, which, mode, DEFAULT_DENSE_CAP)
}

pub fn decompose_with_cap<T: Real>(
    model: &DiscreteModel<T>,
    which: Operator,
    mode: Mode,
    cap: usize,
) -> Result<SpectralData<T>, SpectralError> {
    SpectralData::from_operator(model.operator(which).clone(), mode, cap)
}

impl<T: Real> SpectralData<T> {
    pub fn from_operator(op: Csr<T>, mode: Mode, cap: usize) -> Result<Self, SpectralError> {
        let n = op.nrows();
        if mode == Mode::Iterative {
            return Ok(SpectralData { op, eig: None, clamped: 0 });
        }
        if n > cap {
            return Err(SpectralError::DenseCapExceeded { n, cap });
        }
        let (mut values, vectors) = sym_eig(op.to_dense().as_ref()).ok_or(SpectralError::EigenFailure)?;
        let tol = T::lit(1e-10) * op.max_abs();
        let mut clamped = 0;
        for v in values.iter_mut() {
            if *v < T::zero() {
                if *v < -tol {
                    return Err(SpectralError::NegativeEigenvalue { value: v.f64(), tol: tol.f64() });
                }
                *v = T::zero();
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} slightly negative eigenvalues to zero");
        }
        Ok(SpectralData { op, eig: Some(Eigen { values, vectors }), clamped })
    }

    pub fn operator(&self) -> &Csr<T> {
        &self.op
    }

    pub fn len(&self) -> usize {
        self.op.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.op.nrows() == 0
    }

    pub fn mode(&self) -> Mode {
        if self.eig.is_some() {
            Mode::DenseEig
        } else {
            Mode::Iterative
        }
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn eigenvalues(&self) -> Result<&[T], SpectralError> {
        self.eig.as_ref().map(|e| e.values.as_slice()).ok_or(SpectralError::RequiresDense)
    }

    pub fn vectors(&self) -> Result<&Mat<T>, SpectralError> {
        self.eig.as_ref().map(|e| &e.vectors).ok_or(SpectralError::RequiresDense)
    }

    /// `(max |P - V S V^T|, max |V^T V - I|)`.
    pub fn reconstruction_residuals(&self) -> Result<(T, T), SpectralError> {
        let e = self.eig.as_ref().ok_or(SpectralError::RequiresDense)?;
        let n = self.len();
        let v = &e.vectors;
        let vs = Mat::from_fn(n, n, |i, j| v[(i, j)] * e.values[j]);
        let rec = &vs * v.transpose();
        let dense = self.op.to_dense();
        let r1 = crate::linalg::max_abs_mat((&rec - &dense).as_ref());
        let gram = v.transpose() * v;
        let r2 = crate::linalg::max_abs_mat((&gram - Mat::<T>::identity(n, n)).as_ref());
        Ok((r1, r2))
    }

    /// Eigen-coefficients `V^T v`.
    pub fn coefficients(&self, v: &[T]) -> Result<Vec<T>, SpectralError> {
        Ok(crate::linalg::mat_t_vec(self.vectors()?.as_ref(), v))
    }

    /// `V c`.
    pub fn synthesize(&self, c: &[T]) -> Result<Vec<T>, SpectralError> {
        Ok(crate::linalg::mat_vec(self.vectors()?.as_ref(), c))
    }

    pub fn apply_function(&self, f: impl Fn(T) -> T, v: &[T]) -> Result<Vec<T>, SpectralError> {
        let e = self.eig.as_ref().ok_or(SpectralError::RequiresDense)?;
        let c = self.coefficients(v)?;
        let fc: Vec<T> = c.iter().zip(&e.values).map(|(&ck, &s)| f(s) * ck).collect();
        self.synthesize(&fc)
    }

    /// Dense `V f(S) V^T`.
    pub fn function_matrix(&self, f: impl Fn(T) -> T) -> Result<Mat<T>, SpectralError> {
        let e = self.eig.as_ref().ok_or(SpectralError::RequiresDense)?;
        let n = self.len();
        let v = &e.vectors;
        let fv: Vec<T> = e.values.iter().map(|&s| f(s)).collect();
        let scaled = Mat::from_fn(n, n, |i, j| v[(i, j)] * fv[j]);
        Ok(&scaled * v.transpose())
    }

    /// `(P - z)^-1 v` for complex `z` off the spectrum.
    pub fn resolvent(&self, z: Complex<T>, v: &[T]) -> Result<Vec<Complex<T>>, SpectralError> {
        let e = self.eig.as_ref().ok_or(SpectralError::RequiresDense)?;
        let c = self.coefficients(v)?;
        let n = self.len();
        let mut re = vec![T::zero(); n];
        let mut im = vec![T::zero(); n];
        for k in 0..n {
            let r = Complex::new(c[k], T::zero()) / (Complex::new(e.values[k], T::zero()) - z);
            re[k] = r.re;
            im[k] = r.im;
        }
        let re = self.synthesize(&re)?;
        let im = self.synthesize(&im)?;
        Ok(re.into_iter().zip(im).map(|(a, b)| Complex::new(a, b)).collect())
    }

    /// `(s + P)^-1 v` for `s >= 0`, by conjugate gradients to relative
    /// residual 1e-12. Returns the solution and its residual.
    pub fn solve_shifted(&self, s: T, v: &[T], warm: Option<&[T]>) -> (Vec<T>, T) {
        solve_shifted(&self.op, s, v, warm)
    }

    /// Extreme eigenvalues; estimated iteratively when no decomposition is held.
    pub fn sigma_bounds(&self) -> Result<(T, T), SpectralError> {
        if let Some(e) = &self.eig {
            return Ok((e.values[0], *e.values.last().unwrap_or(&T::zero())));
        }
        estimate_extremes(&self.op)
    }

    pub fn projector(&self, lo: T, hi: T) -> Result<Projector<T>, SpectralError> {
        spectral_projector(self, lo, hi)
    }
}

/// `(s + A)^-1 v` by conjugate gradients.
pub fn solve_shifted<T: Real>(op: &Csr<T>, s: T, v: &[T], warm: Option<&[T]>) -> (Vec<T>, T) {
    let mut x = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![T::zero(); v.len()]);
    let apply = |u: &[T], out: &mut [T]| {
        op.matvec(u, out);
        for (o, &ui) in out.iter_mut().zip(u) {
            *o += s * ui;
        }
    };
    let tol = T::lit(SOLVE_TOL).max(T::epsilon() * T::lit(100.0));
    let (res, _) = conjugate_gradient(apply, v, &mut x, tol, 20 * v.len() + 100);
    (x, res)
}

/// Largest eigenvalue of a positive semidefinite operator by power iteration
/// (relative change 1e-6 between sweeps).
pub fn largest_eigenvalue<T: Real>(op: &Csr<T>) -> T {
    let mut x = probe_vector(op.nrows());
    let mut hi = T::zero();
    for _ in 0..200 {
        let y = op.mul_vec(&x);
        let ny = norm(&y);
        if ny == T::zero() {
            return T::zero();
        }
        let new = dot(&x, &y) / dot(&x, &x);
        x = y.into_iter().map(|v| v / ny).collect();
        if (new - hi).abs() <= T::lit(1e-6) * new {
            return new;
        }
        hi = new;
    }
    hi
}

fn probe_vector<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::lit(1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0)).collect()
}

fn estimate_extremes<T: Real>(op: &Csr<T>) -> Result<(T, T), SpectralError> {
    let hi = largest_eigenvalue(op);
    let start: Vec<T> = probe_vector(op.nrows());
    // inverse iteration for the bottom of the spectrum
    let mut x = start;
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut lo = T::zero();
    for _ in 0..100 {
        let (y, res) = solve_shifted(op, T::zero(), &x, None);
        if res > T::lit(1e-8) {
            return Err(SpectralError::SolverNotConverged { worst_residual: res.f64() });
        }
        let ny = norm(&y);
        let new = ny.recip();
        x = y.into_iter().map(|v| v / ny).collect();
        if (new - lo).abs() <= T::lit(1e-8) * new {
            lo = new;
            break;
        }
        lo = new;
    }
    Ok((lo, hi))
}

/// Result of the quadrature square root.
#[derive(Clone, Debug)]
pub struct SqrtQuadrature<T> {
    pub value: Vec<T>,
    pub sigma_min: T,
    pub sigma_max: T,
    pub sigma_ref: T,
    pub worst_residual: T,
}

/// `P^(1/2) v` from `(1/pi) int s^(-1/2) P (s + P)^-1 v ds`, substituting
/// `s = sigma_ref tan^2(theta)` and applying Gauss-Legendre in `theta`.
pub fn sqrt_quadrature<T: Real>(model: &DiscreteModel<T>, v: &[T], n_nodes: usize) -> Result<SqrtQuadrature<T>, SpectralError> {
    sqrt_quadrature_op(&model.p, v, n_nodes)
}

pub fn sqrt_quadrature_op<T: Real>(op: &Csr<T>, v: &[T], n_nodes: usize) -> Result<SqrtQuadrature<T>, SpectralError> {
    if n_nodes < 8 {
        return Err(SpectralError::TooFewNodes(n_nodes));
    }
    let (lo, hi) = estimate_extremes(op)?;
    if !(lo > T::lit(1e-12) * hi) {
        return Err(SpectralError::KernelComponent { sigma_min: lo.f64() });
    }
    // the geometric mean balances the integrand's poles at both ends of the spectrum
    let sigma_ref = (lo * hi).sqrt();
    let (theta, w) = gauss_legendre(n_nodes, T::zero(), T::FRAC_PI_2());
    let parts: Vec<(Vec<T>, T)> = theta
        .par_iter()
        .zip(w.par_iter())
        .map(|(&th, &wq)| {
            let t = th.tan();
            let s = sigma_ref * t * t;
            let (x, res) = solve_shifted(op, s, v, None);
            // s^(-1/2) ds = 2 sqrt(sigma_ref) sec^2(theta) dtheta; P (s+P)^-1 v = v - s x
            let c = T::lit(2.0) * sigma_ref.sqrt() / (th.cos() * th.cos()) * wq / T::PI();
            let term: Vec<T> = v.iter().zip(&x).map(|(&vi, &xi)| c * (vi - s * xi)).collect();
            (term, res)
        })
        .collect();
    let mut value = vec![T::zero(); v.len()];
    let mut worst = T::zero();
    for (term, res) in parts {
        worst = worst.max(res);
        for (a, b) in value.iter_mut().zip(term) {
            *a += b;
        }
    }
    if worst > T::lit(1e-10).max(T::epsilon() * T::lit(1e4)) {
        return Err(SpectralError::SolverNotConverged { worst_residual: worst.f64() });
    }
    Ok(SqrtQuadrature { value, sigma_min: lo, sigma_max: hi, sigma_ref, worst_residual: worst })
}

/// C^3 septic smoothstep on `[0, 1]`.
pub fn smoothstep<T: Real>(t: T) -> T {
    if t <= T::zero() {
        return T::zero();
    }
    if t >= T::one() {
        return T::one();
    }
    let t4 = t * t * t * t;
    t4 * (T::lit(35.0) + t * (T::lit(-84.0) + t * (T::lit(70.0) + t * T::lit(-20.0))))
}

/// Derivative of [`smoothstep`].
pub fn smoothstep_derivative<T: Real>(t: T) -> T {
    if t <= T::zero() || t >= T::one() {
        return T::zero();
    }
    let s = T::one() - t;
    T::lit(140.0) * t * t * t * s * s * s
}

/// Cutoff equal to 1 on `(-inf, 1/2]` and 0 on `[1, inf)`.
pub fn chi<T: Real>(x: T) -> T {
    T::one() - smoothstep(T::lit(2.0) * x - T::one())
}

/// Dyadic partition of unity built from [`chi`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DyadicPartition {
    pub n_max: usize,
}

pub fn build_dyadic(n_max: usize) -> Result<DyadicPartition, SpectralError> {
    if n_max < 1 {
        return Err(SpectralError::BadPartition);
    }
    Ok(DyadicPartition { n_max })
}

impl DyadicPartition {
    /// `phi(x) = chi(x/2) - chi(x)`, supported in `[1/2, 2]` and equal to 1 at `x = 1`.
    pub fn phi<T: Real>(&self, x: T) -> T {
        chi(x / T::lit(2.0)) - chi(x)
    }

    /// Equal to 1 on `[1/4, 2]`, supported in `[1/8, 4]`.
    pub fn phi_tilde<T: Real>(&self, x: T) -> T {
        chi(x / T::lit(4.0)) - chi(T::lit(4.0) * x)
    }

    pub fn support(&self) -> (f64, f64) {
        (0.5, 2.0)
    }

    /// Range where the dyadic sum is exactly one.
    pub fn coverage(&self) -> (f64, f64) {
        (2f64.powi(-(self.n_max as i32)), 1.0)
    }

    pub fn sum<T: Real>(&self, x: T) -> T {
        (0..=self.n_max).fold(T::zero(), |acc, n| acc + self.phi(T::lit(2f64.powi(n as i32)) * x))
    }

    /// Minimum of `phi` over `[lo, hi]`, sampled densely.
    pub fn min_on(&self, lo: f64, hi: f64) -> f64 {
        (0..=2000)
            .map(|k| self.phi(lo + (hi - lo) * k as f64 / 2000.0))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Orthogonal projector onto the eigenvectors with eigenvalue in `[lo, hi]`.
#[derive(Clone, Debug)]
pub struct Projector<T> {
    pub indices: Vec<usize>,
    pub basis: Mat<T>,
}

pub fn spectral_projector<T: Real>(s: &SpectralData<T>, lo: T, hi: T) -> Result<Projector<T>, SpectralError> {
    let vals = s.eigenvalues()?;
    let v = s.vectors()?;
    let indices: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] >= lo && vals[k] <= hi).collect();
    if indices.is_empty() {
        log::warn!("spectral window [{}, {}] contains no eigenvalues", lo, hi);
    }
    let basis = Mat::from_fn(v.nrows(), indices.len(), |i, j| v[(i, indices[j])]);
    Ok(Projector { indices, basis })
}

impl<T: Real> Projector<T> {
    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Mat<T> {
        &self.basis * self.basis.transpose()
    }

    pub fn apply(&self, v: &[T]) -> Vec<T> {
        let c = crate::linalg::mat_t_vec(self.basis.as_ref(), v);
        crate::linalg::mat_vec(self.basis.as_ref(), &c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble_operators, build_grid};
    use crate::metric::{make_metric, MetricFamily};

    fn flat_1d(n: usize, l: f64) -> DiscreteModel<f64> {
        let m = make_metric(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
        assemble_operators(&m, &build_grid(1, n, l).unwrap()).unwrap()
    }

    #[test]
    fn tridiagonal_eigenvalues() {
        let model = flat_1d(5, 2.0);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let h = model.grid.spacing();
        for (k, &ev) in s.eigenvalues().unwrap().iter().enumerate() {
            let theta = (k + 1) as f64 * std::f64::consts::PI / (2.0 * 6.0);
            assert!((ev - 4.0 / (h * h) * theta.sin().powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_cap_refused() {
        let model = flat_1d(64, 8.0);
        assert!(matches!(
            decompose_with_cap(&model, Operator::P, Mode::DenseEig, 10),
            Err(SpectralError::DenseCapExceeded { .. })
        ));
        let it = decompose(&model, Operator::P, Mode::Iterative).unwrap();
        assert_eq!(it.eigenvalues().unwrap_err(), SpectralError::RequiresDense);
    }

    #[test]
    fn function_calculus_identities() {
        let model = flat_1d(40, 6.0);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let v: Vec<f64> = (0..40).map(|i| ((i * i) as f64 * 0.1).sin()).collect();
        let pv = model.p.mul_vec(&v);
        let fv = s.apply_function(|x| x, &v).unwrap();
        assert!(norm(&crate::linalg::sub(&pv, &fv)) < 1e-10 * norm(&pv));
        let one = s.apply_function(|_| 1.0, &v).unwrap();
        assert!(norm(&crate::linalg::sub(&one, &v)) < 1e-12);
        let r = s.apply_function(f64::sqrt, &s.apply_function(f64::sqrt, &v).unwrap()).unwrap();
        assert!(norm(&crate::linalg::sub(&r, &pv)) < 1e-9 * norm(&pv));
    }

    #[test]
    fn dyadic_partition_of_unity() {
        let d = build_dyadic(6).unwrap();
        let (lo, hi) = d.coverage();
        for k in 0..=10_000 {
            let x = lo + (hi - lo) * k as f64 / 10_000.0;
            assert!((d.sum(x) - 1.0).abs() <= 1e-12, "x = {x}");
            assert!(d.phi(x) >= 0.0);
            assert_eq!(d.phi_tilde(x) * d.phi(x), d.phi(x));
        }
        assert_eq!(d.phi(1.0), 1.0);
        assert_eq!(d.phi(0.5), 0.0);
        assert_eq!(d.phi(2.0), 0.0);
        assert!(build_dyadic(0).is_err());
    }

    #[test]
    fn smoothstep_derivative_matches() {
        for k in 1..20 {
            let t = k as f64 / 20.0;
            let fd = (smoothstep(t + 1e-6) - smoothstep(t - 1e-6)) / 2e-6;
            assert!((fd - smoothstep_derivative(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn projector_rank_counts_eigenvalues() {
        let model = flat_1d(20, 4.0);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let vals = s.eigenvalues().unwrap();
        let p = s.projector(vals[3], vals[7]).unwrap();
        assert_eq!(p.rank(), 5);
        let single = s.projector(vals[2], vals[2]).unwrap();
        assert_eq!(single.rank(), 1);
        let all = s.projector(0.0, f64::INFINITY).unwrap();
        let d = all.to_dense();
        for i in 0..20 {
            for j in 0..20 {
                assert!((d[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
