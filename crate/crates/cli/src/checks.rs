//! Operator, spectral and propagator checks behind the `selftest`
//! experiment.

use lapwave::discretize::{assemble_operators, build_grid, DiscreteModel, Operator};
use lapwave::evolve::{energy, propagate_exact, WaveState};
use lapwave::linalg;
use lapwave::metric::{make_metric, MetricFamily};
use lapwave::report::{fit_power_law, PowerLawFit, Report, Row, Verdict};
use lapwave::spectral::{build_dyadic, sqrt_quadrature, SpectralData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

pub fn flat_model(d: usize, n: usize, l: f64) -> Result<DiscreteModel<f64>, CliError> {
    let m = make_metric(MetricFamily::Flat, d, 2.0, 0.0)?;
    Ok(assemble_operators(&m, &build_grid(d, n, l)?)?)
}

/// Largest deviation of the flat operators from the `(2d, -1)` stencil,
/// relative to `1/h^2`.
pub fn stencil_deviation(model: &DiscreteModel<f64>) -> f64 {
    let g = &model.grid;
    let h2 = g.spacing() * g.spacing();
    let d = g.dim();
    let mut worst: f64 = 0.0;
    for which in [Operator::P, Operator::P0, Operator::Ptilde] {
        let op = model.operator(which);
        for i in 0..g.len() {
            let mut expected: Vec<(usize, f64)> = vec![(i, 2.0 * d as f64 / h2)];
            for a in 0..d {
                for step in [-1isize, 1] {
                    if let Some(j) = g.shifted(i, a, step) {
                        expected.push((j, -1.0 / h2));
                    }
                }
            }
            let mut seen = 0;
            for (j, v) in op.row(i) {
                let e = expected.iter().find(|(k, _)| *k == j).map(|(_, v)| *v).unwrap_or(0.0);
                worst = worst.max((v - e).abs() * h2);
                if e != 0.0 {
                    seen += 1;
                }
            }
            if seen != expected.len() {
                worst = worst.max(1.0);
            }
        }
    }
    worst
}

/// `max |A - A^T| / max |A|` over the three assembled operators.
pub fn symmetry_residual(model: &DiscreteModel<f64>) -> f64 {
    [Operator::P, Operator::P0, Operator::Ptilde].iter().map(|&w| {
        let op = model.operator(w);
        op.symmetry_defect(1.0) / op.max_abs()
    }).fold(0.0, f64::max)
}

/// Relative truncation error of `P` on `exp(-|x|^2 / s^2)` with
/// `s = L / 4`, whose flat Laplacian is known in closed form.
pub fn truncation_error(model: &DiscreteModel<f64>) -> f64 {
    let g = &model.grid;
    let s2 = (g.half_width() / 4.0).powi(2);
    let d = g.dim() as f64;
    let f: Vec<f64> = (0..g.len()).map(|i| (-g.radius(i).powi(2) / s2).exp()).collect();
    let exact: Vec<f64> = (0..g.len()).map(|i| (2.0 * d / s2 - 4.0 * g.radius(i).powi(2) / (s2 * s2)) * f[i]).collect();
    let pf = model.p.mul_vec(&f);
    let r: Vec<f64> = pf.iter().zip(&exact).map(|(a, b)| a - b).collect();
    linalg::max_abs(&r) / linalg::max_abs(&exact)
}

/// `(h, error)` points and their power-law fit.
pub type Refinement = (Vec<(f64, f64)>, Option<PowerLawFit>);

/// Residuals over a refinement sequence and their power-law fit in `h`.
pub fn consistency(d: usize, ns: &[usize], l: f64) -> Result<Refinement, CliError> {
    let mut pts = Vec::new();
    for &n in ns {
        let m = flat_model(d, n, l)?;
        pts.push((m.grid.spacing(), truncation_error(&m)));
    }
    let fit = fit_power_law(&pts.iter().map(|p| p.0).collect::<Vec<_>>(), &pts.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok((pts, fit))
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Relative error of the quadrature square root against the eigendecomposition.
pub fn sqrt_error(model: &DiscreteModel<f64>, s: &SpectralData<f64>, v: &[f64], nodes: usize) -> Result<f64, CliError> {
    let q = sqrt_quadrature(model, v, nodes)?;
    let exact = s.apply_function(f64::sqrt, v)?;
    let diff: Vec<f64> = q.value.iter().zip(&exact).map(|(a, b)| a - b).collect();
    Ok(linalg::norm(&diff) / linalg::norm(&exact))
}

/// Relative energy change of the exact propagator over `[0, t]`.
pub fn energy_drift(s: &SpectralData<f64>, u: Vec<f64>, v: Vec<f64>, t: f64) -> Result<f64, CliError> {
    let state = WaveState::new(u, v);
    let e0 = energy(s, &state);
    let out = propagate_exact(s, &state, t, None, None)?;
    Ok((energy(s, &out.state) - e0).abs() / e0)
}

/// Operator, spectral-calculus and propagator checks for one model.
pub fn selftest(model: &DiscreteModel<f64>, s: Option<&SpectralData<f64>>, seed: u64, nodes: usize, sqrt_tol: f64) -> Result<Report, CliError> {
    let mut report = Report::new("selftest");
    let d = model.dim();
    let push = |report: &mut Report, name: &str, measured: f64, limit: f64| {
        report.rows.push(Row::new(&[], measured, limit, Verdict::from_bool(measured <= limit)).named(name));
    };
    let mut fit_verdict = Verdict::Pass;
    push(&mut report, "symmetry_residual", symmetry_residual(model), 1e-13);
    if model.metric.is_flat() {
        push(&mut report, "stencil_deviation", stencil_deviation(model), 1e-12);
    }
    let n = model.grid.points_per_axis();
    let l = model.grid.half_width();
    let ns: Vec<usize> = if d == 3 { vec![20, 40, 80] } else { vec![(n / 2).max(24), n.max(48), 2 * n.max(48)] };
    let (pts, fit) = consistency(d, &ns, l)?;
    for (h, e) in &pts {
        report.rows.push(Row::new(&[("h", *h)], *e, f64::NAN, Verdict::Pass).named("truncation_error"));
    }
    match fit {
        Some(f) => {
            let ok = (1.8..=2.2).contains(&f.exponent);
            report.rows.push(Row::new(&[], f.exponent, 2.0, Verdict::from_bool(ok)).named("consistency_order"));
        }
        None => fit_verdict = Verdict::Inconclusive,
    }
    let dy = build_dyadic(8)?;
    let (lo, hi) = dy.coverage();
    let worst = (0..=200).map(|k| lo * (hi / lo).powf(k as f64 / 200.0)).map(|x| (dy.sum(x) - 1.0).abs()).fold(0.0, f64::max);
    push(&mut report, "partition_of_unity", worst, 1e-12);
    if let Some(s) = s {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vector(model.len(), &mut rng);
        push(&mut report, "sqrt_quadrature_error", sqrt_error(model, s, &v, nodes)?, sqrt_tol);
        let t = model.causal_window(0.0);
        let u0 = random_vector(model.len(), &mut rng);
        let u1 = random_vector(model.len(), &mut rng);
        push(&mut report, "energy_drift", energy_drift(s, u0, u1, t)?, 1e-10);
    } else {
        report.note("no eigendecomposition, spectral checks skipped");
    }
    report.set_series("h", "residual", pts);
    report.fit = fit;
    report.predicted = Some(2.0);
    report.verdict = Verdict::all(report.rows.iter().map(|r| r.verdict)).and(fit_verdict);
    Ok(report)
}
