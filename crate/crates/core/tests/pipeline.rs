use lapwave::discretize::{assemble_operators, build_grid, Operator};
use lapwave::estimates::{kss_scan, ScanOptions, WaveCase};
use lapwave::evolve::{propagate_exact, FirstOrderSystem, WaveState};
use lapwave::metric::{decay_check, decay_check_at_rate, geodesic_escape, make_metric, MetricFamily};
use lapwave::mourre::{conjugate, default_eta_grid, kato_smoothness_check, lap_constant, Regime};
use lapwave::nonlinear::{lifespan, scaled_data, LifespanOptions, QuadraticForm};
use lapwave::report::Verdict;
use lapwave::spectral::{build_dyadic, decompose, sqrt_quadrature, Mode};

fn bump(d: usize, n: usize, l: f64) -> lapwave::DiscreteModel64 {
    let m = make_metric(MetricFamily::RadialBump, d, 2.0, 0.3).unwrap();
    assemble_operators(&m, &build_grid(d, n, l).unwrap()).unwrap()
}

#[test]
fn decay_rates_are_detected() {
    let radii: Vec<f64> = (0..8).map(|k| 2f64.powi(k)).collect();
    for fam in [MetricFamily::RadialBump, MetricFamily::AnisotropicBump] {
        let m = make_metric(fam, 3, 2.0, 0.3).unwrap();
        assert_eq!(decay_check(&m, &radii, 2).unwrap().verdict, Verdict::Pass);
        assert_eq!(decay_check_at_rate(&m, &radii, 2, 3.0).unwrap().verdict, Verdict::Fail);
    }
}

#[test]
fn rays_escape_and_conserve_the_hamiltonian() {
    let m = make_metric(MetricFamily::RadialBump, 2, 2.0, 0.3).unwrap();
    let r = geodesic_escape(&m, 16, 200.0, 30.0);
    assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.notes);
}

#[test]
fn quadrature_square_root_agrees_with_dense() {
    let model = bump(2, 12, 5.0);
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let v: Vec<f64> = (0..model.len()).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
    let q = sqrt_quadrature(&model, &v, 40).unwrap();
    let e = s.apply_function(f64::sqrt, &v).unwrap();
    let err = q.value.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / e.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn first_order_system_matches_second_order() {
    let model = bump(2, 8, 4.0);
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let u: Vec<f64> = (0..model.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let v: Vec<f64> = (0..model.len()).map(|i| (i as f64 * 0.11).cos()).collect();
    let st = WaveState::new(u, v);
    let a = propagate_exact(&s, &st, 3.0, None, None).unwrap().state;
    let b = FirstOrderSystem::new(&s).evolve(&st, 3.0).unwrap();
    for i in 0..model.len() {
        assert!((a.u[i] - b.u[i]).abs() < 1e-8);
    }
}

#[test]
fn finite_propagation_speed() {
    let m = make_metric::<f64>(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
    let model = assemble_operators(&m, &build_grid(1, 401, 20.0).unwrap()).unwrap();
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let h = model.grid.spacing();
    let r0 = 2.0;
    let u: Vec<f64> = (0..model.len())
        .map(|i| {
            let x = model.grid.radius(i);
            if x < r0 { (1.0 - (x / r0).powi(2)).powi(8) } else { 0.0 }
        })
        .collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    for t in [2.0, 5.0, 10.0] {
        let out = propagate_exact(&s, &WaveState::new(u.clone(), vec![0.0; u.len()]), t, None, None).unwrap().state;
        let far = (0..model.len()).filter(|&i| model.grid.radius(i) > r0 + t + 5.0 * h).map(|i| out.u[i].abs()).fold(0.0, f64::max);
        assert!(far <= 1e-6 * norm, "t = {t}: {far}");
    }
}

#[test]
fn kss_integral_grows_with_time() {
    let model = bump(2, 16, 8.0);
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let b: Vec<f64> = (0..model.len()).map(|i| (-model.grid.radius(i).powi(2)).exp()).collect();
    let cases = vec![WaveCase::data(b, vec![0.0; model.len()])];
    let opts = ScanOptions { r_data: 2.5, ..Default::default() };
    let r = kss_scan(&model, &s, 1.0, &cases, &[1.0, 2.0, 3.0, 4.0], &opts).unwrap();
    let lhs: Vec<f64> = r.rows.iter().map(|x| x.param("lhs_sq").unwrap()).collect();
    assert!(lhs.windows(2).all(|w| w[1] >= w[0]), "{lhs:?}");
    assert!(r.rows.iter().all(|x| x.param("rhs").unwrap() >= 0.0));
}

#[test]
fn smoothing_integral_is_monotone_and_weights_contract() {
    let m = make_metric::<f64>(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
    let model = assemble_operators(&m, &build_grid(1, 96, 24.0).unwrap()).unwrap();
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let p = build_dyadic(8).unwrap();
    let c = conjugate(Regime::Low, &s, &model, &p, 16.0).unwrap();
    let j = (0.85f64.sqrt(), 1.2f64.sqrt());
    let eta = default_eta_grid();
    let weak = lap_constant(&s, &c, j, 0.6, &eta).unwrap();
    let strong = lap_constant(&s, &c, j, 1.0, &eta).unwrap();
    assert!(strong.constant <= weak.constant * (1.0 + 1e-12));
    let u: Vec<f64> = (0..model.len()).map(|i| ((i * 5 % 11) as f64 - 5.0) / 5.0).collect();
    let k = kato_smoothness_check(&s, &c, j, 1.0, &[u], 16.0, Some(strong.constant), 0.1).unwrap();
    let vals: Vec<f64> = k.rows.iter().map(|r| r.measured).collect();
    assert!(vals.windows(2).all(|w| w[1] >= w[0]), "{vals:?}");
}

#[test]
fn lifespan_is_deterministic() {
    let m = make_metric::<f64>(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
    let model = assemble_operators(&m, &build_grid(1, 48, 12.0).unwrap()).unwrap();
    let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
    let z = vec![0.0; model.len()];
    let b: Vec<f64> = (0..model.len()).map(|i| (-model.grid.radius(i).powi(2)).exp()).collect();
    let (u0, u1) = scaled_data(&model, &z, &b, 5.0, 2);
    let q = QuadraticForm::time_squared(1, 1.0);
    let opts = LifespanOptions { r_data: 2.5, ..Default::default() };
    let a = lifespan(&model, &s, &u0, &u1, 5.0, &q, &opts).unwrap();
    let b = lifespan(&model, &s, &u0, &u1, 5.0, &q, &opts).unwrap();
    assert_eq!(a.t_obs.to_bits(), b.t_obs.to_bits());
    assert_eq!(a.m_trace, b.m_trace);
    assert!(a.t_obs <= model.causal_window(2.5) + 1e-12);
}
