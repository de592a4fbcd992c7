use lapwave::discretize::{assemble_operators, build_grid, Operator};
use lapwave::estimates::kss_envelope;
use lapwave::evolve::{energy, half_wave, propagate_exact, SampledSource, WaveState};
use lapwave::linalg;
use lapwave::metric::{make_metric, MetricFamily};
use lapwave::nonlinear::{data_norm, QuadraticForm};
use lapwave::report::fit_power_law;
use lapwave::spectral::{build_dyadic, decompose, spectral_projector, Mode};
use lapwave::DiscreteModel64;
use proptest::prelude::*;

fn family() -> impl Strategy<Value = MetricFamily> {
    prop_oneof![Just(MetricFamily::Flat), Just(MetricFamily::RadialBump), Just(MetricFamily::AnisotropicBump)]
}

fn small_model(fam: MetricFamily, d: usize, n: usize, l: f64, amp: f64) -> DiscreteModel64 {
    let m = make_metric(fam, d, 2.0, amp).unwrap();
    assemble_operators(&m, &build_grid(d, n, l).unwrap()).unwrap()
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metric_is_symmetric_positive(fam in family(), d in 1usize..=3, amp in 0.0f64..0.4, x in prop::collection::vec(-20.0f64..20.0, 3)) {
        let m = make_metric(fam, d, 2.0, amp).unwrap();
        let g = m.entries(&x[..d]);
        for i in 0..d {
            for j in 0..d {
                prop_assert_eq!(g[i * d + j], g[j * d + i]);
            }
        }
        prop_assert!(m.min_eigenvalue(&x[..d]) > 0.0);
    }

    #[test]
    fn assembled_operators_are_symmetric(fam in family(), d in 1usize..=3, n in 3usize..7, l in 1.0f64..6.0, amp in 0.0f64..0.4) {
        let model = small_model(fam, d, n, l, amp);
        for which in [Operator::P, Operator::P0, Operator::Ptilde] {
            let op = model.operator(which);
            prop_assert!(op.symmetry_defect(1.0) <= 1e-13 * op.max_abs());
        }
    }

    #[test]
    fn flat_operators_coincide(d in 1usize..=3, n in 3usize..7, l in 1.0f64..6.0) {
        let model = small_model(MetricFamily::Flat, d, n, l, 0.0);
        prop_assert_eq!(model.operator(Operator::P), model.operator(Operator::P0));
        prop_assert_eq!(model.operator(Operator::P), model.operator(Operator::Ptilde));
    }

    #[test]
    fn partition_of_unity(t in 0.0f64..1.0) {
        let p = build_dyadic(8).unwrap();
        let (lo, hi) = p.coverage();
        let x = lo * (hi / lo).powf(t);
        prop_assert!((p.sum(x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn half_wave_is_unitary(v in vector(25), t in -10.0f64..10.0) {
        let model = small_model(MetricFamily::RadialBump, 2, 5, 3.0, 0.3);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let out = half_wave(&s, &v, t).unwrap();
        let n_out = out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!((n_out - linalg::norm(&v)).abs() <= 1e-10 * linalg::norm(&v).max(1e-300));
    }

    #[test]
    fn projectors_multiply_to_intersection(a in 0.0f64..8.0, b in 0.0f64..8.0, c in 0.0f64..8.0, e in 0.0f64..8.0, v in vector(25)) {
        let model = small_model(MetricFamily::Flat, 2, 5, 3.0, 0.0);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let (j1, j2) = ((a.min(b), a.max(b)), (c.min(e), c.max(e)));
        let p1 = spectral_projector(&s, j1.0, j1.1).unwrap();
        let p2 = spectral_projector(&s, j2.0, j2.1).unwrap();
        let p12 = spectral_projector(&s, j1.0.max(j2.0), j1.1.min(j2.1)).unwrap();
        let lhs = p1.apply(&p2.apply(&v));
        let rhs = p12.apply(&v);
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(x, y)| x - y).collect();
        prop_assert!(linalg::max_abs(&diff) <= 1e-12);
    }

    #[test]
    fn exact_propagator_conserves_energy(u in vector(27), v in vector(27), t in 0.0f64..50.0) {
        let model = small_model(MetricFamily::AnisotropicBump, 3, 3, 2.0, 0.3);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let st = WaveState::new(u, v);
        let e0 = energy(&s, &st);
        prop_assume!(e0 > 1e-6);
        let out = propagate_exact(&s, &st, t, None, None).unwrap();
        prop_assert!((energy(&s, &out.state) - e0).abs() <= 1e-10 * e0);
    }

    #[test]
    fn duhamel_is_linear(a in vector(9), b in vector(9), wa in 0.1f64..3.0, wb in 0.1f64..3.0) {
        let model = small_model(MetricFamily::RadialBump, 2, 3, 2.0, 0.3);
        let s = decompose(&model, Operator::P, Mode::DenseEig).unwrap();
        let t = 2.0;
        let src = |w: f64, p: Vec<f64>| SampledSource::from_fn(t / 64.0, 64, move |tt| p.iter().map(|x| x * (w * tt).sin()).collect());
        let (ga, gb) = (src(wa, a.clone()), src(wb, b.clone()));
        let sum = SampledSource { dt: ga.dt, samples: ga.samples.iter().zip(&gb.samples).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect() };
        let z = WaveState::zero(9);
        let run = |g: &SampledSource<f64>| propagate_exact(&s, &z, t, Some(g), None).unwrap().state;
        let (ra, rb, rs) = (run(&ga), run(&gb), run(&sum));
        for i in 0..9 {
            prop_assert!((ra.u[i] + rb.u[i] - rs.u[i]).abs() <= 1e-11);
            prop_assert!((ra.v[i] + rb.v[i] - rs.v[i]).abs() <= 1e-11);
        }
    }

    #[test]
    fn fitter_recovers_power_laws(c in 0.01f64..100.0, p in -3.0f64..3.0) {
        let xs: Vec<f64> = (0..8).map(|k| 1.5f64.powi(k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(p)).collect();
        let fit = fit_power_law(&xs, &ys).unwrap();
        prop_assert!((fit.exponent - p).abs() <= 1e-6);
    }

    #[test]
    fn envelope_is_flat_above_one_half(mu in 0.51f64..1.0, eps in 0.0f64..0.2, t in 1.0f64..100.0) {
        prop_assert_eq!(kss_envelope(mu, eps, t), 1.0);
        let low = kss_envelope(0.25, eps, t);
        prop_assert!((low - t.powf(0.5 + 2.0 * eps)).abs() <= 1e-12 * low);
    }

    #[test]
    fn data_norm_scales_linearly(u in vector(25), v in vector(25), k in 0.01f64..10.0) {
        let model = small_model(MetricFamily::Flat, 2, 5, 3.0, 0.0);
        let base = data_norm(&model, &u, &v, 2);
        let su: Vec<f64> = u.iter().map(|x| k * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| k * x).collect();
        prop_assert!((data_norm(&model, &su, &sv, 2) - k * base).abs() <= 1e-10 * (k * base).max(1e-300));
    }

    #[test]
    fn quadratic_form_requires_symmetry(d in 1usize..=3, q in prop::collection::vec(-1.0f64..1.0, 16)) {
        let k = d + 1;
        let sym: Vec<f64> = (0..k * k).map(|i| { let (a, b) = (i / k, i % k); q[a.min(b) * 4 + a.max(b)] }).collect();
        prop_assert!(QuadraticForm::new(d, sym.clone()).is_ok());
        let mut asym = sym;
        asym[1] += 0.5;
        prop_assert!(QuadraticForm::new(d, asym).is_err());
    }
}
