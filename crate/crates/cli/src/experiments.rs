//! Builds models from a configuration and dispatches one experiment.

use lapwave::discretize::{assemble_operators, build_grid, DiscreteModel, Operator};
use lapwave::estimates::{self, Derivative, EquivalenceOptions, ResolventOptions, ScanOptions, SourceFn, WaveCase};
use lapwave::metric::make_metric;
use lapwave::mourre::{default_eta_grid, kato_smoothness_check, lap_constant, mourre_scan, conjugate};
use lapwave::nonlinear::{self, FunctionalOptions, LifespanOptions, LifespanRecord, PicardOptions, QuadraticForm};
use lapwave::report::{Report, Row, Verdict};
use lapwave::spectral::{build_dyadic, decompose_with_cap, SpectralData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::checks;
use crate::config::{DerivativeName, Experiment, ExperimentConfig};
use crate::CliError;

/// Receives results as soon as they exist, so an interrupted run keeps what
/// finished.
pub trait Sink {
    fn report(&mut self, report: &Report) -> Result<(), CliError>;
    fn lifespan(&mut self, records: &[LifespanRecord]) -> Result<(), CliError>;
}

/// Collects everything in memory.
#[derive(Default)]
pub struct Collect {
    pub reports: Vec<Report>,
    pub records: Vec<LifespanRecord>,
}

impl Sink for Collect {
    fn report(&mut self, report: &Report) -> Result<(), CliError> {
        self.reports.push(report.clone());
        Ok(())
    }

    fn lifespan(&mut self, records: &[LifespanRecord]) -> Result<(), CliError> {
        self.records.extend_from_slice(records);
        Ok(())
    }
}

pub fn build_model(cfg: &ExperimentConfig, l: f64) -> Result<DiscreteModel<f64>, CliError> {
    let m = make_metric(cfg.metric.family.into(), cfg.metric.d, cfg.metric.rho, cfg.metric.amplitude)?;
    Ok(assemble_operators(&m, &build_grid(cfg.metric.d, cfg.grid.n, l)?)?)
}

fn spectral(cfg: &ExperimentConfig, model: &DiscreteModel<f64>) -> Result<SpectralData<f64>, CliError> {
    Ok(decompose_with_cap(model, Operator::P, cfg.spectral.mode.into(), cfg.spectral.dense_cap)?)
}

/// `exp(-((|x| - r0) / w)^2)`.
pub fn shell(model: &DiscreteModel<f64>, r0: f64, w: f64) -> Vec<f64> {
    (0..model.len()).map(|i| (-((model.grid.radius(i) - r0) / w).powi(2)).exp()).collect()
}

pub fn gaussian(model: &DiscreteModel<f64>, w: f64) -> Vec<f64> {
    shell(model, 0.0, w)
}

/// Radius beyond which a Gaussian of width `w` is below `e^-6`.
pub fn data_radius(w: f64) -> f64 {
    2.5 * w
}

pub fn kss_cases(model: &DiscreteModel<f64>, w: f64) -> Vec<WaveCase<f64>> {
    let b = gaussian(model, w);
    let z = vec![0.0; model.len()];
    vec![WaveCase::data(b.clone(), z.clone()), WaveCase::data(z, b)]
}

pub fn oscillating_sources(model: &DiscreteModel<f64>, w: f64, omegas: &[f64]) -> Vec<SourceFn<f64>> {
    let b = Arc::new(gaussian(model, w));
    omegas
        .iter()
        .map(|&om| {
            let b = b.clone();
            Arc::new(move |t: f64| b.iter().map(|x| (om * t).sin() * x).collect::<Vec<f64>>()) as SourceFn<f64>
        })
        .collect()
}

pub fn scan_options(cfg: &ExperimentConfig) -> ScanOptions<f64> {
    ScanOptions {
        derivative: match cfg.kss.derivative {
            DerivativeName::Gradient => Derivative::Gradient,
            DerivativeName::SqrtP => Derivative::SqrtP,
        },
        eps: cfg.kss.eps,
        slack: cfg.kss.slack,
        panels_per_unit: cfg.kss.panels_per_unit,
        r_data: data_radius(cfg.kss.width),
    }
}

pub fn lifespan_options(cfg: &ExperimentConfig) -> LifespanOptions {
    let l = &cfg.lifespan;
    LifespanOptions {
        picard: PicardOptions {
            max_iter: l.max_iter,
            tol: l.tol,
            blowup_factor: l.blowup_factor,
            panels_per_unit: l.panels_per_unit,
            functional: FunctionalOptions { order: 1, n: l.n },
        },
        t_max: l.t_max.unwrap_or(f64::INFINITY),
        refinements: l.refinements,
        r_data: data_radius(l.width),
    }
}

pub fn quadratic_form(cfg: &ExperimentConfig) -> Result<QuadraticForm<f64>, CliError> {
    let d = cfg.metric.d;
    Ok(match &cfg.lifespan.q {
        Some(q) => QuadraticForm::new(d, q.clone())?,
        None => QuadraticForm::time_squared(d, 1.0),
    })
}

/// Picard differences on one window: `A_k <= A_{k-1} / 2` for `k >= 2` and
/// convergence.
pub fn contraction_report(run: &nonlinear::PicardRun, delta: f64) -> Report {
    let mut report = Report::new("picard_contraction");
    for (k, a) in run.a_trace.iter().enumerate() {
        let ratio = if k == 0 { f64::NAN } else { a / run.a_trace[k - 1] };
        let v = if k == 0 { Verdict::Pass } else { Verdict::from_bool(ratio <= 0.5) };
        report.rows.push(Row::new(&[("delta", delta), ("T", run.t), ("k", (k + 1) as f64), ("a_k", *a)], ratio, 0.5, v).named("a_ratio"));
    }
    report.note(format!("iterations {}, converged {}", run.iterations(), run.converged));
    let steps = Verdict::all(report.rows.iter().map(|r| r.verdict));
    report.verdict = steps.and(Verdict::from_bool(run.converged));
    report
}

pub fn run(cfg: &ExperimentConfig, sink: &mut dyn Sink) -> Result<(), CliError> {
    let model = build_model(cfg, cfg.grid.l)?;
    match cfg.experiment {
        Experiment::Selftest => {
            let s = if model.len() <= cfg.spectral.dense_cap { Some(spectral(cfg, &model)?) } else { None };
            sink.report(&checks::selftest(&model, s.as_ref(), cfg.seed, cfg.spectral.quadrature_nodes, cfg.spectral.quadrature_tol)?)?;
        }
        Experiment::MourreCheck => {
            let s = spectral(cfg, &model)?;
            let m = &cfg.mourre;
            let partition = build_dyadic(m.n_max)?;
            let interval = (m.interval[0], m.interval[1]);
            let (report, scans) = mourre_scan(m.regime(), &s, &model, &partition, &m.scales, interval, m.slack)?;
            sink.report(&report)?;
            let scale = m.lap_scale.or_else(|| scans.iter().find(|r| r.verdict == Verdict::Pass).map(|r| r.scale));
            if m.mu > 0.0 {
                let Some(scale) = scale else {
                    log::warn!("no passing scale, resolvent checks skipped");
                    return Ok(());
                };
                let c = conjugate(m.regime(), &s, &model, &partition, scale)?;
                let j = (interval.0.sqrt(), interval.1.sqrt());
                let lap = lap_constant(&s, &c, j, m.mu, &default_eta_grid())?;
                let mut lr = Report::new("lap_constant");
                for &(re, eta, norm) in &lap.table {
                    lr.rows.push(Row::new(&[("scale", scale), ("re_z", re), ("eta", eta)], norm, f64::NAN, Verdict::Pass).named("weighted_resolvent"));
                }
                lr.rows.push(Row::new(&[("scale", scale)], lap.last_ratio, 2.0, Verdict::from_bool(lap.stabilized)).named("last_ratio"));
                lr.note(format!("constant {:.6e}", lap.constant));
                lr.verdict = Verdict::from_bool(lap.stabilized);
                sink.report(&lr)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let samples: Vec<Vec<f64>> = (0..m.samples).map(|_| checks::random_vector(model.len(), &mut rng)).collect();
                let t_max = model.causal_window(0.0);
                let mut k = kato_smoothness_check(&s, &c, j, m.mu, &samples, t_max, Some(lap.constant), m.eps)?;
                k.note(format!("scale {scale}"));
                sink.report(&k)?;
            }
        }
        Experiment::KssScan => {
            let s = spectral(cfg, &model)?;
            let r = estimates::kss_scan(&model, &s, cfg.kss.mu, &kss_cases(&model, cfg.kss.width), &cfg.kss.t_list, &scan_options(cfg))?;
            sink.report(&r)?;
        }
        Experiment::KssHigher => {
            let s = spectral(cfg, &model)?;
            let r = estimates::kss_higher(&model, &s, cfg.kss.mu, cfg.kss.order, &kss_cases(&model, cfg.kss.width), &cfg.kss.t_list, &scan_options(cfg))?;
            sink.report(&r)?;
        }
        Experiment::SourceScan => {
            let s = spectral(cfg, &model)?;
            let sources = oscillating_sources(&model, cfg.kss.width, &cfg.kss.omegas);
            let r = estimates::weighted_source(&model, &s, cfg.kss.mu, &sources, &cfg.kss.t_list, &scan_options(cfg))?;
            sink.report(&r)?;
        }
        Experiment::ResolventScan => {
            let r = &cfg.resolvent;
            let second = r.second_l.map(|l| build_model(cfg, l)).transpose()?;
            let mut models = vec![&model];
            if let Some(m2) = &second {
                models.push(m2);
            }
            let opts = ResolventOptions { which: r.operator.into(), beta: r.beta, gamma: r.gamma, derivative: r.derivative_axis, slack: r.slack };
            sink.report(&estimates::resolvent_scan(&models, &opts, &r.lambdas)?)?;
        }
        Experiment::Equivalences => {
            let s = spectral(cfg, &model)?;
            let e = &cfg.equivalences;
            let second = match e.second_l {
                Some(l) => {
                    let m2 = build_model(cfg, l)?;
                    let s2 = spectral(cfg, &m2)?;
                    Some((m2, s2))
                }
                None => None,
            };
            let opts = EquivalenceOptions { mu_gradient: e.mu_gradient, mu_hardy: e.mu_hardy, max_ratio: e.max_ratio };
            let r = estimates::norm_equivalences(&model, &s, &opts, second.as_ref().map(|(m, s)| (m, s)))?;
            sink.report(&r)?;
        }
        Experiment::LifespanSweep => {
            let s = spectral(cfg, &model)?;
            let l = &cfg.lifespan;
            let q = quadratic_form(cfg)?;
            let z = vec![0.0; model.len()];
            let b = gaussian(&model, l.width);
            let order = l.data_order.unwrap_or_else(|| nonlinear::default_data_order(cfg.metric.d));
            let opts = lifespan_options(cfg);
            if let Some(delta) = l.contraction_delta {
                let (u0, u1) = nonlinear::scaled_data(&model, &z, &b, delta, order);
                let run = nonlinear::picard(&model, &s, &u0, &u1, &q, l.contraction_t, &opts.picard)?;
                sink.report(&contraction_report(&run, delta))?;
            }
            let (report, records) = nonlinear::lifespan_sweep(&model, &s, &z, &b, &l.deltas, &q, &opts, order)?;
            sink.lifespan(&records)?;
            sink.report(&report)?;
        }
        Experiment::SobolevCheck => {
            let sb = &cfg.sobolev;
            let fns: Vec<Vec<f64>> = sb.centers.iter().map(|&r| shell(&model, r, sb.width)).collect();
            let mut r = nonlinear::sobolev_weight_check(&model, &fns, sb.slack)?;
            r.note(format!("test functions centred at radii {:?}", sb.centers));
            sink.report(&r)?;
        }
    }
    Ok(())
}
