//! Experiment runner: configuration, dispatch and result files.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod output;

use lapwave::nonlinear::LifespanRecord;
use lapwave::report::{Report, Verdict};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

use config::ExperimentConfig;
use experiments::Sink;
use output::{Manifest, OutputDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Metric(#[from] lapwave::metric::MetricError),
    #[error(transparent)]
    Discretize(#[from] lapwave::discretize::DiscretizeError),
    #[error(transparent)]
    Spectral(#[from] lapwave::spectral::SpectralError),
    #[error(transparent)]
    Evolve(#[from] lapwave::evolve::EvolveError),
    #[error(transparent)]
    Mourre(#[from] lapwave::mourre::MourreError),
    #[error(transparent)]
    Estimate(#[from] lapwave::estimates::EstimateError),
    #[error(transparent)]
    Nonlinear(#[from] lapwave::nonlinear::NonlinearError),
}

/// 0 when everything passes, 2 on any failure, 3 when the worst outcome is
/// inconclusive. Reports outside the hypothesis count as inconclusive.
pub fn exit_code(reports: &[Report]) -> i32 {
    match Verdict::all(reports.iter().map(Report::effective_verdict)) {
        Verdict::Pass => 0,
        Verdict::Fail => 2,
        Verdict::Inconclusive => 3,
    }
}

/// Writes each report to `<experiment>.csv` (and `.svg` when plotting) as it
/// arrives.
struct FileSink {
    out: OutputDir,
    plot: bool,
    reports: Vec<Report>,
}

impl Sink for FileSink {
    fn report(&mut self, report: &Report) -> Result<(), CliError> {
        let mut stem = report.experiment.clone();
        let taken = self.reports.iter().filter(|r| r.experiment == report.experiment).count();
        if taken > 0 {
            stem = format!("{stem}_{taken}");
        }
        self.out.write(&format!("{stem}.csv"), &output::report_csv(report)?)?;
        if self.plot {
            if let Some(svg) = output::svg_plot(report) {
                self.out.write(&format!("{stem}.svg"), svg.as_bytes())?;
            }
        }
        log::info!("{}: {}", report.experiment, report.effective_verdict());
        self.reports.push(report.clone());
        Ok(())
    }

    fn lifespan(&mut self, records: &[LifespanRecord]) -> Result<(), CliError> {
        self.out.write("lifespan_records.csv", &output::lifespan_csv(records)?)?;
        Ok(())
    }
}

/// Runs one configured experiment, writing tables and `manifest.toml` into
/// `dir`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path, plot: bool) -> Result<Vec<Report>, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut sink = FileSink { out: OutputDir::create(dir)?, plot, reports: Vec::new() };
    experiments::run(cfg, &mut sink)?;
    let FileSink { out, reports, .. } = sink;
    let manifest = Manifest {
        experiment: cfg.experiment.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: output::sha256_hex(cfg.to_toml().as_bytes()),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
        verdicts: reports.iter().map(|r| (r.experiment.clone(), r.effective_verdict().to_string())).collect(),
        notes: reports.iter().flat_map(|r| r.notes.iter().map(move |n| format!("{}: {n}", r.experiment))).collect(),
        files: Vec::new(),
    };
    out.finish(manifest)?;
    Ok(reports)
}
