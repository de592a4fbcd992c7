use clap::Parser;
use lapwave_cli::config::{Experiment, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Runs one numerical experiment from a TOML configuration.
///
/// Exit status: 0 all checks pass, 2 a check failed, 3 inconclusive,
/// 1 configuration or runtime error.
#[derive(Parser)]
#[command(name = "lapwave", version)]
struct Args {
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(args: Args) -> Result<u8, lapwave_cli::CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.experiment != args.experiment {
        return Err(lapwave_cli::CliError::Config(format!(
            "configuration is for {} but {} was requested",
            cfg.experiment.name(),
            args.experiment.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| lapwave_cli::CliError::Config(e.to_string()))?;
    }
    let dir = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    let reports = lapwave_cli::execute(&cfg, &dir, args.plot || cfg.output.plot)?;
    for r in &reports {
        println!("{}: {}", r.experiment, r.effective_verdict());
    }
    Ok(lapwave_cli::exit_code(&reports) as u8)
}
