use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transit_did::pipeline::{run_study, write_synthetic, Stage, StudyConfig};
use transit_did::synthetic::SynthConfig;

#[derive(Parser)]
#[command(
    name = "transit-did",
    version,
    about = "Scooter-sharing effects on transit ridership via regionalized NB difference-in-differences"
)]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract scooter trips and per-zone flows.
    Ingest(StudyArgs),
    /// Build the zone feature table.
    Features(StudyArgs),
    /// Moran's I screen of the features.
    Screen(StudyArgs),
    /// Choose a regionalization by Calinski-Harabasz.
    Regionalize(StudyArgs),
    /// Assign treatment, control and excluded zones.
    Design(StudyArgs),
    /// Fit the NB difference-in-differences models.
    Fit(StudyArgs),
    /// Fit and write the manifest.
    Report(StudyArgs),
    /// Every stage.
    Run(StudyArgs),
    /// Write a synthetic city and a study config for it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the inputs and study.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON overrides for the generator.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A 12x12 city that runs in seconds.
    #[arg(long)]
    small: bool,
    /// Log-scale effect injected into treated post-period counts.
    #[arg(long)]
    delta: Option<f64>,
}

fn study(args: &StudyArgs, until: Stage) -> transit_did::Result<bool> {
    let mut cfg = StudyConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let summary = run_study(&cfg, until)?;
    for path in summary.artifacts.keys() {
        log::debug!("wrote {}", cfg.out_dir.join(path).display());
    }
    if !summary.all_converged {
        log::error!("some model cells failed or did not converge; see fit_status.csv");
    }
    Ok(summary.all_converged)
}

fn synth(args: &SynthArgs) -> transit_did::Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| transit_did::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| transit_did::Error::Json {
                path: p.clone(),
                source: e,
            })?
        }
        None if args.small => SynthConfig::small(args.seed),
        None => SynthConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(d) = args.delta {
        cfg.delta = d;
    }
    let (city, path) = write_synthetic(&cfg, &args.out)?;
    log::info!(
        "{} zones, {} trips, {} treated; config at {}",
        city.zones.len(),
        city.trips.len(),
        city.treated.iter().filter(|t| **t).count(),
        path.display()
    );
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::error!("{e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Ingest(a) => study(a, Stage::Ingest),
        Command::Features(a) => study(a, Stage::Features),
        Command::Screen(a) => study(a, Stage::Screen),
        Command::Regionalize(a) => study(a, Stage::Regionalize),
        Command::Design(a) => study(a, Stage::Design),
        Command::Fit(a) => study(a, Stage::Fit),
        Command::Report(a) | Command::Run(a) => study(a, Stage::Report),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
