use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frfkit::campaign::{self, CampaignConfig, StageSummary};

#[derive(Parser)]
#[command(version, about = "FRF estimation campaigns on the simulated flexible-joint arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Campaign file (TOML); the built-in desk campaign when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate every configuration; writes time records and truth FRFs.
    Simulate,
    /// Run the estimator matrix on the simulated records.
    Estimate,
    /// Fit the gray-box model to the cells flagged for fitting.
    Fit,
    /// Write bias tables and FRF curve files.
    Report,
    /// Run all stages in order.
    All,
}

fn run(cli: &Cli) -> frfkit::Result<Vec<StageSummary>> {
    let mut cfg = match &cli.config {
        Some(path) => CampaignConfig::read(path)?,
        None => CampaignConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| frfkit::Error::Config(e.to_string()))?;
    }
    Ok(match cli.command {
        Command::Simulate => vec![campaign::run_simulate(&cfg, &out)?],
        Command::Estimate => vec![campaign::run_estimate(&cfg, &out)?],
        Command::Fit => vec![campaign::run_fit(&cfg, &out)?],
        Command::Report => vec![campaign::run_report(&cfg, &out)?],
        Command::All => campaign::run_all(&cfg, &out)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summaries) => {
            let mut ok = true;
            for s in &summaries {
                println!("{}: {} done, {} failed", s.stage, s.completed.len(), s.failures.len());
                for f in &s.failures {
                    println!("  {}: {}", f.scope, f.message);
                }
                ok &= s.ok();
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
