use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use intxn_core::pipeline::{run, PipelineConfig, PipelineError, Stage};

/// Discover visited intersections, extract entering trajectories and build
/// video cut-lists from naturalistic driving data.
#[derive(Debug, Parser)]
#[command(name = "intxn-pipeline", version)]
struct Cli {
    /// clean, lrs-intxns, subj-intxns, export-kml, import-review, traj,
    /// clips, template, synth or all
    stage: String,
    /// JSON config file
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Override a config value, e.g. `eps_ft=120` or `clips.processor=avconv`
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let stage: Stage = cli.stage.parse()?;
    let cfg = PipelineConfig::load(&cli.config, &cli.params)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(PipelineError::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcome = pool.install(|| run(stage, &cfg))?;
    for r in &outcome.reports {
        println!(
            "{:<14} {:<30} in {:>7} out {:>7} dropped {:>6}  {:.3}s",
            r.stage,
            r.output,
            r.rows_in,
            r.rows_out,
            r.drops.values().sum::<u64>(),
            r.wall_time_s
        );
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    if let Some(msg) = outcome.paused {
        println!("paused for review: {msg}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
