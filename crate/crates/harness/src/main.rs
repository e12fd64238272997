use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exlab::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "exlab", about = "Run extraction-lab experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run once per value of a numeric config field.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `attack.budget`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
    },
}

fn load(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => load(config, &cli).and_then(|c| exlab::run(&c)).map(|out| {
            println!("{} rows -> {}", out.rows.len(), out.dir.join("results.csv").display());
        }),
        Command::Sweep { config, axis, values } => load(config, &cli).and_then(|c| exlab::sweep(&c, axis, values)).map(|out| {
            println!("{} runs -> {}", out.runs.len(), out.csv.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("exlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
