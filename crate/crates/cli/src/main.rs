use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgdeflate_cli::manifest::verify;
use mgdeflate_cli::run::{
    dump_inverse_magnitudes, run_eigensolver_comparison, run_hierarchy, run_solve, run_variance_sweep,
};
use mgdeflate_cli::{CliError, ExperimentConfig};

/// Deflated stochastic trace estimation experiments.
///
/// Exit codes: 0 ok, 2 configuration error, 3 numerical (or I/O) failure.
#[derive(Parser)]
#[command(name = "mgdeflate", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trace.ranks=[0,8] --set probing.noise=z4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output.dir=...`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set seeds.master=...`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("output.dir={:?}", out.to_string_lossy()));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seeds.master={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Trace estimates across deflation ranks and probing levels.
    VarianceSweep(ConfigArgs),
    /// Inversion counts of the three eigensolver approaches.
    EigCompare(ConfigArgs),
    /// Dense |A⁻¹|, its deflated and probed forms as heatmap CSVs.
    DumpInverse(ConfigArgs),
    /// One linear solve with the configured inverter.
    Solve(ConfigArgs),
    /// Build the multigrid hierarchy and dump it.
    Hierarchy(ConfigArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
    /// Check the hashes in a run directory's MANIFEST.
    Verify { dir: PathBuf },
}

fn run(verb: Verb) -> Result<(), CliError> {
    match verb {
        Verb::VarianceSweep(a) => run_variance_sweep(&a.resolve()?),
        Verb::EigCompare(a) => run_eigensolver_comparison(&a.resolve()?),
        Verb::DumpInverse(a) => dump_inverse_magnitudes(&a.resolve()?),
        Verb::Solve(a) => run_solve(&a.resolve()?),
        Verb::Hierarchy(a) => run_hierarchy(&a.resolve()?),
        Verb::Config(a) => {
            print!("{}", a.resolve()?.to_toml());
            Ok(())
        }
        Verb::Verify { dir } => {
            let bad = verify(&dir)?;
            for (file, why) in &bad {
                eprintln!("{file}: {why}");
            }
            if bad.is_empty() {
                Ok(())
            } else {
                Err(CliError::Failed(format!("{} file(s) do not match the MANIFEST", bad.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
