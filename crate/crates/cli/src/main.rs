use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcbf_cli::{presets, run_experiment, CliError, ExperimentConfig, RunOptions};

/// Feasibility maps and closed-loop rollouts for CLF/CBF model predictive
/// controllers.
#[derive(Parser)]
#[command(name = "dcbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config file or a bundled preset name.
    Run {
        config: String,
        /// Output directory (default: the config's output_dir, else runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for grid sampling and rollouts (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Log progress to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// List bundled presets, or the *.toml files of a directory.
    ListPresets {
        #[arg(long)]
        preset_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string())),
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.record());
    ExitCode::from(e.exit_code() as u8)
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::ListPresets { preset_dir } => {
            let list = match preset_dir {
                Some(dir) => presets::list_dir(&dir)?,
                None => presets::list_bundled()?,
            };
            for (name, description) in list {
                println!("{name}\t{description}");
            }
            Ok(0)
        }
        Command::Run {
            config,
            out,
            jobs,
            seed,
            verbose,
        } => {
            init_logging(verbose);
            let (text, source) = load(&config)?;
            let parsed = ExperimentConfig::from_toml(&text)?;
            let opts = RunOptions {
                out,
                jobs,
                seed,
                source,
            };
            let outcome = run_experiment(parsed, &opts)?;
            for c in &outcome.checks {
                println!("{}", c.line());
            }
            println!("artifacts: {}", outcome.out_dir.display());
            Ok(if outcome.passed() { 0 } else { 1 })
        }
    }
}

/// Reads `arg` as a file when it exists, else as a preset name.
fn load(arg: &str) -> Result<(String, String), CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return Ok((text, arg.to_string()));
    }
    match presets::find(arg) {
        Some(p) => Ok((p.text.to_string(), p.name.to_string())),
        None => Err(CliError::Usage(format!("'{arg}' is neither a config file nor a preset name"))),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}
