use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nsenc::cli::{self, RunOverrides};

#[derive(Parser)]
#[command(
    name = "nsenc",
    about = "Neurosymbolic encoders over trajectory data: synthesize binary \
             programs alongside a trajectory VAE and evaluate the induced \
             clusterings.",
    after_help = "Exit codes: 0 success, 2 config error, 3 data error, \
                  4 training failure, 1 other."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: JSONL splits, schema, labels, manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run synthesis + evaluation for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of programs.
        #[arg(long)]
        k: Option<usize>,
        /// Override the maximum program depth.
        #[arg(long)]
        max_depth: Option<usize>,
        /// Run one worker thread per seed.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Evaluate saved programs against the labeled test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding program_*.txt files.
        #[arg(long)]
        programs: PathBuf,
        /// Optional path for the metrics JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a saved program with a feature glossary.
    ShowProgram {
        #[arg(long)]
        config: PathBuf,
        file: PathBuf,
    },
    /// Export neural latents, their 2-D projection, bits, and clusters as CSV.
    ExportLatents {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        programs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => cli::cmd_gen_data(&config, &out),
        Command::Run {
            config,
            seed,
            out,
            k,
            max_depth,
            parallel_seeds,
        } => cli::cmd_run(
            &config,
            &RunOverrides {
                seed,
                out,
                k,
                max_depth,
                parallel_seeds,
            },
        )
        .map(|_| ()),
        Command::Eval {
            config,
            programs,
            out,
        } => cli::cmd_eval(&config, &programs, out.as_deref()).map(|_| ()),
        Command::ShowProgram { config, file } => {
            cli::cmd_show_program(&config, &file).map(|_| ())
        }
        Command::ExportLatents {
            config,
            checkpoint,
            programs,
            out,
        } => cli::cmd_export_latents(&config, &checkpoint, &programs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
