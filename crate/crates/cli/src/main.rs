use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semisup_cli::commands::{cmd_ablate, cmd_analyze, cmd_generate, cmd_train, default_out, read_config, Overrides};
use semisup_cli::experiment::summary_table;
use semisup_cli::{CliError, CliResult, ExperimentConfig};

/// Curriculum-scheduled student/teacher self-training on synthetic scenes.
///
/// Exit codes: 0 success, 2 config error, 3 I/O error, 4 runtime error.
#[derive(Parser)]
#[command(name = "semisup", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root [env: SEMISUP_OUT, default: runs].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunFlags {
    /// Comma-separated seeds, overriding run.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of data folds, overriding split.folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dataset directory, overriding dataset.dir.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train every (fold, seed) pair and write histories, checkpoints and a summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Replay a run's teacher checkpoints over its unlabelled pool.
    Analyze {
        /// Run directory (one fold/seed) holding checkpoints.
        run: PathBuf,
        /// Dataset directory; defaults to the run's dataset.dir or <run>/../dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where the tables go; defaults to <run>/analysis.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write a comparison table.
    Ablate {
        /// Grid file: base keys plus cell.<axis>.<label>.<key> overrides.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Print the default config.
    Defaults,
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    match &common.config {
        Some(p) => read_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Generate { common } => {
            let cfg = load(&common)?;
            let dir = cmd_generate(&cfg, &common.out.unwrap_or_else(default_out))?;
            println!("dataset written to {}", dir.display());
        }
        Cmd::Train { common, run } => {
            let mut cfg = load(&common)?;
            Overrides { seeds: run.seeds, folds: run.folds, data: run.data }.apply(&mut cfg);
            let out = common.out.unwrap_or_else(default_out);
            let runs = cmd_train(&cfg, &out, run.jobs)?;
            print!("{}", summary_table(&cfg, &runs).1);
        }
        Cmd::Analyze { run, data, out } => {
            cmd_analyze(&run, data.as_deref(), out.as_deref())?;
            println!("analysis written to {}", out.unwrap_or_else(|| run.join("analysis")).display());
        }
        Cmd::Ablate { config, out, run } => {
            let text = fs::read_to_string(&config).map_err(|e| CliError::io(&config, e))?;
            let over = Overrides { seeds: run.seeds, folds: run.folds, data: run.data };
            let out = out.unwrap_or_else(default_out);
            cmd_ablate(&text, &over, &out, run.jobs)?;
            print!("{}", fs::read_to_string(out.join("ablation.txt")).unwrap_or_default());
        }
        Cmd::Defaults => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semisup: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
