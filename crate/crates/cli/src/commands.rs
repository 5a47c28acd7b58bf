//! The four subcommands as library functions, so tests can drive them
//! without spawning the binary.

use std::fs;
use std::path::{Path, PathBuf};

use semisup_core::datagen::Benchmark;

use crate::ablate::{parse_grid, run_grid, CellResult};
use crate::analyze::{analyze_run, write_tables, AnalysisTables};
use crate::config::ExperimentConfig;
use crate::dataset::{dataset_dir, load_dataset, write_dataset};
use crate::error::{CliError, CliResult};
use crate::experiment::{train_all, RunOutcome};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SEMISUP_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

pub fn read_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg = ExperimentConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Command-line overrides shared by `train` and `ablate`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub folds: Option<usize>,
    pub data: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(f) = self.folds {
            cfg.folds = f;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = d.to_string_lossy().into_owned();
        }
    }
}

/// Writes the dataset. Rerunning with the same config rewrites identical
/// bytes.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    let dir = dataset_dir(cfg, out);
    write_dataset(cfg, &dir)?;
    Ok(dir)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> CliResult<Vec<RunOutcome>> {
    cfg.validate()?;
    let bench = load_dataset(cfg, &dataset_dir(cfg, out))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    train_all(cfg, &bench, out, jobs)
}

/// Analyses one run directory against the dataset it was trained on. The
/// dataset is looked up in `data`, then the run's `dataset.dir`, then
/// `<run>/../dataset`.
pub fn cmd_analyze(run_dir: &Path, data: Option<&Path>, out: Option<&Path>) -> CliResult<AnalysisTables> {
    let cfg_path = run_dir.join("config.txt");
    let cfg = ExperimentConfig::parse(&fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?)?;
    let dir = match data {
        Some(d) => d.to_path_buf(),
        None if !cfg.data_dir.is_empty() => PathBuf::from(&cfg.data_dir),
        None => run_dir.parent().unwrap_or(Path::new(".")).join("dataset"),
    };
    let bench: Benchmark = load_dataset(&cfg, &dir)?;
    let tables = analyze_run(run_dir, &bench)?;
    let out = out.map_or_else(|| run_dir.join("analysis"), Path::to_path_buf);
    write_tables(&tables, &out)?;
    Ok(tables)
}

/// Runs an ablation grid. Each distinct dataset config is generated (or
/// reused) under `<out>/dataset-<hash prefix>` unless a directory is given.
pub fn cmd_ablate(grid_text: &str, over: &Overrides, out: &Path, jobs: usize) -> CliResult<Vec<CellResult>> {
    let mut grid = parse_grid(grid_text)?;
    over.apply(&mut grid.base);
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let load = |cfg: &ExperimentConfig| -> CliResult<Benchmark> {
        let dir = if cfg.data_dir.is_empty() {
            out.join(format!("dataset-{}", &crate::dataset::config_hash(cfg)[..12]))
        } else {
            PathBuf::from(&cfg.data_dir)
        };
        if dir.join("manifest.txt").exists() {
            load_dataset(cfg, &dir)
        } else {
            write_dataset(cfg, &dir)
        }
    };
    run_grid(&grid, load, out, jobs)
}
