//! Ablation grids.
//!
//! A grid file is an ordinary config (the shared base) plus cell overrides
//! of the form `cell.<axis>.<label>.<key> = <value>`, for example
//!
//! ```text
//! train.epochs = 60
//! cell.momentum.constant-0.999.policy.m.shape = constant
//! cell.momentum.constant-0.999.policy.m.start = 0.999
//! cell.momentum.cosine.policy.m.shape = cosine
//! ```
//!
//! Every cell runs all (fold, seed) pairs of the base config. Cells keep the
//! order in which they first appear.

use std::fs;
use std::path::Path;

use crate::config::{split_lines, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{mean_std, median, train_all, RunOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub axis: String,
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub base: ExperimentConfig,
    pub cells: Vec<Cell>,
}

pub fn parse_grid(text: &str) -> CliResult<Grid> {
    let mut base = ExperimentConfig::default();
    let mut cells: Vec<Cell> = Vec::new();
    for (key, value, line) in split_lines(text)? {
        let Some(rest) = key.strip_prefix("cell.") else {
            base.set(&key, &value).map_err(|e| CliError::Config(format!("line {line}: {e}")))?;
            continue;
        };
        let mut parts = rest.splitn(3, '.');
        let (Some(axis), Some(label), Some(k)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CliError::Config(format!("line {line}: expected cell.<axis>.<label>.<key>, found {key:?}")));
        };
        match cells.iter_mut().find(|c| c.axis == axis && c.label == label) {
            Some(c) => c.overrides.push((k.into(), value)),
            None => cells.push(Cell { axis: axis.into(), label: label.into(), overrides: vec![(k.into(), value)] }),
        }
    }
    if cells.is_empty() {
        return Err(CliError::Config("ablation grid has no cells".into()));
    }
    Ok(Grid { base, cells })
}

impl Cell {
    pub fn config(&self, base: &ExperimentConfig) -> CliResult<ExperimentConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v).map_err(CliError::Config)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub axis: String,
    pub label: String,
    pub outcome: Result<Vec<RunOutcome>, String>,
}

/// One row per cell: median, mean and std of test mAP in points, and the
/// regime verdicts. Skipped cells carry the reason.
pub fn ablation_table(results: &[CellResult]) -> (String, String) {
    let mut csv = String::from("axis,variant,runs,map_median,map_mean,map_std,regimes,status\n");
    let mut txt = String::new();
    let mut last_axis = None;
    for r in results {
        if last_axis != Some(&r.axis) {
            txt.push_str(&format!("[{}]\n", r.axis));
            last_axis = Some(&r.axis);
        }
        match &r.outcome {
            Ok(runs) => {
                let maps: Vec<f64> = runs.iter().map(|o| 100.0 * o.test.map).collect();
                let (mean, std) = mean_std(&maps);
                let med = median(&maps);
                let regimes: Vec<&str> = runs.iter().map(|o| o.regime.name()).collect();
                csv.push_str(&format!(
                    "{},{},{},{med:.4},{mean:.4},{std:.4},{},ok\n",
                    r.axis,
                    r.label,
                    runs.len(),
                    regimes.join(" ")
                ));
                txt.push_str(&format!("  {:<24} mAP {med:6.2} (median of {}) | {}\n", r.label, runs.len(), regimes.join(" ")));
            }
            Err(why) => {
                let why = why.replace(',', ";");
                csv.push_str(&format!("{},{},0,,,,,skipped: {why}\n", r.axis, r.label));
                txt.push_str(&format!("  {:<24} skipped: {why}\n", r.label));
            }
        }
    }
    (csv, txt)
}

/// Runs every valid cell into `out/<axis>/<label>` and writes
/// `ablation.csv` and `ablation.txt`.
pub fn run_grid(
    grid: &Grid,
    load: impl Fn(&ExperimentConfig) -> CliResult<semisup_core::datagen::Benchmark>,
    out: &Path,
    jobs: usize,
) -> CliResult<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in &grid.cells {
        let outcome = match cell.config(&grid.base) {
            Ok(cfg) => {
                let bench = load(&cfg)?;
                let dir = out.join(&cell.axis).join(&cell.label);
                fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                Ok(train_all(&cfg, &bench, &dir, jobs)?)
            }
            Err(e) => {
                eprintln!("skipping cell {}.{}: {e}", cell.axis, cell.label);
                Err(e.to_string())
            }
        };
        results.push(CellResult { axis: cell.axis.clone(), label: cell.label.clone(), outcome });
    }
    let (csv, txt) = ablation_table(&results);
    for (name, text) in [("ablation.csv", csv), ("ablation.txt", txt)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_an_error() {
        assert!(matches!(parse_grid("train.epochs = 3\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn cells_collect_overrides_in_order() {
        let g = parse_grid(
            "train.epochs = 7\n\
             cell.m.const.policy.m.shape = constant\n\
             cell.m.const.policy.m.start = 0.999\n\
             cell.m.cos.policy.m.shape = cosine\n",
        )
        .unwrap();
        assert_eq!(g.base.train.epochs, 7);
        assert_eq!(g.cells.len(), 2);
        assert_eq!(g.cells[0].overrides.len(), 2);
        let c = g.cells[0].config(&g.base).unwrap();
        assert_eq!(c.train.policy.momentum.start, 0.999);
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn malformed_cell_key_is_rejected() {
        assert!(parse_grid("cell.m = 3\n").is_err());
    }

    #[test]
    fn invalid_cell_is_reported_not_fatal() {
        let g = parse_grid("cell.lr.bad.optimizer.lr = -1\n").unwrap();
        assert!(g.cells[0].config(&g.base).is_err());
        let r = CellResult { axis: "lr".into(), label: "bad".into(), outcome: Err("must be positive".into()) };
        let (csv, txt) = ablation_table(&[r]);
        assert!(csv.contains("lr,bad,0,,,,,skipped"));
        assert!(txt.contains("skipped"));
    }
}
