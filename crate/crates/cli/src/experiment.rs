//! Training runs over (fold, seed) pairs and their on-disk artifacts.
//!
//! A run directory holds:
//!
//! ```text
//! config.txt                  full experiment config of the run
//! history.jsonl               one JSON object per epoch
//! history.csv                 the same as plot-ready columns
//! checkpoints/epoch_NNNN.teacher.txt, epoch_NNNN.student.txt
//! result.txt                  final test metrics and regime verdict
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use semisup_core::datagen::{split_pld, Benchmark, Scene, Split};
use semisup_core::engine::{detect_cycle_regime, evaluate, run_training, Regime, StepLog, TrainData};
use semisup_core::image::Image;
use semisup_core::metrics::MetricsRecord;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Fold seed for fold `fold` of a dataset seeded with `data_seed`.
pub fn fold_seed(data_seed: u64, fold: usize) -> u64 {
    data_seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

pub fn fold_split(cfg: &ExperimentConfig, n_train: usize, fold: usize) -> CliResult<Split> {
    Ok(split_pld(n_train, cfg.ratio, fold_seed(cfg.data_seed, fold))?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fold: usize,
    pub seed: u64,
    pub history: Vec<StepLog>,
    pub test: MetricsRecord,
    pub regime: Regime,
    pub checkpoints: Vec<(usize, semisup_core::detector::ModelParams, semisup_core::detector::ModelParams)>,
}

/// Trains one (fold, seed) pair in memory and scores the final teacher on
/// the test split.
pub fn run_one(cfg: &ExperimentConfig, bench: &Benchmark, fold: usize, seed: u64) -> CliResult<RunOutcome> {
    let split = fold_split(cfg, bench.train.len(), fold)?;
    let labelled: Vec<Scene> = split.labelled.iter().map(|&i| bench.train[i].clone()).collect();
    let unlabelled: Vec<Image> = split.unlabelled.iter().map(|&i| bench.train[i].image.clone()).collect();
    let data = TrainData { labelled: &labelled, unlabelled: &unlabelled, val: &bench.val };
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let every = (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every);
    let run = run_training(&tc, &data, every)?;
    let test = evaluate(&run.state.teacher, &bench.test)?;
    let regime = detect_cycle_regime(&run.history, cfg.regime_window, cfg.regime_slope)?;
    Ok(RunOutcome { fold, seed, history: run.history, test, regime, checkpoints: run.checkpoints })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

pub const HISTORY_COLUMNS: &str = "epoch,sup_loss,unsup_loss,total_loss,pi,alpha,sigma,m,lr,drawn,admitted,pseudo_labels,n_conf_0.9,n_conf_0.5,val_map,val_ap50,val_ap75,covariance";

pub fn history_csv(history: &[StepLog]) -> String {
    let mut s = String::from(HISTORY_COLUMNS);
    s.push('\n');
    for h in history {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{:?},{:?},{},{},{},{}\n",
            h.epoch,
            h.sup_loss,
            h.unsup_loss,
            h.total_loss,
            h.sampling,
            h.loss_weight,
            h.threshold,
            h.momentum,
            h.lr,
            h.drawn,
            h.admitted,
            h.pseudo_labels,
            h.n_conf_09,
            h.n_conf_05,
            opt(h.val.map(|v| v.map)),
            opt(h.val.map(|v| v.ap50)),
            opt(h.val.map(|v| v.ap75)),
            opt(h.covariance),
        ));
    }
    s
}

pub fn history_jsonl(history: &[StepLog]) -> CliResult<String> {
    let mut s = String::new();
    for h in history {
        s.push_str(&serde_json::to_string(h).map_err(|e| CliError::Runtime(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_history(text: &str) -> CliResult<Vec<StepLog>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Io(format!("history line {}: {e}", i + 1))))
        .collect()
}

pub fn run_dir_name(fold: usize, seed: u64) -> String {
    format!("fold{fold}_seed{seed}")
}

pub fn checkpoint_path(dir: &Path, epoch: usize, which: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.{which}.txt"))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_run(cfg: &ExperimentConfig, dir: &Path, run: &RunOutcome) -> CliResult<()> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| CliError::io(dir, e))?;
    let mut rc = cfg.clone();
    rc.seeds = vec![run.seed];
    write(&dir.join("config.txt"), &format!("# fold = {}\n{}", run.fold, rc.to_text()))?;
    write(&dir.join("history.jsonl"), &history_jsonl(&run.history)?)?;
    write(&dir.join("history.csv"), &history_csv(&run.history))?;
    for (epoch, student, teacher) in &run.checkpoints {
        write(&checkpoint_path(dir, *epoch, "teacher"), &teacher.to_text())?;
        write(&checkpoint_path(dir, *epoch, "student"), &student.to_text())?;
    }
    let t = run.test;
    write(
        &dir.join("result.txt"),
        &format!(
            "fold = {}\nseed = {}\ntest.map = {:?}\ntest.ap50 = {:?}\ntest.ap75 = {:?}\nregime = {}\n",
            run.fold,
            run.seed,
            t.map,
            t.ap50,
            t.ap75,
            run.regime.name()
        ),
    )
}

/// Runs `tasks` on up to `jobs` threads. Results come back in task order
/// whatever the scheduling.
pub fn parallel_map<T: Sync, R: Send>(tasks: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("threads joined").into_iter().map(|r| r.expect("every task ran")).collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn label(cfg: &ExperimentConfig) -> &'static str {
    if cfg.is_supervised_baseline() {
        "supervised baseline"
    } else {
        "semi-supervised"
    }
}

/// Per-run rows plus one aggregate row of mean and sample standard
/// deviation, in percentage points.
pub fn summary_table(cfg: &ExperimentConfig, runs: &[RunOutcome]) -> (String, String) {
    let mut csv = String::from("kind,fold,seed,map,ap50,ap75,regime\n");
    for r in runs {
        csv.push_str(&format!(
            "run,{},{},{:.4},{:.4},{:.4},{}\n",
            r.fold,
            r.seed,
            100.0 * r.test.map,
            100.0 * r.test.ap50,
            100.0 * r.test.ap75,
            r.regime.name()
        ));
    }
    let col = |f: fn(&MetricsRecord) -> f64| mean_std(&runs.iter().map(|r| 100.0 * f(&r.test)).collect::<Vec<_>>());
    let (m, ms) = col(|t| t.map);
    let (a50, a50s) = col(|t| t.ap50);
    let (a75, a75s) = col(|t| t.ap75);
    csv.push_str(&format!("mean,,,{m:.4},{a50:.4},{a75:.4},\nstd,,,{ms:.4},{a50s:.4},{a75s:.4},\n"));
    let mut txt = format!(
        "{} | ratio {} | {} runs\nmAP {m:.2} ± {ms:.2} | AP50 {a50:.2} ± {a50s:.2} | AP75 {a75:.2} ± {a75s:.2}\n",
        label(cfg),
        cfg.ratio,
        runs.len()
    );
    for r in runs {
        txt.push_str(&format!("  fold {} seed {}: mAP {:.2} regime {}\n", r.fold, r.seed, 100.0 * r.test.map, r.regime.name()));
    }
    (csv, txt)
}

/// Trains every (fold, seed) pair, writes the run directories and the
/// summary files under `out`.
pub fn train_all(cfg: &ExperimentConfig, bench: &Benchmark, out: &Path, jobs: usize) -> CliResult<Vec<RunOutcome>> {
    cfg.validate()?;
    let tasks: Vec<(usize, u64)> = (0..cfg.folds).flat_map(|f| cfg.seeds.iter().map(move |&s| (f, s))).collect();
    let results = parallel_map(&tasks, jobs, |&(fold, seed)| -> CliResult<RunOutcome> {
        let run = run_one(cfg, bench, fold, seed)?;
        write_run(cfg, &out.join(run_dir_name(fold, seed)), &run)?;
        Ok(run)
    });
    let runs = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let (csv, txt) = summary_table(cfg, &runs);
    write(&out.join("summary.csv"), &csv)?;
    write(&out.join("summary.txt"), &txt)?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    Ok(runs)
}
