//! Pseudo-label analysis: replays teacher checkpoints over the unlabelled
//! pool, whose ground truth the training loop never saw, and tabulates
//! pseudo-label quality against confidence and training time.
//!
//! Output files (all CSV):
//!
//! - `iou_vs_score.csv`: one row per teacher detection per checkpoint, its
//!   confidence and its best IoU with a same-class ground-truth box
//! - `precision_by_epoch.csv`: precision at IoU 0.5 and 0.75 of the
//!   pseudo-labels that pass the threshold in force at that epoch
//! - `fbeta_by_epoch.csv`: precision, recall and F-beta for every
//!   (checkpoint, threshold) cell
//! - `threshold_sweep.csv`: the same averaged over checkpoints
//! - `best_threshold.csv`: the F-beta optimal threshold per checkpoint
//! - `arctan_fit.csv`: arctan schedule fitted to the optimal thresholds

use std::fs;
use std::path::Path;

use semisup_core::datagen::Benchmark;
use semisup_core::detector::{predict, ModelParams};
use semisup_core::geometry::iou;
use semisup_core::metrics::{
    best_threshold, dataset_counts, default_threshold_grid, f_beta, fit_arctan_schedule, precision_recall, Detection,
    LabelSet,
};

use crate::error::{CliError, CliResult};
use crate::experiment::{checkpoint_path, fold_split, parse_history};

pub const BETA: f64 = 0.5;

/// Teacher output for every unlabelled scene at one checkpoint.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub preds: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, Default)]
pub struct AnalysisTables {
    pub iou_vs_score: String,
    pub precision_by_epoch: String,
    pub fbeta_by_epoch: String,
    pub threshold_sweep: String,
    pub best_threshold: String,
    pub arctan_fit: String,
}

impl AnalysisTables {
    pub fn files(&self) -> [(&'static str, &String); 6] {
        [
            ("iou_vs_score.csv", &self.iou_vs_score),
            ("precision_by_epoch.csv", &self.precision_by_epoch),
            ("fbeta_by_epoch.csv", &self.fbeta_by_epoch),
            ("threshold_sweep.csv", &self.threshold_sweep),
            ("best_threshold.csv", &self.best_threshold),
            ("arctan_fit.csv", &self.arctan_fit),
        ]
    }
}

fn best_iou(d: &Detection, gt: &LabelSet) -> f64 {
    gt.iter().filter(|(_, c)| *c == d.class_id).map(|(b, _)| iou(&d.bbox, b)).fold(0.0, f64::max)
}

/// Training admits `zeta > sigma`; the F-beta grid keeps `zeta >= sigma`.
fn filter(preds: &[Vec<Detection>], sigma: f64, strict: bool) -> Vec<Vec<Detection>> {
    let keep = |d: &Detection| if strict { d.score > sigma } else { d.score >= sigma };
    preds.iter().map(|p| p.iter().copied().filter(|d| keep(d)).collect()).collect()
}

/// Builds every table from teacher snapshots. `thresholds[i]` is the
/// confidence threshold in force when snapshot `i` was taken; `total` is the
/// run length in epochs.
pub fn analyze_snapshots(
    snapshots: &[Snapshot],
    scene_ids: &[u64],
    gts: &[LabelSet],
    thresholds: &[f64],
    total: usize,
) -> CliResult<AnalysisTables> {
    let grid = default_threshold_grid();
    let mut t = AnalysisTables {
        iou_vs_score: "epoch,scene_id,class_id,score,iou\n".into(),
        precision_by_epoch: "epoch,sigma,pseudo_labels,precision_iou50,precision_iou75,recall_iou50\n".into(),
        fbeta_by_epoch: "epoch,sigma,precision,recall,f_beta\n".into(),
        threshold_sweep: "sigma,precision,recall,f_beta\n".into(),
        best_threshold: "epoch,progress,sigma,f_beta\n".into(),
        arctan_fit: "start,end,steepness,ssr,points\n".into(),
    };
    let mut sweep = vec![(0.0, 0.0, 0.0); grid.len()];
    let mut points = Vec::new();
    for (snap, &sigma_t) in snapshots.iter().zip(thresholds) {
        for (dets, (&id, gt)) in snap.preds.iter().zip(scene_ids.iter().zip(gts)) {
            for d in dets {
                t.iou_vs_score.push_str(&format!("{},{},{},{:?},{:?}\n", snap.epoch, id, d.class_id, d.score, best_iou(d, gt)));
            }
        }
        let kept = filter(&snap.preds, sigma_t, true);
        let c50 = dataset_counts(&kept, gts, 0.5);
        let c75 = dataset_counts(&kept, gts, 0.75);
        let (p50, p75) = (precision_recall(&c50), precision_recall(&c75));
        t.precision_by_epoch.push_str(&format!(
            "{},{:?},{},{:?},{:?},{:?}\n",
            snap.epoch,
            sigma_t,
            c50.tp + c50.fp,
            p50.precision,
            p75.precision,
            p50.recall
        ));
        for (k, &s) in grid.iter().enumerate() {
            let pr = precision_recall(&dataset_counts(&filter(&snap.preds, s, false), gts, 0.5));
            let f = f_beta(pr, BETA);
            t.fbeta_by_epoch.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", snap.epoch, s, pr.precision, pr.recall, f));
            sweep[k].0 += pr.precision;
            sweep[k].1 += pr.recall;
            sweep[k].2 += f;
        }
        let choice = best_threshold(&snap.preds, gts, BETA, &grid, 0.5)?;
        let progress = snap.epoch as f64 / total.max(1) as f64;
        t.best_threshold.push_str(&format!("{},{:?},{:?},{:?}\n", snap.epoch, progress, choice.sigma, choice.f_beta));
        points.push((progress, choice.sigma));
    }
    let n = snapshots.len().max(1) as f64;
    for (s, (p, r, f)) in grid.iter().zip(sweep) {
        t.threshold_sweep.push_str(&format!("{:?},{:?},{:?},{:?}\n", s, p / n, r / n, f / n));
    }
    match fit_arctan_schedule(&points) {
        Ok(fit) => t.arctan_fit.push_str(&format!(
            "{:?},{:?},{:?},{:?},{}\n",
            fit.start,
            fit.end,
            fit.steepness,
            fit.ssr,
            points.len()
        )),
        Err(_) => t.arctan_fit.push_str(&format!(",,,,{}\n", points.len())),
    }
    Ok(t)
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Checkpoint epochs present in a run directory, ascending.
pub fn checkpoint_epochs(run_dir: &Path) -> CliResult<Vec<usize>> {
    let dir = run_dir.join("checkpoints");
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut epochs: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("epoch_")?.strip_suffix(".teacher.txt")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    Ok(epochs)
}

fn result_value(result: &str, key: &str) -> Option<String> {
    result.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Replays the checkpoints of one run directory.
pub fn analyze_run(run_dir: &Path, bench: &Benchmark) -> CliResult<AnalysisTables> {
    let cfg = crate::config::ExperimentConfig::parse(&read(&run_dir.join("config.txt"))?)?;
    let result = read(&run_dir.join("result.txt"))?;
    let fold: usize = result_value(&result, "fold")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Io(format!("{}: result.txt lacks the fold", run_dir.display())))?;
    let history = parse_history(&read(&run_dir.join("history.jsonl"))?)?;
    let epochs = checkpoint_epochs(run_dir)?;
    if epochs.is_empty() {
        return Err(CliError::Io(format!("{}: no teacher checkpoints", run_dir.display())));
    }
    let split = fold_split(&cfg, bench.train.len(), fold)?;
    let scenes: Vec<_> = split.unlabelled.iter().map(|&i| &bench.train[i]).collect();
    let ids: Vec<u64> = scenes.iter().map(|s| s.id).collect();
    let gts: Vec<LabelSet> = scenes.iter().map(|s| s.labels.clone()).collect();
    let mut snapshots = Vec::new();
    let mut thresholds = Vec::new();
    for &e in &epochs {
        let teacher = ModelParams::from_text(&read(&checkpoint_path(run_dir, e, "teacher"))?)?;
        let preds = scenes.iter().map(|s| predict(&teacher, &s.image, 0.0)).collect::<Result<Vec<_>, _>>()?;
        snapshots.push(Snapshot { epoch: e, preds });
        // threshold of the last epoch the checkpoint saw
        let sigma = history.iter().find(|h| h.epoch + 1 == e).map_or(cfg.train.policy.threshold.end, |h| h.threshold);
        thresholds.push(sigma);
    }
    analyze_snapshots(&snapshots, &ids, &gts, &thresholds, cfg.train.epochs)
}

pub fn write_tables(tables: &AnalysisTables, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (name, text) in tables.files() {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use semisup_core::geometry::BBox;

    fn gts() -> Vec<LabelSet> {
        let mut a = LabelSet::empty();
        a.push(BBox::new(0.1, 0.1, 0.3, 0.3), 0);
        a.push(BBox::new(0.5, 0.5, 0.8, 0.9), 1);
        let mut b = LabelSet::empty();
        b.push(BBox::new(0.2, 0.6, 0.4, 0.8), 1);
        vec![a, b]
    }

    fn column(csv: &str, col: usize) -> Vec<f64> {
        csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
    }

    #[test]
    fn oracle_teacher_is_precise_everywhere() {
        let g = gts();
        let preds: Vec<Vec<Detection>> =
            g.iter().map(|ls| ls.iter().map(|(b, c)| Detection::new(*b, c, 0.999)).collect()).collect();
        let snaps = vec![Snapshot { epoch: 5, preds: preds.clone() }, Snapshot { epoch: 10, preds }];
        let t = analyze_snapshots(&snaps, &[0, 1], &g, &[0.3, 0.4], 10).unwrap();
        assert!(column(&t.fbeta_by_epoch, 2).iter().all(|&p| p == 1.0));
        assert!(column(&t.precision_by_epoch, 3).iter().all(|&p| p == 1.0));
    }

    #[test]
    fn weak_teacher_loses_recall_at_high_threshold() {
        let g = gts();
        let preds: Vec<Vec<Detection>> = g
            .iter()
            .map(|ls| ls.iter().map(|(b, c)| Detection::new(*b, c, 0.34)).collect())
            .collect();
        let snaps = vec![Snapshot { epoch: 1, preds }];
        let t = analyze_snapshots(&snaps, &[0, 1], &g, &[0.1], 10).unwrap();
        let sigmas = column(&t.fbeta_by_epoch, 1);
        let recalls = column(&t.fbeta_by_epoch, 3);
        for (s, r) in sigmas.iter().zip(&recalls) {
            if *s >= 0.34 {
                assert_eq!(*r, 0.0);
            }
        }
        // recall never increases with the threshold
        assert!(recalls.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(t.arctan_fit.lines().nth(1).unwrap(), ",,,,1");
    }
}
