//! Confidence-threshold selection by F-beta and arctan curve fitting of the
//! per-epoch optimum.

use serde::{Deserialize, Serialize};

use super::{dataset_counts, f_beta, precision_recall, Detection, LabelSet};
use crate::error::{Error, Result};
use crate::schedules::arctan_profile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub sigma: f64,
    pub f_beta: f64,
}

/// `{0.05, 0.10, ..., 0.95}`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Exhaustive grid search for the score threshold maximizing F-beta of the
/// surviving pseudo-labels. Ties go to the larger threshold. With no
/// pseudo-labels at all the largest grid value is returned with F = 0.
pub fn best_threshold(
    pseudo: &[Vec<Detection>],
    gts: &[LabelSet],
    beta: f64,
    grid: &[f64],
    iou_thresh: f64,
) -> Result<ThresholdChoice> {
    if pseudo.len() != gts.len() {
        return Err(Error::LengthMismatch { left: pseudo.len(), right: gts.len() });
    }
    let Some(&largest) = grid.last() else {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    };
    if pseudo.iter().all(Vec::is_empty) {
        return Ok(ThresholdChoice { sigma: largest, f_beta: 0.0 });
    }
    let mut best = ThresholdChoice { sigma: grid[0], f_beta: f64::NEG_INFINITY };
    for &sigma in grid {
        let f = f_beta_at(pseudo, gts, beta, sigma, iou_thresh);
        if f >= best.f_beta {
            best = ThresholdChoice { sigma, f_beta: f };
        }
    }
    Ok(best)
}

/// F-beta of the pseudo-labels scoring at least `sigma`.
pub fn f_beta_at(pseudo: &[Vec<Detection>], gts: &[LabelSet], beta: f64, sigma: f64, iou_thresh: f64) -> f64 {
    let kept: Vec<Vec<Detection>> =
        pseudo.iter().map(|p| p.iter().copied().filter(|d| d.score >= sigma).collect()).collect();
    f_beta(precision_recall(&dataset_counts(&kept, gts, iou_thresh)), beta)
}

/// Least-squares fit of `start + (end - start) * atan(k x) / atan(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArctanFit {
    pub start: f64,
    pub end: f64,
    pub steepness: f64,
    /// Sum of squared residuals at the optimum.
    pub ssr: f64,
}

/// Steepness values searched by [`fit_arctan_schedule`]: 0.25 to 20 in
/// steps of 0.25.
pub fn steepness_grid() -> Vec<f64> {
    (1..=80).map(|i| i as f64 * 0.25).collect()
}

/// Fits the arctan family to `(t/T, sigma*)` points. For each steepness on a
/// coarse grid the two endpoints enter linearly and are solved in closed
/// form; the steepness with the lowest residual wins (first one on ties).
pub fn fit_arctan_schedule(points: &[(f64, f64)]) -> Result<ArctanFit> {
    if points.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: points.len() });
    }
    let mut best: Option<ArctanFit> = None;
    for k in steepness_grid() {
        let fit = fit_endpoints(points, k);
        if best.is_none_or(|b| fit.ssr < b.ssr) {
            best = Some(fit);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Closed-form endpoints for fixed steepness: the model is
/// `start * (1 - g) + end * g` with `g = atan(k x) / atan(k)`.
fn fit_endpoints(points: &[(f64, f64)], k: f64) -> ArctanFit {
    let (mut s_aa, mut s_ab, mut s_bb, mut s_ay, mut s_by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let g = arctan_profile(k, x);
        let a = 1.0 - g;
        s_aa += a * a;
        s_ab += a * g;
        s_bb += g * g;
        s_ay += a * y;
        s_by += g * y;
    }
    let det = s_aa * s_bb - s_ab * s_ab;
    let (start, end) = if det.abs() < 1e-14 * (s_aa * s_bb).max(1e-300) {
        let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        (mean, mean)
    } else {
        ((s_ay * s_bb - s_by * s_ab) / det, (s_aa * s_by - s_ab * s_ay) / det)
    };
    let ssr = points
        .iter()
        .map(|&(x, y)| {
            let g = arctan_profile(k, x);
            let r = y - (start + (end - start) * g);
            r * r
        })
        .sum();
    ArctanFit { start, end, steepness: k, ssr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scene(n_good: usize, bad_scores: &[f64], good_score: f64) -> (Vec<Detection>, LabelSet) {
        let mut gt = LabelSet::empty();
        let mut preds = Vec::new();
        for i in 0..n_good {
            let b = BBox::new(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.05, 0.05);
            gt.push(b, 0);
            preds.push(Detection::new(b, 0, good_score));
        }
        for (i, &s) in bad_scores.iter().enumerate() {
            let b = BBox::new(0.1 * i as f64, 0.5, 0.1 * i as f64 + 0.05, 0.55);
            preds.push(Detection::new(b, 0, s));
        }
        (preds, gt)
    }

    #[test]
    fn all_correct_high_scores_pick_largest_lossless_threshold() {
        let (p, g) = scene(4, &[], 0.92);
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let c = best_threshold(&[p], &[g], 0.5, &grid, 0.5).unwrap();
        assert_eq!(c.sigma, 0.9);
        assert_eq!(c.f_beta, 1.0);
    }

    #[test]
    fn half_false_positives_below_point_three() {
        let (p, g) = scene(4, &[0.15, 0.2, 0.25, 0.28], 0.75);
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        // enumerate the grid by hand: 0.1 and 0.2 keep false positives
        let fs: Vec<f64> = grid.iter().map(|&s| f_beta_at(std::slice::from_ref(&p), std::slice::from_ref(&g), 0.5, s, 0.5)).collect();
        assert!(fs[0] < 1.0 && fs[1] < 1.0);
        assert!(fs[2..7].iter().all(|&f| f == 1.0));
        assert!(fs[7..].iter().all(|&f| f == 0.0));
        let c = best_threshold(&[p], &[g], 0.5, &grid, 0.5).unwrap();
        assert!((0.3..=0.7 + 1e-12).contains(&c.sigma));
        // tie-break toward the larger threshold
        assert!((c.sigma - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_pseudo_labels() {
        let (_, g) = scene(2, &[], 0.9);
        let grid = default_threshold_grid();
        let c = best_threshold(&[Vec::new()], &[g], 0.5, &grid, 0.5).unwrap();
        assert_eq!(c.sigma, *grid.last().unwrap());
        assert_eq!(c.f_beta, 0.0);
    }

    fn arctan_points(start: f64, end: f64, k: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let x = i as f64 / (n - 1) as f64;
                (x, start + (end - start) * arctan_profile(k, x))
            })
            .collect()
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let fit = fit_arctan_schedule(&arctan_points(0.1, 0.6, 5.0, 20)).unwrap();
        assert!(fit.ssr <= 1e-6);
        assert_eq!(fit.steepness, 5.0);
        assert!((fit.start - 0.1).abs() < 1e-9 && (fit.end - 0.6).abs() < 1e-9);
    }

    #[test]
    fn flat_points() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 / 9.0, 0.4)).collect();
        let fit = fit_arctan_schedule(&pts).unwrap();
        assert!((fit.start - 0.4).abs() < 1e-9 && (fit.end - 0.4).abs() < 1e-9);
        assert!(fit.ssr < 1e-20);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_arctan_schedule(&[(0.0, 0.1), (1.0, 0.2)]).is_err());
    }

    #[test]
    fn noisy_fit_beats_truth_and_fine_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sd = 0.02;
        let noise = Normal::new(0.0, sd).unwrap();
        let clean = arctan_points(0.2, 0.55, 3.0, 40);
        let noisy: Vec<(f64, f64)> = clean.iter().map(|&(x, y)| (x, y + noise.sample(&mut rng))).collect();
        let fit = fit_arctan_schedule(&noisy).unwrap();
        let n = noisy.len() as f64;
        assert!(fit.ssr <= sd * sd * n);
        let truth_ssr: f64 = noisy.iter().zip(&clean).map(|(a, b)| (a.1 - b.1).powi(2)).sum();
        assert!(fit.ssr <= truth_ssr + 1e-12);

        // brute-force oracle over a fine grid of all three parameters,
        // restricted to the same steepness grid
        let mut oracle = f64::INFINITY;
        for k in steepness_grid() {
            for i in 0..=100 {
                for j in 0..=100 {
                    let (s, e) = (i as f64 / 100.0, j as f64 / 100.0);
                    let ssr: f64 = noisy
                        .iter()
                        .map(|&(x, y)| (y - (s + (e - s) * arctan_profile(k, x))).powi(2))
                        .sum();
                    oracle = oracle.min(ssr);
                }
            }
        }
        assert!(fit.ssr <= oracle + 1e-12);
    }
}
