//! Displacement metrics, the best-of-N protocol, and the constant-velocity
//! baseline.
//!
//! ADE is the mean Euclidean distance between corresponding predicted and
//! true positions; FDE is the distance between the final positions.
//! Distances are unsquared. Best-of-N takes, per window, the minimum ADE and
//! the minimum FDE over its candidate futures (minimized independently), and
//! dataset metrics are means of those minima over windows.

use crate::error::{Error, Result};
use crate::sampler::PredictionSet;
use crate::trajdata::{denormalize_positions, TrajectoryWindow};
use serde::{Deserialize, Serialize};

/// Dataset-level evaluation result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over windows of the per-window minimum ADE, meters.
    pub ade: f64,
    /// Mean over windows of the per-window minimum FDE, meters.
    pub fde: f64,
    pub n_windows: usize,
    /// Candidate futures per window.
    pub n_samples: usize,
}

fn check_pair(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::validation("metric on empty trajectories"));
    }
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "length mismatch: predicted {} steps, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance over corresponding timesteps.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Euclidean distance between the final positions.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, truth)?;
    let p = pred[pred.len() - 1];
    let t = truth[truth.len() - 1];
    Ok(((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
}

/// Per-window best-of-N: minimum ADE and minimum FDE over the candidate
/// futures, minimized independently.
pub fn best_of_n(samples: &[Vec<[f64; 2]>], truth: &[[f64; 2]]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::validation("best-of-n on an empty sample set"));
    }
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for s in samples {
        best_ade = best_ade.min(ade(s, truth)?);
        best_fde = best_fde.min(fde(s, truth)?);
    }
    Ok((best_ade, best_fde))
}

/// Dataset evaluation: pairs predictions with truth windows by position and
/// averages the per-window best-of-N minima.
///
/// Predicted samples are world-frame positions, so each truth future is
/// shifted by its window origin before comparison; normalized and raw truth
/// windows therefore evaluate identically.
pub fn evaluate_dataset(
    predictions: &[PredictionSet],
    truths: &[TrajectoryWindow],
) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::validation("evaluation on an empty dataset"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::validation(format!(
            "{} prediction sets for {} truth windows",
            predictions.len(),
            truths.len()
        )));
    }
    let n_samples = predictions[0].samples.len();
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    for (i, (pred, truth)) in predictions.iter().zip(truths).enumerate() {
        if pred.ped_id != truth.ped_id {
            return Err(Error::validation(format!(
                "window {i}: prediction is for pedestrian {}, truth for {}",
                pred.ped_id, truth.ped_id
            )));
        }
        if pred.samples.len() != n_samples {
            return Err(Error::validation(format!(
                "window {i}: {} samples, expected {n_samples}",
                pred.samples.len()
            )));
        }
        let world_fut = denormalize_positions(&truth.fut, truth.origin);
        let (a, f) = best_of_n(&pred.samples, &world_fut)
            .map_err(|e| Error::validation(format!("window {i}: {e}")))?;
        sum_ade += a;
        sum_fde += f;
    }
    Ok(Metrics {
        ade: sum_ade / predictions.len() as f64,
        fde: sum_fde / predictions.len() as f64,
        n_windows: predictions.len(),
        n_samples,
    })
}

/// Extrapolates the last observed displacement linearly for `t_fut` steps.
pub fn constant_velocity_baseline(obs: &[[f64; 2]], t_fut: usize) -> Result<Vec<[f64; 2]>> {
    if obs.len() < 2 {
        return Err(Error::validation(
            "constant-velocity baseline needs at least 2 observed points",
        ));
    }
    let last = obs[obs.len() - 1];
    let prev = obs[obs.len() - 2];
    let d = [last[0] - prev[0], last[1] - prev[1]];
    Ok((1..=t_fut)
        .map(|t| [last[0] + d[0] * t as f64, last[1] + d[1] * t as f64])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SampleStats;

    fn line(n: usize, start: f64, step: f64) -> Vec<[f64; 2]> {
        (0..n).map(|i| [start + step * i as f64, 0.0]).collect()
    }

    fn offset(points: &[[f64; 2]], dx: f64, dy: f64) -> Vec<[f64; 2]> {
        points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
    }

    #[test]
    fn ade_identity_and_offset() {
        let truth = line(12, 0.0, 0.4);
        assert_eq!(ade(&truth, &truth).unwrap(), 0.0);
        let shifted = offset(&truth, 0.3, 0.4);
        assert!((ade(&shifted, &truth).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ade_is_permutation_symmetric() {
        let truth: Vec<[f64; 2]> = (0..12).map(|i| [i as f64, (i * i) as f64 * 0.1]).collect();
        let pred = offset(&truth, 0.2, -0.1);
        let base = ade(&pred, &truth).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        let pred_p: Vec<[f64; 2]> = perm.iter().map(|i| pred[*i]).collect();
        let truth_p: Vec<[f64; 2]> = perm.iter().map(|i| truth[*i]).collect();
        assert!((ade(&pred_p, &truth_p).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn fde_uses_only_final_points() {
        let truth = line(12, 0.0, 0.4);
        let mut pred = offset(&truth, 1.0, 1.0);
        pred[11] = truth[11];
        assert_eq!(fde(&pred, &truth).unwrap(), 0.0);
        pred[11] = [truth[11][0] + 1.0, truth[11][1] + 1.0];
        assert!((fde(&pred, &truth).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        pred[3] = [99.0, 99.0];
        assert!((fde(&pred, &truth).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metrics_reject_mismatched_lengths() {
        let truth = line(12, 0.0, 0.4);
        let short = line(11, 0.0, 0.4);
        assert!(ade(&short, &truth).is_err());
        assert!(fde(&short, &truth).is_err());
        assert!(ade(&[], &[]).is_err());
    }

    #[test]
    fn best_of_n_picks_exact_match() {
        let truth = line(12, 0.0, 0.4);
        let samples = vec![offset(&truth, 5.0, 5.0), truth.clone()];
        let (a, f) = best_of_n(&samples, &truth).unwrap();
        assert_eq!((a, f), (0.0, 0.0));
        assert!(best_of_n(&[], &truth).is_err());
    }

    #[test]
    fn best_of_n_single_sample_reduces_to_plain_metrics() {
        let truth = line(12, 0.0, 0.4);
        let pred = offset(&truth, 0.3, 0.4);
        let samples = vec![pred.clone()];
        let (a, f) = best_of_n(&samples, &truth).unwrap();
        assert_eq!(a, ade(&pred, &truth).unwrap());
        assert_eq!(f, fde(&pred, &truth).unwrap());
    }

    #[test]
    fn adding_samples_never_increases_metrics() {
        let truth = line(12, 0.0, 0.4);
        let mut samples = vec![offset(&truth, 1.0, 0.0)];
        let (mut prev_a, mut prev_f) = best_of_n(&samples, &truth).unwrap();
        for i in 0..5 {
            samples.push(offset(&truth, 0.8 - 0.2 * i as f64, 0.1));
            let (a, f) = best_of_n(&samples, &truth).unwrap();
            assert!(a <= prev_a && f <= prev_f);
            prev_a = a;
            prev_f = f;
        }
    }

    #[test]
    fn baseline_extrapolates_last_displacement() {
        let obs: Vec<[f64; 2]> = (0..8).map(|i| [0.4 * i as f64, 0.0]).collect();
        let fut = constant_velocity_baseline(&obs, 12).unwrap();
        assert_eq!(fut.len(), 12);
        for (t, p) in fut.iter().enumerate() {
            let want = 0.4 * 7.0 + 0.4 * (t + 1) as f64;
            assert!((p[0] - want).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
        }
        let truth: Vec<[f64; 2]> = (8..20).map(|i| [0.4 * i as f64, 0.0]).collect();
        assert!(ade(&fut, &truth).unwrap() < 1e-12);
    }

    #[test]
    fn baseline_for_stationary_history_repeats_last_position() {
        let obs = vec![[2.0, 3.0]; 8];
        let fut = constant_velocity_baseline(&obs, 12).unwrap();
        assert!(fut.iter().all(|p| *p == [2.0, 3.0]));
        assert!(constant_velocity_baseline(&obs[..1], 12).is_err());
    }

    fn prediction_set(ped_id: u64, samples: Vec<Vec<[f64; 2]>>) -> PredictionSet {
        PredictionSet {
            ped_id,
            samples,
            intermediates: None,
            stats: SampleStats {
                ladder_steps: 1,
                denoiser_evals_per_path: 2,
                denoiser_evals_total: 2,
            },
        }
    }

    #[test]
    fn dataset_metrics_average_per_window_minima() {
        let truth1 = TrajectoryWindow::new(1, [0.0, 0.0], line(8, -2.8, 0.4), line(12, 0.4, 0.4))
            .unwrap();
        let truth2 = TrajectoryWindow::new(2, [0.0, 0.0], line(8, -2.8, 0.4), line(12, 0.4, 0.4))
            .unwrap();
        let preds = vec![
            prediction_set(1, vec![truth1.fut.clone(), offset(&truth1.fut, 9.0, 0.0)]),
            prediction_set(2, vec![offset(&truth2.fut, 0.3, 0.4), offset(&truth2.fut, 6.0, 8.0)]),
        ];
        let m = evaluate_dataset(&preds, &[truth1.clone(), truth2.clone()]).unwrap();
        assert!((m.ade - 0.25).abs() < 1e-15);
        assert!((m.fde - 0.25).abs() < 1e-15);
        assert_eq!(m.n_windows, 2);
        assert_eq!(m.n_samples, 2);

        let swapped = evaluate_dataset(
            &[preds[1].clone(), preds[0].clone()],
            &[truth2, truth1],
        )
        .unwrap();
        assert!((swapped.ade - m.ade).abs() < 1e-12);
    }

    #[test]
    fn dataset_metrics_ignore_truth_normalization() {
        let raw = TrajectoryWindow::new(1, [0.0, 0.0], line(8, 2.0, 0.4), line(12, 5.4, 0.4))
            .unwrap();
        let normalized = crate::trajdata::normalize(&raw);
        assert_ne!(normalized.origin, [0.0, 0.0]);
        let preds = vec![prediction_set(1, vec![offset(&raw.fut, 0.3, 0.4)])];
        let on_raw = evaluate_dataset(&preds, std::slice::from_ref(&raw)).unwrap();
        let on_normalized = evaluate_dataset(&preds, &[normalized]).unwrap();
        assert!((on_raw.ade - 0.5).abs() < 1e-12);
        assert!((on_normalized.ade - on_raw.ade).abs() < 1e-12);
        assert!((on_normalized.fde - on_raw.fde).abs() < 1e-12);
    }

    #[test]
    fn dataset_metrics_validate_pairing() {
        let truth = TrajectoryWindow::new(1, [0.0, 0.0], line(8, -2.8, 0.4), line(12, 0.4, 0.4))
            .unwrap();
        let preds = vec![prediction_set(7, vec![truth.fut.clone()])];
        assert!(evaluate_dataset(&preds, std::slice::from_ref(&truth)).is_err());
        assert!(evaluate_dataset(&[], &[]).is_err());
        let ok = vec![prediction_set(1, vec![truth.fut.clone()])];
        assert!(evaluate_dataset(&ok, std::slice::from_ref(&truth)).is_ok());
    }
}
