//! Export of intermediate sample clouds for density inspection.
//!
//! A prediction run that records intermediates keeps, per sample, the chain
//! state after every reverse hop. This module transposes those states into
//! one record per (window, ladder step): for each future timestep, the
//! positions of all samples at that step of the reverse process. The initial
//! pure-noise state is not exported; a run with `K` steps and stride `s`
//! yields `ceil(K / s)` records per window.

use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::sampler::{step_ladder, PredictionSet};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Sample positions for one window at one ladder step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    /// Position of the window in the prediction file.
    pub window_index: usize,
    pub ped_id: u64,
    /// Diffusion step this cloud sits at; `0` is the final denoised state.
    pub k: usize,
    /// Total diffusion steps of the schedule the run used.
    pub k_steps: usize,
    pub stride: usize,
    pub n_samples: usize,
    /// `positions[t][s]` is sample `s` at future timestep `t`, meters.
    pub positions: Vec<Vec<[f64; 2]>>,
}

/// Builds the per-ladder-step records for every window.
///
/// Fails with a validation error when any prediction set lacks recorded
/// intermediates or when the recorded ladder does not match `k_steps` and
/// `stride`.
pub fn density_records(
    predictions: &[PredictionSet],
    k_steps: usize,
    stride: usize,
) -> Result<Vec<DensityRecord>> {
    let ladder = step_ladder(k_steps, stride)?;
    let mut records = Vec::with_capacity(predictions.len() * (ladder.len() - 1));
    for (window_index, set) in predictions.iter().enumerate() {
        let inter = set.intermediates.as_ref().ok_or_else(|| {
            Error::validation(format!(
                "window {window_index}: no recorded intermediates; \
                 predict with intermediate recording enabled"
            ))
        })?;
        if inter.len() != set.samples.len() {
            return Err(Error::validation(format!(
                "window {window_index}: {} intermediate chains for {} samples",
                inter.len(),
                set.samples.len()
            )));
        }
        for (s, chain) in inter.iter().enumerate() {
            let got: Vec<usize> = chain.iter().map(|state| state.k).collect();
            if got != ladder {
                return Err(Error::validation(format!(
                    "window {window_index}, sample {s}: recorded ladder {got:?} \
                     does not match steps {k_steps} with stride {stride}"
                )));
            }
        }
        let t_fut = inter[0][0].positions.len();
        for (li, &k) in ladder.iter().enumerate().skip(1) {
            let mut positions = vec![Vec::with_capacity(inter.len()); t_fut];
            for chain in inter {
                let state = &chain[li];
                if state.positions.len() != t_fut {
                    return Err(Error::validation(format!(
                        "window {window_index}, step {k}: ragged timestep counts"
                    )));
                }
                for (t, p) in state.positions.iter().enumerate() {
                    positions[t].push(*p);
                }
            }
            records.push(DensityRecord {
                window_index,
                ped_id: set.ped_id,
                k,
                k_steps,
                stride,
                n_samples: inter.len(),
                positions,
            });
        }
    }
    Ok(records)
}

/// Writes the density records as JSONL.
pub fn export_density<W: Write>(
    predictions: &[PredictionSet],
    k_steps: usize,
    stride: usize,
    out: W,
) -> Result<()> {
    let records = density_records(predictions, k_steps, stride)?;
    write_jsonl(&records, out)
}
