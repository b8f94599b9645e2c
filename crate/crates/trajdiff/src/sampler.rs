//! Deterministic strided reverse sampling with classifier-free guidance.
//!
//! Each sample chain starts from seeded standard normal noise and walks a
//! step ladder `K, K - stride, ..., 0`. At every hop the noise model is
//! evaluated twice, once with the full condition and once with the null
//! condition; the two estimates are blended as `w * cond + (1 - w) *
//! uncond` and applied with a deterministic update (no stochastic term), so
//! a chain is a pure function of the parameters, the condition, and its
//! noise seed. Chains get independent RNG streams derived from the
//! configured seed, which makes parallel and serial sampling bitwise
//! identical.

use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::intention::IntentionVector;
use crate::nn::tape::Matrix;
use crate::schedule::NoiseSchedule;
use crate::trajdata::{denormalize_positions, TrajectoryWindow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Guidance blend weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Weight of the conditional branch; `1 - w` goes to the unconditional
    /// branch.
    pub w: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 0.9 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && (0.0..=1.0).contains(&self.w)) {
            return Err(Error::validation(format!(
                "guidance weight must lie in [0, 1], got {}",
                self.w
            )));
        }
        Ok(())
    }
}

/// How many chains to run and how to walk the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Ladder stride; the reverse chain visits `K, K - stride, ..., 0`.
    pub stride: usize,
    /// Independent chains per window.
    pub n_samples: usize,
    /// Base RNG seed; chain `i` of window `j` uses stream
    /// `j * n_samples + i`.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            stride: 20,
            n_samples: 20,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let k = sched.num_steps();
        if self.stride == 0 || self.stride > k {
            return Err(Error::validation(format!(
                "stride must lie in 1..={k}, got {}",
                self.stride
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be positive"));
        }
        Ok(())
    }
}

/// Anything that can stand in for the noise model; lets oracle predictors
/// drive the chain in tests.
pub trait NoisePredictor {
    fn predict(&self, y_k: &Matrix, cond: &Condition, k: usize) -> Result<Matrix>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, y_k: &Matrix, cond: &Condition, k: usize) -> Result<Matrix> {
        self.predict_noise(y_k, cond, k)
    }
}

/// Convex blend of the conditional and unconditional noise estimates:
/// `w * eps_cond + (1 - w) * eps_uncond`.
pub fn guided_noise(eps_cond: &Matrix, eps_uncond: &Matrix, w: f64) -> Matrix {
    assert_eq!(
        eps_cond.dim(),
        eps_uncond.dim(),
        "guided_noise: shape mismatch"
    );
    if w == 1.0 {
        return eps_cond.clone();
    }
    if w == 0.0 {
        return eps_uncond.clone();
    }
    eps_cond * w + eps_uncond * (1.0 - w)
}

/// One deterministic reverse hop from step `k_from` down to `k_to`.
///
/// Reconstructs `x0_hat = (y_k - sqrt(1 - alpha_bar(k_from)) * eps_hat) /
/// sqrt(alpha_bar(k_from))` and re-noises it to the target step:
/// `sqrt(alpha_bar(k_to)) * x0_hat + sqrt(1 - alpha_bar(k_to)) * eps_hat`.
/// Step 0 returns `x0_hat` itself since `alpha_bar(0) = 1`.
pub fn ddim_step(
    y_k: &Matrix,
    eps_hat: &Matrix,
    k_from: usize,
    k_to: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if k_to >= k_from || k_from > sched.num_steps() {
        return Err(Error::validation(format!(
            "ddim_step needs 0 <= k_to < k_from <= {}, got {k_from} -> {k_to}",
            sched.num_steps()
        )));
    }
    if y_k.dim() != eps_hat.dim() {
        return Err(Error::validation(format!(
            "shape mismatch: y {:?} vs eps {:?}",
            y_k.dim(),
            eps_hat.dim()
        )));
    }
    let (mean_from, std_from) = sched.marginal_params(k_from)?;
    let (mean_to, std_to) = sched.marginal_params(k_to)?;
    let x0_hat = (y_k - &(eps_hat * std_from)) / mean_from;
    Ok(x0_hat * mean_to + eps_hat * std_to)
}

/// The visited step sequence `K, K - stride, ..., 0`; the final hop is
/// shortened when `stride` does not divide `K`.
pub fn step_ladder(k_steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > k_steps {
        return Err(Error::validation(format!(
            "stride must lie in 1..={k_steps}, got {stride}"
        )));
    }
    let mut ladder = Vec::with_capacity(k_steps / stride + 2);
    let mut k = k_steps;
    loop {
        ladder.push(k);
        if k == 0 {
            break;
        }
        k = k.saturating_sub(stride);
    }
    Ok(ladder)
}

/// One intermediate chain state, recorded for density export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateState {
    /// Diffusion step this state sits at; the first record is `K`, the last
    /// is `0`.
    pub k: usize,
    pub positions: Vec<[f64; 2]>,
}

/// Cost accounting for one sampled window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Reverse hops per chain.
    pub ladder_steps: usize,
    /// Noise-model calls per chain (two per hop: conditional plus null).
    pub denoiser_evals_per_path: usize,
    /// Noise-model calls summed over all chains of the window.
    pub denoiser_evals_total: usize,
}

/// All candidate futures for one window, in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub ped_id: u64,
    /// `n_samples` futures, each `t_fut` positions, meters.
    pub samples: Vec<Vec<[f64; 2]>>,
    /// Per-sample ladder states (same frame as `samples`), present when
    /// recording was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediates: Option<Vec<Vec<IntermediateState>>>,
    pub stats: SampleStats,
}

fn matrix_to_positions(m: &Matrix) -> Vec<[f64; 2]> {
    m.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Runs `n_samples` guided reverse chains in the model's normalized frame.
///
/// Chain `i` draws its starting noise from RNG stream `stream_offset + i`
/// of `scfg.seed`. Returns per-chain terminal states, optional recorded
/// ladder states, and cost counters.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn sample_chains<P: NoisePredictor>(
    predictor: &P,
    cond: &Condition,
    t_fut: usize,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream_offset: u64,
    record_intermediate: bool,
) -> Result<(Vec<Matrix>, Option<Vec<Vec<IntermediateState>>>, SampleStats)> {
    gcfg.validate()?;
    scfg.validate(sched)?;
    let ladder = step_ladder(sched.num_steps(), scfg.stride)?;
    let hops = ladder.len() - 1;

    let mut samples = Vec::with_capacity(scfg.n_samples);
    let mut recorded = record_intermediate.then(Vec::new);
    for i in 0..scfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
        rng.set_stream(stream_offset + i as u64);
        let mut y = Matrix::from_shape_fn((t_fut, 2), |_| StandardNormal.sample(&mut rng));
        let mut states = record_intermediate.then(|| {
            vec![IntermediateState {
                k: sched.num_steps(),
                positions: matrix_to_positions(&y),
            }]
        });
        for hop in ladder.windows(2) {
            let (k_from, k_to) = (hop[0], hop[1]);
            let eps_cond = predictor.predict(&y, cond, k_from)?;
            let eps_uncond = predictor.predict(&y, &Condition::Null, k_from)?;
            let eps = guided_noise(&eps_cond, &eps_uncond, gcfg.w);
            y = ddim_step(&y, &eps, k_from, k_to, sched)?;
            if let Some(states) = states.as_mut() {
                states.push(IntermediateState {
                    k: k_to,
                    positions: matrix_to_positions(&y),
                });
            }
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sample chain {i} diverged to {bad}"
            )));
        }
        if let (Some(recorded), Some(states)) = (recorded.as_mut(), states) {
            recorded.push(states);
        }
        samples.push(y);
    }
    let stats = SampleStats {
        ladder_steps: hops,
        denoiser_evals_per_path: 2 * hops,
        denoiser_evals_total: 2 * hops * scfg.n_samples,
    };
    Ok((samples, recorded, stats))
}

fn scale_positions(positions: &mut [[f64; 2]], factor: f64) {
    for p in positions {
        p[0] *= factor;
        p[1] *= factor;
    }
}

/// Samples one window with the full model: encodes its history, runs the
/// guided chains, and maps results back to world coordinates through the
/// model's data scale and the window origin.
#[allow(clippy::too_many_arguments)]
pub fn sample_window(
    model: &Denoiser,
    window: &TrajectoryWindow,
    intention: IntentionVector,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream_offset: u64,
    record_intermediate: bool,
) -> Result<PredictionSet> {
    let history_features = model.encode_history(&window.obs)?;
    let cond = Condition::Full {
        history_features,
        intention,
    };
    let (raw, recorded, stats) = sample_chains(
        model,
        &cond,
        model.config().t_fut,
        gcfg,
        scfg,
        sched,
        stream_offset,
        record_intermediate,
    )?;

    let scale = model.config().data_scale;
    let samples = raw
        .iter()
        .map(|m| {
            let mut positions = matrix_to_positions(m);
            scale_positions(&mut positions, scale);
            denormalize_positions(&positions, window.origin)
        })
        .collect();
    let intermediates = recorded.map(|chains| {
        chains
            .into_iter()
            .map(|states| {
                states
                    .into_iter()
                    .map(|mut s| {
                        scale_positions(&mut s.positions, scale);
                        s.positions = denormalize_positions(&s.positions, window.origin);
                        s
                    })
                    .collect()
            })
            .collect()
    });
    Ok(PredictionSet {
        ped_id: window.ped_id,
        samples,
        intermediates,
        stats,
    })
}

/// Conditioning source for batch prediction.
#[derive(Debug, Clone, Copy)]
pub enum IntentionSource {
    /// Estimate each window's intention from its own history.
    Estimated,
    /// Condition every window on one fixed intention vector.
    Fixed(IntentionVector),
}

/// Samples every window, serially or in parallel; results are bitwise
/// independent of the mode because window `j` always uses RNG streams
/// `j * n_samples ..`.
#[allow(clippy::too_many_arguments)]
pub fn predict_windows(
    model: &Denoiser,
    windows: &[TrajectoryWindow],
    intention_source: IntentionSource,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    sched: &NoiseSchedule,
    record_intermediate: bool,
    parallel: bool,
) -> Result<Vec<PredictionSet>> {
    let one = |(j, window): (usize, &TrajectoryWindow)| -> Result<PredictionSet> {
        let intention = match intention_source {
            IntentionSource::Fixed(iv) => iv,
            IntentionSource::Estimated => {
                let features = model.encode_history(&window.obs)?;
                model.estimate_intention(&features)?
            }
        };
        sample_window(
            model,
            window,
            intention,
            gcfg,
            scfg,
            sched,
            j as u64 * scfg.n_samples as u64,
            record_intermediate,
        )
    };
    if parallel {
        windows.par_iter().enumerate().map(one).collect()
    } else {
        windows.iter().enumerate().map(one).collect()
    }
}
