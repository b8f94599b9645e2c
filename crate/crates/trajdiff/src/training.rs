//! Training orchestration: batching, per-window step and noise draws,
//! null-condition dropout, adaptive-moment updates, and epoch bookkeeping
//! with exact resume.
//!
//! Determinism contract: epoch `e` derives all of its randomness (shuffle
//! order, step draws, noise draws, dropout coins) from RNG stream `e` of the
//! configured seed. Because no random state is carried across epochs, a run
//! resumed from an epoch-boundary checkpoint replays the remaining epochs
//! bit-identically.

use crate::denoiser::{draw_batch, Denoiser, LossWeights, TrainingWindow};
use crate::error::{Error, Result};
use crate::intention::{encode, label_window, IntentionThresholds, Segment};
use crate::schedule::NoiseSchedule;
use crate::trajdata::{normalize, TrajectoryWindow};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic bytes opening a trainer-state file.
const STATE_MAGIC: &[u8; 4] = b"TDTS";
const STATE_VERSION: u32 = 1;

/// First-moment decay of the optimizer.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay of the optimizer.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator guard of the optimizer.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the intention regression term.
    pub loss_alpha: f64,
    /// Weight of the noise prediction term.
    pub loss_beta: f64,
    /// Probability that a window's noise branch trains against the null
    /// condition.
    pub null_dropout: f64,
    pub seed: u64,
    /// Optional global-norm gradient clip; `None` leaves gradients as
    /// computed.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 100,
            loss_alpha: 1.0,
            loss_beta: 0.5,
            null_dropout: 0.1,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.null_dropout) {
            return Err(Error::validation(format!(
                "null_dropout must lie in [0, 1], got {}",
                self.null_dropout
            )));
        }
        for (name, v) in [("loss_alpha", self.loss_alpha), ("loss_beta", self.loss_beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::validation(format!(
                    "grad_clip must be positive when set, got {clip}"
                )));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss_alpha,
            beta: self.loss_beta,
        }
    }
}

/// Loss summary of one epoch. `total` carries the loss weights;
/// `intent_term` and `diffusion_term` are the raw component means, so
/// `total = loss_alpha * intent_term + loss_beta * diffusion_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub total: f64,
    pub intent_term: f64,
    pub diffusion_term: f64,
}

/// Adaptive-moment optimizer state (decay 0.9 / 0.999, epsilon 1e-8, with
/// bias correction).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One in-place update of `params` from `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Scales `grads` down to the given global L2 norm when they exceed it.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= factor;
        }
    }
}

/// Normalizes raw windows and attaches encoded future-segment intention
/// labels, producing the training set.
pub fn prepare_training_set(
    windows: &[TrajectoryWindow],
    thresholds: &IntentionThresholds,
    frame_step: f64,
) -> Result<Vec<TrainingWindow>> {
    windows
        .iter()
        .map(|w| {
            let n = normalize(w);
            let (label, _) = label_window(&n, Segment::Future, thresholds, frame_step)?;
            Ok(TrainingWindow {
                obs: n.obs,
                fut: n.fut,
                intention: encode(label),
            })
        })
        .collect()
}

/// One optimizer step on one batch: draws per-window randomness from `rng`,
/// evaluates loss and exact gradients, optionally clips, and updates the
/// model in place. With a zero learning rate the parameters are unchanged
/// while the loss is still reported.
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut AdamState,
    batch: &[TrainingWindow],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let draws = draw_batch(
        rng,
        batch.len(),
        model.config().t_fut,
        sched.num_steps(),
        cfg.null_dropout,
    );
    let (breakdown, mut grads) = model
        .loss_and_gradients(batch, &draws, sched, &cfg.weights())
        .map_err(|e| {
            let ks: Vec<usize> = draws.iter().map(|d| d.k).collect();
            Error::validation(format!(
                "training step {} failed with draw steps {:?}: {e}",
                opt.steps() + 1,
                ks
            ))
        })?;
    if let Some(clip) = cfg.grad_clip {
        clip_gradients(&mut grads, clip);
    }
    let mut params = model.params().to_vec();
    opt.step(&mut params, &grads, cfg.learning_rate);
    model.set_params(params)?;
    Ok(LossReport {
        epoch: 0,
        total: breakdown.total,
        intent_term: breakdown.intent,
        diffusion_term: breakdown.diffusion,
    })
}

/// Resumable position of a training run: the optimizer moments plus the
/// next epoch to execute.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub next_epoch: usize,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    next_epoch: usize,
    steps: u64,
    param_count: usize,
}

impl TrainerState {
    pub fn fresh(param_count: usize) -> Self {
        TrainerState {
            next_epoch: 1,
            adam: AdamState::new(param_count),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_vec(&StateHeader {
            next_epoch: self.next_epoch,
            steps: self.adam.t,
            param_count: self.adam.len(),
        })
        .expect("header serializes");
        (|| -> std::io::Result<()> {
            w.write_all(STATE_MAGIC)?;
            w.write_u32::<LittleEndian>(STATE_VERSION)?;
            w.write_u32::<LittleEndian>(header.len() as u32)?;
            w.write_all(&header)?;
            for v in self.adam.m.iter().chain(&self.adam.v) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != STATE_MAGIC {
            return Err(Error::format(path, "not a trainer-state file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != STATE_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported trainer-state version {version}"),
            ));
        }
        let header_len = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let header: StateHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::format(path, format!("bad trainer-state header: {e}")))?;
        let mut m = vec![0.0; header.param_count];
        let mut v = vec![0.0; header.param_count];
        r.read_f64_into::<LittleEndian>(&mut m)
            .map_err(|e| Error::io(path, e))?;
        r.read_f64_into::<LittleEndian>(&mut v)
            .map_err(|e| Error::io(path, e))?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format(path, "trailing bytes after moments")),
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(TrainerState {
            next_epoch: header.next_epoch,
            adam: AdamState {
                m,
                v,
                t: header.steps,
            },
        })
    }
}

/// Runs epochs `state.next_epoch ..= cfg.epochs`, updating the model and
/// state in place. `on_epoch` fires after each epoch with the aggregated
/// report and the current model and state, e.g. to append metrics and write
/// interval checkpoints.
pub fn train_loop(
    model: &mut Denoiser,
    state: &mut TrainerState,
    dataset: &[TrainingWindow],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_epoch: impl FnMut(&LossReport, &Denoiser, &TrainerState) -> Result<()>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    if state.adam.len() != model.param_count() {
        return Err(Error::validation(format!(
            "trainer state tracks {} parameters, model has {}",
            state.adam.len(),
            model.param_count()
        )));
    }

    let mut reports = Vec::new();
    for epoch in state.next_epoch..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        indices.shuffle(&mut rng);

        let mut total = 0.0;
        let mut intent = 0.0;
        let mut diffusion = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<TrainingWindow> =
                chunk.iter().map(|i| dataset[*i].clone()).collect();
            let step = train_step(model, &mut state.adam, &batch, cfg, sched, &mut rng)
                .map_err(|e| Error::validation(format!("epoch {epoch}: {e}")))?;
            let weight = batch.len() as f64 / dataset.len() as f64;
            total += step.total * weight;
            intent += step.intent_term * weight;
            diffusion += step.diffusion_term * weight;
        }

        let report = LossReport {
            epoch,
            total,
            intent_term: intent,
            diffusion_term: diffusion,
        };
        state.next_epoch = epoch + 1;
        on_epoch(&report, model, state)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Writes reports as CSV with the header `epoch,total,intent,diffusion`.
pub fn write_metrics_csv<W: Write>(reports: &[LossReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,total,intent,diffusion")?;
    for r in reports {
        writeln!(
            out,
            "{},{:?},{:?},{:?}",
            r.epoch, r.total, r.intent_term, r.diffusion_term
        )?;
    }
    Ok(())
}

/// Appends one report row to an already-headed CSV writer.
pub fn append_metrics_row<W: Write>(report: &LossReport, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{:?},{:?},{:?}",
        report.epoch, report.total, report.intent_term, report.diffusion_term
    )
}
