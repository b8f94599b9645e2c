//! The learnable core: a history encoder, an intention estimator head, and
//! a conditional noise-prediction network, all with exact gradients.
//!
//! Three transformer stacks share one flat parameter vector:
//!
//! * **Encoder**: per-step (position, displacement) inputs are lifted to the
//!   encoder width, given sinusoidal positions, and run through a stack to
//!   produce one feature row per observed step.
//! * **Intention head**: projects encoder features to its own width, runs a
//!   stack, mean-pools, and regresses the two intention codes as
//!   unconstrained reals.
//! * **Noise network**: the noisy future is lifted to tokens with sinusoidal
//!   positions; conditioning enters both as prefix tokens (pooled history
//!   lift, intention lift, step encoding lift) and as additive biases on
//!   every future token (step plus intention), so each token sees the noise
//!   level and the intention directly rather than only through attention.
//!   The unconditional path replaces the history and intention with one
//!   learned null token, in the prefix and in the per-token bias, while
//!   keeping the step token, so the network always knows the noise level.
//!
//! Parameters are initialized with uniform fan-in scaling from a fixed seed,
//! and checkpoints round-trip bit-exactly through a self-describing binary
//! container.

use crate::error::{Error, Result};
use crate::intention::IntentionVector;
use crate::nn::params::{flatten_gradients, Init, Layout, LayoutBuilder, Loader, ParamVisitor};
use crate::nn::tape::{Matrix, Tape, Var};
use crate::nn::transformer::{
    linear, sinusoidal_encoding, step_encoding, transformer_stack, wire_linear, wire_stack,
    LinearVars, StackVars,
};
use crate::schedule::NoiseSchedule;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic bytes opening a checkpoint file.
const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
/// Bumped whenever the container layout changes.
const CHECKPOINT_VERSION: u32 = 1;

/// Width, depth, and head count of one transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl BlockSpec {
    fn validate(&self, name: &str) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::validation(format!(
                "{name}: width, layers, and heads must all be positive"
            )));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "{name}: width must be even for sinusoidal encodings, got {}",
                self.width
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "{name}: width {} not divisible into {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Architecture hyperparameters; the parameter count is a pure function of
/// these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Observed steps per window.
    pub t_obs: usize,
    /// Future steps per window.
    pub t_fut: usize,
    /// Meters per model unit: future positions are divided by this during
    /// training and samples multiplied by it, so the clean data the
    /// diffusion sees is roughly unit scale. `1.0` disables rescaling.
    pub data_scale: f64,
    pub encoder: BlockSpec,
    pub intention: BlockSpec,
    pub noise: BlockSpec,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            t_obs: crate::trajdata::DEFAULT_T_OBS,
            t_fut: crate::trajdata::DEFAULT_T_FUT,
            data_scale: 1.0,
            encoder: BlockSpec {
                width: 128,
                layers: 2,
                heads: 4,
            },
            intention: BlockSpec {
                width: 256,
                layers: 4,
                heads: 4,
            },
            noise: BlockSpec {
                width: 512,
                layers: 4,
                heads: 8,
            },
        }
    }
}

impl DenoiserConfig {
    /// Smallest useful architecture; used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        DenoiserConfig {
            t_obs: crate::trajdata::DEFAULT_T_OBS,
            t_fut: crate::trajdata::DEFAULT_T_FUT,
            data_scale: 1.0,
            encoder: BlockSpec {
                width: 8,
                layers: 1,
                heads: 2,
            },
            intention: BlockSpec {
                width: 8,
                layers: 1,
                heads: 2,
            },
            noise: BlockSpec {
                width: 8,
                layers: 1,
                heads: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 {
            return Err(Error::validation(
                "t_obs must be at least 2 to carry displacement inputs",
            ));
        }
        if self.t_fut == 0 {
            return Err(Error::validation("t_fut must be positive"));
        }
        if !(self.data_scale.is_finite() && self.data_scale > 0.0) {
            return Err(Error::validation(format!(
                "data_scale must be positive and finite, got {}",
                self.data_scale
            )));
        }
        self.encoder.validate("encoder")?;
        self.intention.validate("intention")?;
        self.noise.validate("noise")?;
        Ok(())
    }
}

/// Conditioning for one noise prediction: either the full (history,
/// intention) pair or the learned null embedding.
#[derive(Debug, Clone)]
pub enum Condition {
    Full {
        /// Encoder output, `t_obs x encoder.width`.
        history_features: Matrix,
        intention: IntentionVector,
    },
    Null,
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

struct DenoiserVars<H> {
    enc_in: LinearVars<H>,
    enc_stack: StackVars<H>,
    int_in: LinearVars<H>,
    int_stack: StackVars<H>,
    int_out: LinearVars<H>,
    noise_in: LinearVars<H>,
    hist_lift: LinearVars<H>,
    intent_lift: LinearVars<H>,
    step_lift: LinearVars<H>,
    null_token: H,
    noise_stack: StackVars<H>,
    noise_out: LinearVars<H>,
}

fn wire_denoiser<V: ParamVisitor>(v: &mut V, cfg: &DenoiserConfig) -> DenoiserVars<V::Handle> {
    let d_e = cfg.encoder.width;
    let d_i = cfg.intention.width;
    let d_n = cfg.noise.width;
    DenoiserVars {
        enc_in: wire_linear(v, "enc.in", 4, d_e),
        enc_stack: wire_stack(v, "enc.stack", d_e, cfg.encoder.layers),
        int_in: wire_linear(v, "intent.in", d_e, d_i),
        int_stack: wire_stack(v, "intent.stack", d_i, cfg.intention.layers),
        int_out: wire_linear(v, "intent.out", d_i, 2),
        noise_in: wire_linear(v, "noise.in", 2, d_n),
        hist_lift: wire_linear(v, "noise.hist_lift", d_e, d_n),
        intent_lift: wire_linear(v, "noise.intent_lift", 2, d_n),
        step_lift: wire_linear(v, "noise.step_lift", d_n, d_n),
        null_token: v.param("noise.null_token", 1, d_n, Init::SmallUniform),
        noise_stack: wire_stack(v, "noise.stack", d_n, cfg.noise.layers),
        noise_out: wire_linear(v, "noise.out", d_n, 2),
    }
}

fn positions_to_matrix(points: &[[f64; 2]]) -> Matrix {
    Matrix::from_shape_fn((points.len(), 2), |(i, j)| points[i][j])
}

/// Per-step encoder input: position plus displacement from the previous
/// step (zero for the first).
fn history_input(obs: &[[f64; 2]]) -> Matrix {
    let mut m = Matrix::zeros((obs.len(), 4));
    for (i, p) in obs.iter().enumerate() {
        m[[i, 0]] = p[0];
        m[[i, 1]] = p[1];
        if i > 0 {
            m[[i, 2]] = p[0] - obs[i - 1][0];
            m[[i, 3]] = p[1] - obs[i - 1][1];
        }
    }
    m
}

fn forward_encoder(
    tape: &mut Tape,
    vars: &DenoiserVars<Var>,
    cfg: &DenoiserConfig,
    obs_input: Var,
) -> Var {
    let lifted = linear(tape, obs_input, &vars.enc_in);
    let pe = tape.leaf(sinusoidal_encoding(cfg.t_obs, cfg.encoder.width));
    let tokens = tape.add(lifted, pe);
    transformer_stack(tape, tokens, &vars.enc_stack, cfg.encoder.heads)
}

fn forward_intention(
    tape: &mut Tape,
    vars: &DenoiserVars<Var>,
    cfg: &DenoiserConfig,
    f_obs: Var,
) -> Var {
    let projected = linear(tape, f_obs, &vars.int_in);
    let out = transformer_stack(tape, projected, &vars.int_stack, cfg.intention.heads);
    let pooled = tape.mean_rows(out);
    linear(tape, pooled, &vars.int_out)
}

enum PrefixVars {
    Full { f_obs: Var, intention: Var },
    Null,
}

fn forward_noise(
    tape: &mut Tape,
    vars: &DenoiserVars<Var>,
    cfg: &DenoiserConfig,
    y_k: Var,
    prefix: PrefixVars,
    k: usize,
) -> Var {
    let d_n = cfg.noise.width;
    let lifted = linear(tape, y_k, &vars.noise_in);
    let pe = tape.leaf(sinusoidal_encoding(cfg.t_fut, d_n));
    let fut_tokens = tape.add(lifted, pe);

    let step_row = tape.leaf(step_encoding(k, d_n));
    let step_tok = linear(tape, step_row, &vars.step_lift);

    let all = match prefix {
        PrefixVars::Full { f_obs, intention } => {
            let pooled = tape.mean_rows(f_obs);
            let hist_tok = linear(tape, pooled, &vars.hist_lift);
            let intent_tok = linear(tape, intention, &vars.intent_lift);
            let fut_cond = tape.add_row(fut_tokens, step_tok);
            let fut_cond = tape.add_row(fut_cond, intent_tok);
            tape.concat_rows(&[hist_tok, intent_tok, step_tok, fut_cond])
        }
        PrefixVars::Null => {
            let fut_cond = tape.add_row(fut_tokens, step_tok);
            let fut_cond = tape.add_row(fut_cond, vars.null_token);
            tape.concat_rows(&[vars.null_token, step_tok, fut_cond])
        }
    };
    let out = transformer_stack(tape, all, &vars.noise_stack, cfg.noise.heads);
    let n_prefix = tape.value(out).dim().0 - cfg.t_fut;
    let fut_out = tape.slice_rows(out, n_prefix, cfg.t_fut);
    linear(tape, fut_out, &vars.noise_out)
}

/// Loss weights for the joint objective
/// `total = alpha * intent + beta * diffusion`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
        }
    }
}

/// Random choices for one window of a training batch, fixed before the loss
/// is evaluated so the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    /// Diffusion step, in `1..=k_steps`.
    pub k: usize,
    /// Target noise, `t_fut x 2`.
    pub eps: Matrix,
    /// When set, the noise branch runs with the null condition.
    pub null_condition: bool,
}

/// Samples the per-window randomness for one batch: a uniform step, a
/// standard normal noise target, and a null-condition coin flip, in that
/// order per window.
pub fn draw_batch<R: Rng>(
    rng: &mut R,
    batch_len: usize,
    t_fut: usize,
    k_steps: usize,
    null_dropout: f64,
) -> Vec<DiffusionDraw> {
    (0..batch_len)
        .map(|_| {
            let k = rng.random_range(1..=k_steps);
            let eps = Matrix::from_shape_fn((t_fut, 2), |_| rng.sample(StandardNormal));
            let null_condition = rng.random::<f64>() < null_dropout;
            DiffusionDraw {
                k,
                eps,
                null_condition,
            }
        })
        .collect()
}

/// One training example: a normalized window plus its encoded ground-truth
/// intention.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    /// Observed positions, `t_obs` long, last at the origin.
    pub obs: Vec<[f64; 2]>,
    /// Future positions, `t_fut` long, same frame.
    pub fut: Vec<[f64; 2]>,
    /// Encoded future-segment intention used as the regression target.
    pub intention: IntentionVector,
}

/// Component values of one loss evaluation. `total` carries the weights;
/// `intent` and `diffusion` are the raw component means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub intent: f64,
    pub diffusion: f64,
    /// Windows whose noise branch ran with the full condition.
    pub n_conditioned: usize,
    /// Windows whose noise branch ran with the null condition.
    pub n_null: usize,
}

/// The model: architecture plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layout: Layout,
    params: Vec<f64>,
}

fn layout_for(cfg: &DenoiserConfig) -> Layout {
    let mut builder = LayoutBuilder::new();
    wire_denoiser(&mut builder, cfg);
    builder.finish()
}

impl Denoiser {
    /// Fresh model with seeded initialization.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = layout_for(&cfg);
        let params = layout.init_params(seed);
        Ok(Denoiser {
            cfg,
            layout,
            params,
        })
    }

    /// Model from an existing flat parameter vector.
    pub fn from_params(cfg: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = layout_for(&cfg);
        if params.len() != layout.total_len() {
            return Err(Error::validation(format!(
                "parameter vector has {} values, architecture needs {}",
                params.len(),
                layout.total_len()
            )));
        }
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter vector contains non-finite value {bad}"
            )));
        }
        Ok(Denoiser {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Replaces the parameter vector, e.g. after an optimizer step.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total_len() {
            return Err(Error::validation(format!(
                "parameter vector has {} values, architecture needs {}",
                params.len(),
                self.layout.total_len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn load_vars(&self, tape: &mut Tape) -> (DenoiserVars<Var>, Vec<Var>) {
        let mut loader = Loader::new(&self.layout, &self.params, tape);
        let vars = wire_denoiser(&mut loader, &self.cfg);
        let leaves = loader.finish();
        (vars, leaves)
    }

    fn check_obs(&self, obs: &[[f64; 2]]) -> Result<()> {
        if obs.len() != self.cfg.t_obs {
            return Err(Error::validation(format!(
                "history has {} steps, model expects {}",
                obs.len(),
                self.cfg.t_obs
            )));
        }
        if obs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("history contains non-finite values".into()));
        }
        let last = obs[obs.len() - 1];
        if last != [0.0, 0.0] {
            return Err(Error::validation(
                "history must be normalized with its last point at the origin",
            ));
        }
        Ok(())
    }

    /// Feature sequence for one normalized history, `t_obs x encoder.width`.
    pub fn encode_history(&self, obs: &[[f64; 2]]) -> Result<Matrix> {
        self.check_obs(obs)?;
        let mut tape = Tape::new();
        let (vars, _) = self.load_vars(&mut tape);
        let input = tape.leaf(history_input(obs));
        let f_obs = forward_encoder(&mut tape, &vars, &self.cfg, input);
        Ok(tape.value(f_obs).clone())
    }

    /// Estimated intention codes for encoded history features.
    pub fn estimate_intention(&self, history_features: &Matrix) -> Result<IntentionVector> {
        self.check_history_features(history_features)?;
        let mut tape = Tape::new();
        let (vars, _) = self.load_vars(&mut tape);
        let f_obs = tape.leaf(history_features.clone());
        let out = forward_intention(&mut tape, &vars, &self.cfg, f_obs);
        let v = tape.value(out);
        Ok(IntentionVector::new(v[[0, 0]], v[[0, 1]]))
    }

    fn check_history_features(&self, f: &Matrix) -> Result<()> {
        let want = (self.cfg.t_obs, self.cfg.encoder.width);
        if f.dim() != want {
            return Err(Error::validation(format!(
                "history features are {:?}, model expects {:?}",
                f.dim(),
                want
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "history features contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Noise estimate for a noisy future at diffusion step `k`.
    pub fn predict_noise(&self, y_k: &Matrix, cond: &Condition, k: usize) -> Result<Matrix> {
        if y_k.dim() != (self.cfg.t_fut, 2) {
            return Err(Error::validation(format!(
                "noisy future is {:?}, model expects {:?}",
                y_k.dim(),
                (self.cfg.t_fut, 2)
            )));
        }
        if y_k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "noisy future contains non-finite values".into(),
            ));
        }
        if k == 0 {
            return Err(Error::validation("diffusion step must be at least 1"));
        }
        let mut tape = Tape::new();
        let (vars, _) = self.load_vars(&mut tape);
        let y = tape.leaf(y_k.clone());
        let prefix = match cond {
            Condition::Full {
                history_features,
                intention,
            } => {
                self.check_history_features(history_features)?;
                if !intention.lateral_code.is_finite() || !intention.longitudinal_code.is_finite() {
                    return Err(Error::NonFinite(
                        "intention vector contains non-finite values".into(),
                    ));
                }
                let f_obs = tape.leaf(history_features.clone());
                let iv = tape.leaf(Matrix::from_shape_vec(
                    (1, 2),
                    vec![intention.lateral_code, intention.longitudinal_code],
                )
                .expect("2 values fill 1x2"));
                PrefixVars::Full {
                    f_obs,
                    intention: iv,
                }
            }
            Condition::Null => PrefixVars::Null,
        };
        let out = forward_noise(&mut tape, &vars, &self.cfg, y, prefix, k);
        Ok(tape.value(out).clone())
    }

    /// Joint loss and exact gradients for one batch under fixed draws.
    ///
    /// The intention term always trains on the full batch; the per-window
    /// draw only decides whether the noise branch sees the full or the null
    /// condition.
    pub fn loss_and_gradients(
        &self,
        batch: &[TrainingWindow],
        draws: &[DiffusionDraw],
        sched: &NoiseSchedule,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::validation("loss evaluation on an empty batch"));
        }
        if batch.len() != draws.len() {
            return Err(Error::validation(format!(
                "batch has {} windows but {} draws",
                batch.len(),
                draws.len()
            )));
        }
        for (i, (tw, draw)) in batch.iter().zip(draws).enumerate() {
            if tw.fut.len() != self.cfg.t_fut {
                return Err(Error::validation(format!(
                    "window {i}: future has {} steps, model expects {}",
                    tw.fut.len(),
                    self.cfg.t_fut
                )));
            }
            if draw.k == 0 || draw.k > sched.num_steps() {
                return Err(Error::validation(format!(
                    "window {i}: draw step {} outside schedule 1..={}",
                    draw.k,
                    sched.num_steps()
                )));
            }
            if draw.eps.dim() != (self.cfg.t_fut, 2) {
                return Err(Error::validation(format!(
                    "window {i}: noise draw is {:?}, expected {:?}",
                    draw.eps.dim(),
                    (self.cfg.t_fut, 2)
                )));
            }
            self.check_obs(&tw.obs)?;
        }

        let mut tape = Tape::new();
        let (vars, leaves) = self.load_vars(&mut tape);

        let mut intent_preds = Vec::with_capacity(batch.len());
        let mut diff_terms = Vec::with_capacity(batch.len());
        let mut n_null = 0;
        for (tw, draw) in batch.iter().zip(draws) {
            let obs_in = tape.leaf(history_input(&tw.obs));
            let f_obs = forward_encoder(&mut tape, &vars, &self.cfg, obs_in);
            intent_preds.push(forward_intention(&mut tape, &vars, &self.cfg, f_obs));

            let y0 = positions_to_matrix(&tw.fut) / self.cfg.data_scale;
            let y_k = sched.forward_sample(&y0, draw.k, &draw.eps)?;
            let y_var = tape.leaf(y_k);
            let prefix = if draw.null_condition {
                n_null += 1;
                PrefixVars::Null
            } else {
                let iv = tape.leaf(
                    Matrix::from_shape_vec(
                        (1, 2),
                        vec![tw.intention.lateral_code, tw.intention.longitudinal_code],
                    )
                    .expect("2 values fill 1x2"),
                )
                ;
                PrefixVars::Full {
                    f_obs,
                    intention: iv,
                }
            };
            let eps_hat = forward_noise(&mut tape, &vars, &self.cfg, y_var, prefix, draw.k);
            let eps_target = tape.leaf(draw.eps.clone());
            diff_terms.push(tape.mse(eps_hat, eps_target));
        }

        let preds = tape.concat_rows(&intent_preds);
        let targets = tape.leaf(Matrix::from_shape_fn((batch.len(), 2), |(i, j)| {
            let iv = &batch[i].intention;
            if j == 0 {
                iv.lateral_code
            } else {
                iv.longitudinal_code
            }
        }));
        let intent_loss = tape.mse(preds, targets);
        let diff_stack = tape.concat_rows(&diff_terms);
        let diff_loss = tape.mean_all(diff_stack);
        let weighted_intent = tape.scale(intent_loss, weights.alpha);
        let weighted_diff = tape.scale(diff_loss, weights.beta);
        let total = tape.add(weighted_intent, weighted_diff);

        let breakdown = LossBreakdown {
            total: tape.scalar(total),
            intent: tape.scalar(intent_loss),
            diffusion: tape.scalar(diff_loss),
            n_conditioned: batch.len() - n_null,
            n_null,
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged: total {} (intent {}, diffusion {})",
                breakdown.total, breakdown.intent, breakdown.diffusion
            )));
        }
        let grads = tape.backward(total);
        let flat = flatten_gradients(&self.layout, &leaves, &grads);
        Ok((breakdown, flat))
    }

    /// Writes the model to a self-describing binary checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.cfg,
            param_count: self.params.len(),
        })
        .expect("header serializes");
        (|| -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
            w.write_u32::<LittleEndian>(header.len() as u32)?;
            w.write_all(&header)?;
            for v in &self.params {
                w.write_f64::<LittleEndian>(*v)?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Denoiser::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
        let mut params = vec![0.0; header.param_count];
        r.read_f64_into::<LittleEndian>(&mut params)
            .map_err(|e| Error::io(path, e))?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format(path, "trailing bytes after parameters")),
            Err(e) => return Err(Error::io(path, e)),
        }
        Denoiser::from_params(header.config, params)
            .map_err(|e| Error::format(path, format!("checkpoint inconsistent: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_window() -> Vec<[f64; 2]> {
        vec![[0.0, 0.0]; 8]
    }

    fn walk_window(seed: u64) -> TrainingWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs: Vec<[f64; 2]> = Vec::new();
        let mut p = [0.0, 0.0];
        for _ in 0..8 {
            p = [
                p[0] + rng.random::<f64>() * 0.4,
                p[1] + rng.random::<f64>() * 0.2 - 0.1,
            ];
            obs.push(p);
        }
        let last = obs[7];
        for q in obs.iter_mut() {
            *q = [q[0] - last[0], q[1] - last[1]];
        }
        let mut fut = Vec::new();
        let mut q = [0.0, 0.0];
        for _ in 0..12 {
            q = [
                q[0] + rng.random::<f64>() * 0.4,
                q[1] + rng.random::<f64>() * 0.2 - 0.1,
            ];
            fut.push(q);
        }
        TrainingWindow {
            obs,
            fut,
            intention: IntentionVector::new(1.0, 0.0),
        }
    }

    fn tiny_model(seed: u64) -> Denoiser {
        Denoiser::init(DenoiserConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn param_count_is_config_function() {
        let a = tiny_model(1);
        let b = tiny_model(2);
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params(), b.params());
        let big = Denoiser::init(DenoiserConfig::default(), 1).unwrap();
        assert!(big.param_count() > a.param_count());
    }

    #[test]
    fn encode_history_is_deterministic_and_shaped() {
        let model = tiny_model(3);
        let w = walk_window(0);
        let f1 = model.encode_history(&w.obs).unwrap();
        let f2 = model.encode_history(&w.obs).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (8, 8));
        let zeros = model.encode_history(&zero_window()).unwrap();
        assert!(zeros.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_history_rejects_bad_input() {
        let model = tiny_model(3);
        assert!(model.encode_history(&[[0.0, 0.0]; 4]).is_err());
        let mut w = zero_window();
        w[0][0] = f64::NAN;
        assert!(model.encode_history(&w).is_err());
        let shifted = vec![[1.0, 1.0]; 8];
        assert!(model.encode_history(&shifted).is_err());
    }

    #[test]
    fn estimate_intention_has_two_components() {
        let model = tiny_model(4);
        let f = model.encode_history(&walk_window(1).obs).unwrap();
        let a = model.estimate_intention(&f).unwrap();
        let b = model.estimate_intention(&f).unwrap();
        assert_eq!(a, b);
        assert!(a.lateral_code.is_finite() && a.longitudinal_code.is_finite());
    }

    #[test]
    fn predict_noise_shape_and_step_sensitivity() {
        let model = tiny_model(5);
        let w = walk_window(2);
        let f = model.encode_history(&w.obs).unwrap();
        let cond = Condition::Full {
            history_features: f,
            intention: IntentionVector::new(1.0, 0.0),
        };
        let y_k = Matrix::ones((12, 2));
        let e1 = model.predict_noise(&y_k, &cond, 1).unwrap();
        assert_eq!(e1.dim(), (12, 2));
        assert_eq!(e1, model.predict_noise(&y_k, &cond, 1).unwrap());
        let e2 = model.predict_noise(&y_k, &cond, 2).unwrap();
        assert_ne!(e1, e2, "step embedding must reach the output");
        assert!(model.predict_noise(&y_k, &cond, 0).is_err());
    }

    #[test]
    fn null_condition_ignores_history_and_intention() {
        let model = tiny_model(6);
        let y_k = Matrix::ones((12, 2));
        let null_out = model.predict_noise(&y_k, &Condition::Null, 3).unwrap();
        let f = model.encode_history(&walk_window(3).obs).unwrap();
        let cond_out = model
            .predict_noise(
                &y_k,
                &Condition::Full {
                    history_features: f,
                    intention: IntentionVector::new(-1.0, 1.0),
                },
                3,
            )
            .unwrap();
        assert_ne!(null_out, cond_out);
        assert_eq!(null_out, model.predict_noise(&y_k, &Condition::Null, 3).unwrap());
    }

    #[test]
    fn draw_batch_is_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = draw_batch(&mut rng, 64, 12, 10, 0.5);
        assert_eq!(draws.len(), 64);
        assert!(draws.iter().all(|d| (1..=10).contains(&d.k)));
        assert!(draws.iter().any(|d| d.null_condition));
        assert!(draws.iter().any(|d| !d.null_condition));
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let again = draw_batch(&mut rng2, 64, 12, 10, 0.5);
        assert!(draws
            .iter()
            .zip(&again)
            .all(|(a, b)| a.k == b.k && a.eps == b.eps && a.null_condition == b.null_condition));

        let mut rng3 = ChaCha8Rng::seed_from_u64(9);
        assert!(draw_batch(&mut rng3, 32, 12, 10, 0.0)
            .iter()
            .all(|d| !d.null_condition));
        let mut rng4 = ChaCha8Rng::seed_from_u64(9);
        assert!(draw_batch(&mut rng4, 32, 12, 10, 1.0)
            .iter()
            .all(|d| d.null_condition));
    }

    fn loss_setup(null_second: bool) -> (Denoiser, Vec<TrainingWindow>, Vec<DiffusionDraw>, NoiseSchedule) {
        let model = tiny_model(7);
        let batch = vec![walk_window(10), walk_window(11)];
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut draws = draw_batch(&mut rng, 2, 12, 10, 0.0);
        draws[1].null_condition = null_second;
        (model, batch, draws, sched)
    }

    #[test]
    fn loss_reports_path_counters() {
        let (model, batch, draws, sched) = loss_setup(true);
        let (report, _) = model
            .loss_and_gradients(&batch, &draws, &sched, &LossWeights::default())
            .unwrap();
        assert_eq!(report.n_conditioned, 1);
        assert_eq!(report.n_null, 1);
        assert!(report.total.is_finite());
        let w = LossWeights::default();
        let recombined = w.alpha * report.intent + w.beta * report.diffusion;
        assert!((report.total - recombined).abs() < 1e-15);
    }

    #[test]
    fn loss_scales_linearly_in_weights() {
        let (model, batch, draws, sched) = loss_setup(true);
        let base = LossWeights {
            alpha: 1.0,
            beta: 0.5,
        };
        let tripled = LossWeights {
            alpha: 3.0,
            beta: 1.5,
        };
        let (a, _) = model
            .loss_and_gradients(&batch, &draws, &sched, &base)
            .unwrap();
        let (b, _) = model
            .loss_and_gradients(&batch, &draws, &sched, &tripled)
            .unwrap();
        assert!((b.total - 3.0 * a.total).abs() < 1e-12 * a.total.abs().max(1.0));
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let (model, batch, mut draws, sched) = loss_setup(false);
        assert!(model
            .loss_and_gradients(&[], &[], &sched, &LossWeights::default())
            .is_err());
        assert!(model
            .loss_and_gradients(&batch, &draws[..1], &sched, &LossWeights::default())
            .is_err());
        draws[0].k = 11;
        assert!(model
            .loss_and_gradients(&batch, &draws, &sched, &LossWeights::default())
            .is_err());
    }

    #[test]
    fn beta_zero_leaves_noise_only_params_without_gradient() {
        let (model, batch, draws, sched) = loss_setup(true);
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.0,
        };
        let (_, grads) = model
            .loss_and_gradients(&batch, &draws, &sched, &weights)
            .unwrap();
        for entry in model.layout().entries() {
            let slice = &grads[entry.offset..entry.offset + entry.len()];
            if entry.name.starts_with("noise.") {
                assert!(
                    slice.iter().all(|v| *v == 0.0),
                    "{} has nonzero gradient with beta = 0",
                    entry.name
                );
            }
            if entry.name.starts_with("intent.out") {
                assert!(slice.iter().any(|v| *v != 0.0));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [31u64, 32, 33] {
            let model = Denoiser::init(DenoiserConfig::tiny(), seed).unwrap();
            let batch = vec![walk_window(40 + seed), walk_window(50 + seed)];
            let sched = NoiseSchedule::default_linear(10).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draws = draw_batch(&mut rng, 2, 12, 10, 0.0);
            draws[1].null_condition = true;
            let weights = LossWeights::default();

            let (_, analytic) = model
                .loss_and_gradients(&batch, &draws, &sched, &weights)
                .unwrap();

            let mut params = model.params().to_vec();
            let fd_eps = 1e-5;
            let count = params.len();
            let mut checked = 0;
            for i in (0..count).step_by(7) {
                let orig = params[i];
                params[i] = orig + fd_eps;
                let plus = Denoiser::from_params(DenoiserConfig::tiny(), params.clone()).unwrap();
                let (lp, _) = plus
                    .loss_and_gradients(&batch, &draws, &sched, &weights)
                    .unwrap();
                params[i] = orig - fd_eps;
                let minus = Denoiser::from_params(DenoiserConfig::tiny(), params.clone()).unwrap();
                let (lm, _) = minus
                    .loss_and_gradients(&batch, &draws, &sched, &weights)
                    .unwrap();
                params[i] = orig;
                let fd = (lp.total - lm.total) / (2.0 * fd_eps);
                let a = analytic[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                assert!(rel < 1e-4, "seed {seed} param {i}: analytic {a} vs fd {fd}");
                checked += 1;
            }
            assert!(checked > 300);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(8);
        model.save_checkpoint(&path).unwrap();
        let restored = Denoiser::load_checkpoint(&path).unwrap();
        assert_eq!(model.params(), restored.params());
        assert_eq!(model.config(), restored.config());

        let y_k = Matrix::ones((12, 2));
        let a = model.predict_noise(&y_k, &Condition::Null, 2).unwrap();
        let b = restored.predict_noise(&y_k, &Condition::Null, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        tiny_model(8).save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(Denoiser::load_checkpoint(&path).is_err());

        tiny_model(8).save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Denoiser::load_checkpoint(&path).is_err());
    }
}
