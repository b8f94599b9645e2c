//! Flat pipeline configuration shared by every command.
//!
//! One TOML file with scalar keys only; every key has a default, so an empty
//! file (or no file) is the default pipeline. Unknown keys are rejected to
//! catch typos. The digest identifies the effective configuration: it hashes
//! the canonical serialization of the resolved values, so two files that
//! spell the same configuration differently share a digest.

use crate::denoiser::{BlockSpec, DenoiserConfig};
use crate::error::{Error, Result};
use crate::intention::IntentionThresholds;
use crate::sampler::{GuidanceConfig, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::trajdata::SyntheticSpec;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_seed() -> u64 {
    0
}
fn default_frame_step() -> f64 {
    crate::trajdata::DEFAULT_FRAME_STEP
}
fn default_t_obs() -> usize {
    crate::trajdata::DEFAULT_T_OBS
}
fn default_t_fut() -> usize {
    crate::trajdata::DEFAULT_T_FUT
}
fn default_window_stride() -> usize {
    1
}
fn default_data_scale() -> f64 {
    1.0
}
fn default_k_steps() -> usize {
    100
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    5e-2
}
fn default_encoder_width() -> usize {
    128
}
fn default_encoder_layers() -> usize {
    2
}
fn default_encoder_heads() -> usize {
    4
}
fn default_intention_width() -> usize {
    256
}
fn default_intention_layers() -> usize {
    4
}
fn default_intention_heads() -> usize {
    4
}
fn default_noise_width() -> usize {
    512
}
fn default_noise_layers() -> usize {
    4
}
fn default_noise_heads() -> usize {
    8
}
fn default_v_lt() -> f64 {
    0.2
}
fn default_v_rt() -> f64 {
    -0.2
}
fn default_a_acc() -> f64 {
    0.5
}
fn default_a_dec() -> f64 {
    -0.5
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    100
}
fn default_loss_alpha() -> f64 {
    1.0
}
fn default_loss_beta() -> f64 {
    0.5
}
fn default_null_dropout() -> f64 {
    0.1
}
fn default_sample_stride() -> usize {
    20
}
fn default_n_samples() -> usize {
    20
}
fn default_guidance_w() -> f64 {
    0.9
}
fn default_synth_count() -> usize {
    2000
}
fn default_synth_speed() -> f64 {
    1.2
}
fn default_synth_turn_rate() -> f64 {
    0.1
}
fn default_synth_noise_std() -> f64 {
    0.05
}
fn default_synth_prob_left() -> f64 {
    1.0 / 3.0
}
fn default_synth_prob_straight() -> f64 {
    1.0 / 3.0
}

/// Every tunable of the pipeline, flat, with defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Seconds between consecutive frames.
    #[serde(default = "default_frame_step")]
    pub frame_step: f64,
    #[serde(default = "default_t_obs")]
    pub t_obs: usize,
    #[serde(default = "default_t_fut")]
    pub t_fut: usize,
    /// Hop between window start frames when slicing tracks.
    #[serde(default = "default_window_stride")]
    pub window_stride: usize,
    /// Meters per model unit; positions are divided by this before training.
    #[serde(default = "default_data_scale")]
    pub data_scale: f64,

    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,

    #[serde(default = "default_encoder_width")]
    pub encoder_width: usize,
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_encoder_heads")]
    pub encoder_heads: usize,
    #[serde(default = "default_intention_width")]
    pub intention_width: usize,
    #[serde(default = "default_intention_layers")]
    pub intention_layers: usize,
    #[serde(default = "default_intention_heads")]
    pub intention_heads: usize,
    #[serde(default = "default_noise_width")]
    pub noise_width: usize,
    #[serde(default = "default_noise_layers")]
    pub noise_layers: usize,
    #[serde(default = "default_noise_heads")]
    pub noise_heads: usize,

    /// Lateral velocity above which the labeler reads a left turn, m/s.
    #[serde(default = "default_v_lt")]
    pub v_lt: f64,
    /// Lateral velocity below which the labeler reads a right turn, m/s.
    #[serde(default = "default_v_rt")]
    pub v_rt: f64,
    /// Longitudinal acceleration above which the labeler reads speeding up.
    #[serde(default = "default_a_acc")]
    pub a_acc: f64,
    /// Longitudinal acceleration below which the labeler reads slowing down.
    #[serde(default = "default_a_dec")]
    pub a_dec: f64,

    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_loss_alpha")]
    pub loss_alpha: f64,
    #[serde(default = "default_loss_beta")]
    pub loss_beta: f64,
    #[serde(default = "default_null_dropout")]
    pub null_dropout: f64,
    /// Global gradient-norm ceiling; omit to train unclipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,

    /// Ladder stride of the reverse process.
    #[serde(default = "default_sample_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_guidance_w")]
    pub guidance_w: f64,

    #[serde(default = "default_synth_count")]
    pub synth_count: usize,
    /// Walking speed of generated pedestrians, m/s.
    #[serde(default = "default_synth_speed")]
    pub synth_speed: f64,
    /// Heading change per step for turning pedestrians, radians.
    #[serde(default = "default_synth_turn_rate")]
    pub synth_turn_rate: f64,
    #[serde(default = "default_synth_noise_std")]
    pub synth_noise_std: f64,
    #[serde(default = "default_synth_prob_left")]
    pub synth_prob_left: f64,
    #[serde(default = "default_synth_prob_straight")]
    pub synth_prob_straight: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config must deserialize to the defaults")
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Validation(msg) => Error::format(path, msg),
            other => other,
        })
    }

    /// Checks the cross-field constraints by building each subsystem config.
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_step > 0.0 && self.frame_step.is_finite()) {
            return Err(Error::validation("frame_step must be positive and finite"));
        }
        if self.window_stride < 1 {
            return Err(Error::validation("window_stride must be >= 1"));
        }
        self.schedule()?;
        self.denoiser_config().validate()?;
        self.train_config().validate()?;
        self.sampler_config()
            .validate(&self.schedule()?)
            .map_err(|e| Error::validation(format!("sampling: {e}")))?;
        self.guidance_config().validate()?;
        self.thresholds().validate()?;
        self.synthetic_spec().validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization of the resolved values.
    pub fn digest(&self) -> String {
        let canonical =
            toml::to_string(self).expect("resolved config must serialize");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let bytes = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in bytes {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.k_steps, self.beta_start, self.beta_end)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            t_obs: self.t_obs,
            t_fut: self.t_fut,
            data_scale: self.data_scale,
            encoder: BlockSpec {
                width: self.encoder_width,
                layers: self.encoder_layers,
                heads: self.encoder_heads,
            },
            intention: BlockSpec {
                width: self.intention_width,
                layers: self.intention_layers,
                heads: self.intention_heads,
            },
            noise: BlockSpec {
                width: self.noise_width,
                layers: self.noise_layers,
                heads: self.noise_heads,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            loss_alpha: self.loss_alpha,
            loss_beta: self.loss_beta,
            null_dropout: self.null_dropout,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            stride: self.sample_stride,
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig { w: self.guidance_w }
    }

    pub fn thresholds(&self) -> IntentionThresholds {
        IntentionThresholds {
            v_lt: self.v_lt,
            v_rt: self.v_rt,
            a_acc: self.a_acc,
            a_dec: self.a_dec,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let right = (1.0 - self.synth_prob_left - self.synth_prob_straight).max(0.0);
        SyntheticSpec {
            count: self.synth_count,
            speed: self.synth_speed,
            turn_probabilities: (self.synth_prob_left, self.synth_prob_straight, right),
            turn_rate: self.synth_turn_rate,
            noise_std: self.synth_noise_std,
            seed: self.seed,
        }
    }
}
