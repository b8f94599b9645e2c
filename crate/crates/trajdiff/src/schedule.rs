//! Diffusion noise schedule: the per-step variance table and the closed-form
//! forward (noising) process built on top of it.
//!
//! Steps are 1-based: step `k` in `1..=K` carries `beta(k)`, `alpha(k) = 1 -
//! beta(k)` and the cumulative product `alpha_bar(k)`. Step 0 denotes the
//! clean data, with `alpha_bar(0) == 1` by convention. All schedule math is
//! 64-bit.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::io::Write;

/// Variance schedule for a `K`-step diffusion process.
///
/// Immutable after construction; cheap to clone and safe to share.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `beta` interpolated linearly from `beta_start`
    /// at step 1 to `beta_end` at step K.
    pub fn linear(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k_steps < 1 {
            return Err(Error::validation("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if k_steps == 1 {
            vec![beta_start]
        } else {
            (0..k_steps)
                .map(|i| {
                    let t = i as f64 / (k_steps - 1) as f64;
                    beta_start + t * (beta_end - beta_start)
                })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Default schedule: linear beta over `1e-4..=5e-2`.
    pub fn default_linear(k_steps: usize) -> Result<Self> {
        Self::linear(k_steps, 1e-4, 5e-2)
    }

    /// Number of diffusion steps K.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta(k)` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// `alpha(k)` for `k` in `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product `alpha_bar(k)` for `k` in `0..=K`, with
    /// `alpha_bar(0) == 1` (the clean-data convention).
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.num_steps() {
            return Err(Error::validation(format!(
                "step {k} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Marginal coefficients at step `k`: mean scale `sqrt(alpha_bar(k))` and
    /// noise standard deviation `sqrt(1 - alpha_bar(k))`. The two squares sum
    /// to one. Valid for `k` in `0..=K`; step 0 gives `(1, 0)`.
    pub fn marginal_params(&self, k: usize) -> Result<(f64, f64)> {
        if k > self.num_steps() {
            return Err(Error::validation(format!(
                "step {k} outside 0..={}",
                self.num_steps()
            )));
        }
        let ab = self.alpha_bar(k);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Single-shot forward noising: `sqrt(alpha_bar(k)) * y0 + sqrt(1 -
    /// alpha_bar(k)) * eps`, elementwise.
    pub fn forward_sample(&self, y0: &Array2<f64>, k: usize, eps: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_step(k)?;
        if y0.dim() != eps.dim() {
            return Err(Error::validation(format!(
                "shape mismatch: y0 {:?} vs eps {:?}",
                y0.dim(),
                eps.dim()
            )));
        }
        let (mean_scale, std) = self.marginal_params(k)?;
        Ok(y0 * mean_scale + eps * std)
    }

    /// One sequential noising transition from step `k-1` to `k`:
    /// `sqrt(1 - beta(k)) * y_prev + sqrt(beta(k)) * eps`.
    pub fn forward_transition(
        &self,
        y_prev: &Array2<f64>,
        k: usize,
        eps: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_step(k)?;
        let b = self.beta(k);
        Ok(y_prev * (1.0 - b).sqrt() + eps * b.sqrt())
    }

    /// Writes the schedule as CSV with columns `k,beta,alpha,alpha_bar`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,beta,alpha,alpha_bar")?;
        for k in 1..=self.num_steps() {
            writeln!(
                out,
                "{},{:?},{:?},{:?}",
                k,
                self.beta(k),
                self.alpha(k),
                self.alpha_bar(k)
            )?;
        }
        Ok(())
    }
}
