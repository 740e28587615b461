use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance schedule indexed by step `t = 1..=T`; `ᾱ_0 = 1`.
///
/// `timesteps[t - 1]` is the step index the denoiser was trained with for
/// step `t`. It is the identity for a schedule built by [`make_schedule`] and
/// a strided subsequence after [`DiffusionSchedule::respaced`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

/// Linear `β` from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {t}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = (0..t)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    /// `T` steps of linear `β` from `1e-4 * 1000/T` to `0.02 * 1000/T`;
    /// needs `T > 20`.
    pub fn rescaled_linear(t: usize) -> Result<Self> {
        let k = 1000.0 / t as f64;
        make_schedule(t, 1e-4 * k, 0.02 * k)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let timesteps = (1..=betas.len()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    /// Posterior variance `β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// A `steps`-long schedule visiting evenly strided original steps (the
    /// last is always `T`), with `β` recomputed so the kept `ᾱ` values are
    /// unchanged.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let big_t = self.len();
        if steps == 0 || steps > big_t {
            return Err(Error::invalid(format!("steps must be in 1..={big_t}, got {steps}")));
        }
        if steps == big_t {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (1..=steps)
            .map(|i| ((i * big_t) as f64 / steps as f64).round() as usize)
            .collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut s = Self::from_betas(betas)?;
        s.alpha_bars = kept.iter().map(|&t| self.alpha_bar(t)).collect();
        s.timesteps = kept.iter().map(|&t| self.model_timestep(t)).collect();
        Ok(s)
    }
}

/// `z_t = √ᾱ_t z0 + √(1 - ᾱ_t) ε` for `1 <= t <= T`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if t == 0 || t > sched.len() {
        return Err(Error::invalid(format!("t = {t} outside 1..={}", sched.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
