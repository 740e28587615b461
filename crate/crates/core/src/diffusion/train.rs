use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, DiffusionSchedule};
use super::unet::Denoiser;
use crate::conditioners::{ConditionEncoders, ConditionPayload, Modality};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Condition dropout during training: each modality independently with
/// `per_modality`, plus an extra `all` chance of dropping every modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondDropout {
    pub per_modality: f64,
    pub all: f64,
}

impl Default for CondDropout {
    fn default() -> Self {
        Self {
            per_modality: 0.1,
            all: 0.05,
        }
    }
}

impl CondDropout {
    pub const NONE: CondDropout = CondDropout {
        per_modality: 0.0,
        all: 0.0,
    };

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_modality) || !(0.0..=1.0).contains(&self.all) {
            return Err(Error::invalid("dropout probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The payloads that survive dropout for one sample.
    pub fn apply<'a, R: Rng + ?Sized>(&self, payloads: &'a [ConditionPayload], rng: &mut R) -> Vec<&'a ConditionPayload> {
        let drop_all = rng.random_bool(self.all);
        let mut kept = Vec::new();
        for m in Modality::ALL {
            let Some(p) = payloads.iter().find(|p| p.modality() == m) else {
                continue;
            };
            let dropped = rng.random_bool(self.per_modality);
            if !drop_all && !dropped {
                kept.push(p);
            }
        }
        kept
    }
}

/// Mean squared error between the drawn noise and the prediction at a
/// random step, with condition dropout applied per sample.
///
/// `z0`: `[N, c, d, d, d]`; `conditions[i]` lists the payloads of sample `i`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<'t>(
    tape: &'t Tape,
    model: &dyn Denoiser,
    encoders: &ConditionEncoders,
    z0: &Tensor,
    conditions: &[Vec<ConditionPayload>],
    sched: &DiffusionSchedule,
    dropout: &CondDropout,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    dropout.validate()?;
    let n = z0.shape()[0];
    if conditions.len() != n {
        return Err(Error::invalid(format!("{n} latents but {} condition lists", conditions.len())));
    }
    let per: usize = z0.numel() / n.max(1);
    let mut ts = Vec::with_capacity(n);
    let mut z_t = Vec::with_capacity(z0.numel());
    let mut eps_all = Vec::with_capacity(z0.numel());
    for i in 0..n {
        let t = rng.random_range(1..=sched.len());
        let eps = Tensor::randn([per], 1.0, rng);
        let zi = Tensor::from_vec(z0.data()[i * per..(i + 1) * per].to_vec());
        z_t.extend_from_slice(q_sample(&zi, t, &eps, sched)?.data());
        eps_all.extend_from_slice(eps.data());
        ts.push(sched.model_timestep(t));
    }
    let active: Vec<Vec<&ConditionPayload>> = conditions.iter().map(|c| dropout.apply(c, rng)).collect();
    let context = encoders.context_var(tape, &active)?;
    let z_t = tape.constant(Tensor::new(z0.shape().to_vec(), z_t)?);
    let eps = tape.constant(Tensor::new(z0.shape().to_vec(), eps_all)?);
    model.predict(tape, z_t, &ts, context)?.mse(eps)
}
