use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::{q_sample, DiffusionSchedule};
use super::unet::Denoiser;
use crate::conditioners::{aggregate, total_tokens, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// An encoded condition and its guidance weight `s_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedCondition {
    pub tokens: TokenSequence,
    pub weight: f64,
}

/// `eps_null + Σ s_i (eps_i - eps_null)`.
pub fn cfg_combine(eps_null: &Tensor, per_modality: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if per_modality.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} weights",
            per_modality.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("guidance weights must be finite"));
    }
    let mut out = eps_null.clone();
    for (eps, &s) in per_modality.iter().zip(weights) {
        if eps.shape() != eps_null.shape() {
            return Err(Error::ShapeMismatch {
                op: "cfg_combine",
                lhs: eps_null.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        for ((o, e), n) in out.data_mut().iter_mut().zip(eps.data()).zip(eps_null.data()) {
            *o += s * (e - n);
        }
    }
    Ok(out)
}

/// Guided noise prediction for a single latent `[c, d, d, d]`. Conditions
/// with weight 0 are skipped, so `1 + #active` forward passes run, batched.
pub fn guided_eps(
    model: &dyn Denoiser,
    z: &Tensor,
    t_model: usize,
    conditions: &[GuidedCondition],
    context_dim: usize,
) -> Result<Tensor> {
    let active: Vec<&GuidedCondition> = conditions.iter().filter(|c| c.weight != 0.0).collect();
    let batch = 1 + active.len();
    let mut contexts = vec![Tensor::zeros([total_tokens(), context_dim])];
    for c in &active {
        contexts.push(aggregate(std::slice::from_ref(&c.tokens))?);
    }
    let tape = Tape::no_grad();
    let zs = Tensor::stack(&vec![z.clone(); batch])?;
    let out = model
        .predict(&tape, tape.constant(zs), &vec![t_model; batch], tape.constant(Tensor::stack(&contexts)?))?
        .value();
    let null = out.slice_first(0)?;
    let per: Vec<Tensor> = (1..batch).map(|i| out.slice_first(i)).collect::<Result<_>>()?;
    let weights: Vec<f64> = active.iter().map(|c| c.weight).collect();
    cfg_combine(&null, &per, &weights)
}

/// State handed to a blending observer after observed sites were
/// overwritten at step `t` (`t = 0` is the final latent).
pub struct BlendStep<'a> {
    pub t: usize,
    pub latent: &'a Tensor,
    /// Fresh noise used for the observed sites; `None` at `t = 0`.
    pub eps: Option<&'a Tensor>,
}

/// Observed latent sites to re-impose at every step.
pub struct Blend<'a, 'o> {
    /// Known clean latent `[c, d, d, d]`.
    pub z_known: &'a Tensor,
    /// One flag per spatial site (`d³`).
    pub observed: &'a [bool],
    pub observer: Option<&'o mut dyn FnMut(&BlendStep) -> Result<()>>,
}

impl Blend<'_, '_> {
    fn impose(&mut self, z: &mut Tensor, t: usize, sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<()> {
        let eps = (t > 0).then(|| Tensor::randn(self.z_known.shape().to_vec(), 1.0, rng));
        let target = match &eps {
            Some(e) => q_sample(self.z_known, t, e, sched)?,
            None => self.z_known.clone(),
        };
        let sites = self.observed.len();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            if self.observed[i % sites] {
                *v = target.data()[i];
            }
        }
        for (i, v) in z.data().iter().enumerate() {
            if self.observed[i % sites] && v.to_bits() != target.data()[i].to_bits() {
                return Err(Error::invalid(format!("observed site {} drifted at step {t}", i % sites)));
            }
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&BlendStep {
                t,
                latent: z,
                eps: eps.as_ref(),
            })?;
        }
        Ok(())
    }
}

/// Ancestral DDPM sampling from `t = T` to `1` with the posterior variance
/// `β̃_t`. `z_init` replaces the `z_T` draw. Deterministic per seed.
pub fn sample(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    latent_shape: [usize; 4],
    conditions: &[GuidedCondition],
    context_dim: usize,
    seed: u64,
    z_init: Option<Tensor>,
) -> Result<Tensor> {
    run(model, sched, latent_shape, conditions, context_dim, seed, z_init, None, None)
}

/// Called after each reverse step with `(done, total)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize);

/// [`sample`] reporting progress after every step.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_progress(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    latent_shape: [usize; 4],
    conditions: &[GuidedCondition],
    context_dim: usize,
    seed: u64,
    progress: Progress<'_>,
) -> Result<Tensor> {
    run(model, sched, latent_shape, conditions, context_dim, seed, None, None, Some(progress))
}

/// [`sample`] with observed sites replaced by `q_sample(z_known, t, ε)`
/// after every step.
#[allow(clippy::too_many_arguments)]
pub fn blended_sample(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    conditions: &[GuidedCondition],
    context_dim: usize,
    seed: u64,
    blend: Blend<'_, '_>,
) -> Result<Tensor> {
    let s = blend.z_known.shape();
    if s.len() != 4 || blend.observed.len() != s[1] * s[2] * s[3] {
        return Err(Error::invalid("blend mask does not match the latent sites"));
    }
    let shape = [s[0], s[1], s[2], s[3]];
    run(model, sched, shape, conditions, context_dim, seed, None, Some(blend), None)
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    latent_shape: [usize; 4],
    conditions: &[GuidedCondition],
    context_dim: usize,
    seed: u64,
    z_init: Option<Tensor>,
    mut blend: Option<Blend<'_, '_>>,
    mut progress: Option<Progress<'_>>,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = match z_init {
        Some(z) if z.shape() == latent_shape => z,
        Some(z) => {
            return Err(Error::ShapeMismatch {
                op: "sample",
                lhs: latent_shape.to_vec(),
                rhs: z.shape().to_vec(),
            })
        }
        None => Tensor::randn(latent_shape.to_vec(), 1.0, &mut rng),
    };
    let big_t = sched.len();
    if let Some(b) = blend.as_mut() {
        b.impose(&mut z, big_t, sched, &mut rng)?;
    }
    for t in (1..=big_t).rev() {
        let eps = guided_eps(model, &z, sched.model_timestep(t), conditions, context_dim)?;
        let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        for (v, e) in z.data_mut().iter_mut().zip(eps.data()) {
            *v = inv * (*v - coef * e);
        }
        if t > 1 {
            let sigma = sched.posterior_variance(t).sqrt();
            let noise = Tensor::randn(latent_shape.to_vec(), 1.0, &mut rng);
            for (v, n) in z.data_mut().iter_mut().zip(noise.data()) {
                *v += sigma * n;
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite { op: "sample" });
        }
        if let Some(b) = blend.as_mut() {
            b.impose(&mut z, t - 1, sched, &mut rng)?;
        }
        if let Some(p) = progress.as_mut() {
            p(big_t - t + 1, big_t);
        }
    }
    Ok(z)
}
