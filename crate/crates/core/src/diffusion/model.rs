use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{blended_sample, sample, sample_with_progress, Blend, BlendStep, GuidedCondition, Progress};
use super::schedule::DiffusionSchedule;
use super::train::{training_loss, CondDropout};
use super::unet::{DenoiserConfig, DenoiserModel};
use crate::conditioners::{ConditionEncoders, ConditionPayload, Modality};
use crate::dataset::ObservationMask;
use crate::error::{Error, Result};
use crate::geometry::TsdfGrid;
use crate::tensor::{load_params, save_params, AdamConfig, ParamStore, Tape, Tensor};
use crate::vqvae::{adopt_params, sidecar_path, LatentGrid, VqVaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    /// Modalities the model was trained with, in canonical order.
    pub modalities: Vec<Modality>,
    /// Grid resolution seen by the partial-shape encoder.
    pub grid_resolution: usize,
    /// Latents are divided by this before diffusion (dataset std).
    pub latent_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let t = 100;
        let k = 1000.0 / t as f64;
        Self {
            timesteps: t,
            beta_start: 1e-4 * k,
            beta_end: 0.02 * k,
            denoiser: DenoiserConfig::default(),
            modalities: Modality::ALL.to_vec(),
            grid_resolution: 16,
            latent_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dropout: CondDropout,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            dropout: CondDropout::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    /// Mean loss over each pass through the data.
    pub loss_curve: Vec<f64>,
    pub latent_scale: f64,
}

/// Denoiser, condition encoders and schedule, trained together.
#[derive(Clone, Debug)]
pub struct LatentDiffusion {
    config: DiffusionConfig,
    schedule: DiffusionSchedule,
    denoiser: DenoiserModel,
    encoders: ConditionEncoders,
}

/// Output of [`LatentDiffusion::complete`].
#[derive(Clone, Debug)]
pub struct Completion {
    pub grid: TsdfGrid,
    /// Final latent in VQ-VAE units.
    pub latent: LatentGrid,
    /// Number of latent sites held fixed.
    pub observed_sites: usize,
}

impl LatentDiffusion {
    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        if !(config.latent_scale > 0.0 && config.latent_scale.is_finite()) {
            return Err(Error::invalid("latent scale must be positive"));
        }
        let schedule = super::make_schedule(config.timesteps, config.beta_start, config.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = DenoiserModel::new(config.denoiser.clone(), rng.random())?;
        let encoders = ConditionEncoders::new(config.grid_resolution, config.denoiser.context_dim, rng.random())?;
        Ok(Self {
            config,
            schedule,
            denoiser,
            encoders,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &DenoiserModel {
        &self.denoiser
    }

    pub fn encoders(&self) -> &ConditionEncoders {
        &self.encoders
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.denoiser.latent_shape()
    }

    /// Combined parameter store (`unet.*` and `cond.*`).
    pub fn all_params(&self) -> Result<ParamStore> {
        let mut all = self.denoiser.params().clone();
        for (name, t) in self.encoders.params().iter() {
            all.insert(name, t.clone())?;
        }
        Ok(all)
    }

    /// Encode `(payload, weight)` pairs; at most one per modality, and only
    /// modalities the model was trained with.
    pub fn encode_conditions(&self, conditions: &[(ConditionPayload, f64)]) -> Result<Vec<GuidedCondition>> {
        let mut seen = Vec::new();
        let mut out = Vec::with_capacity(conditions.len());
        for (payload, weight) in conditions {
            let m = payload.modality();
            if seen.contains(&m) {
                return Err(Error::invalid(format!("duplicate {} condition", m.name())));
            }
            if !self.config.modalities.contains(&m) {
                return Err(Error::invalid(format!("model was not trained with {} conditions", m.name())));
            }
            if !weight.is_finite() {
                return Err(Error::invalid("guidance weights must be finite"));
            }
            seen.push(m);
            out.push(GuidedCondition {
                tokens: self.encoders.encode_condition(payload)?,
                weight: *weight,
            });
        }
        Ok(out)
    }

    fn schedule_for(&self, steps: Option<usize>) -> Result<DiffusionSchedule> {
        match steps {
            Some(s) => self.schedule.respaced(s),
            None => Ok(self.schedule.clone()),
        }
    }

    fn to_vq_units(&self, z: Tensor) -> Result<LatentGrid> {
        let s = self.config.latent_scale;
        LatentGrid::new(z.map(|v| v * s))
    }

    /// Sample a latent (in VQ-VAE units). `steps` respaces the schedule.
    pub fn sample_latent(&self, conditions: &[GuidedCondition], seed: u64, steps: Option<usize>) -> Result<LatentGrid> {
        let sched = self.schedule_for(steps)?;
        let z = sample(
            &self.denoiser,
            &sched,
            self.latent_shape(),
            conditions,
            self.config.denoiser.context_dim,
            seed,
            None,
        )?;
        self.to_vq_units(z)
    }

    /// [`LatentDiffusion::sample_latent`] reporting `(done, total)` steps.
    pub fn sample_latent_with_progress(
        &self,
        conditions: &[GuidedCondition],
        seed: u64,
        steps: Option<usize>,
        progress: Progress<'_>,
    ) -> Result<LatentGrid> {
        let sched = self.schedule_for(steps)?;
        let z = sample_with_progress(
            &self.denoiser,
            &sched,
            self.latent_shape(),
            conditions,
            self.config.denoiser.context_dim,
            seed,
            progress,
        )?;
        self.to_vq_units(z)
    }

    /// Sample and decode through `quantize` + `decode`.
    pub fn generate(
        &self,
        vq: &VqVaeModel,
        conditions: &[GuidedCondition],
        seed: u64,
        steps: Option<usize>,
    ) -> Result<TsdfGrid> {
        vq.decode_quantized(&self.sample_latent(conditions, seed, steps)?)
    }

    /// Blended-diffusion completion of `partial` given its observation mask.
    #[allow(clippy::too_many_arguments)]
    pub fn complete(
        &self,
        vq: &VqVaeModel,
        partial: &TsdfGrid,
        mask: &ObservationMask,
        conditions: &[GuidedCondition],
        seed: u64,
        steps: Option<usize>,
        observer: Option<&mut dyn FnMut(&BlendStep) -> Result<()>>,
    ) -> Result<Completion> {
        let d = self.latent_shape()[1];
        let observed = latent_site_mask(mask, d)?;
        let observed_sites = observed.iter().filter(|o| **o).count();
        let sched = self.schedule_for(steps)?;
        let z = if observed_sites == 0 {
            log::warn!("no latent site is fully observed; sampling without blending");
            sample(
                &self.denoiser,
                &sched,
                self.latent_shape(),
                conditions,
                self.config.denoiser.context_dim,
                seed,
                None,
            )?
        } else {
            let inv = 1.0 / self.config.latent_scale;
            let z_known = vq.encode(partial)?.into_tensor().map(|v| v * inv);
            blended_sample(
                &self.denoiser,
                &sched,
                conditions,
                self.config.denoiser.context_dim,
                seed,
                Blend {
                    z_known: &z_known,
                    observed: &observed,
                    observer,
                },
            )?
        };
        let latent = self.to_vq_units(z)?;
        Ok(Completion {
            grid: vq.decode_quantized(&latent)?,
            latent,
            observed_sites,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(&self.all_params()?, path)?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: DiffusionConfig = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        let loaded = load_params(path)?;
        let mut unet = ParamStore::new();
        let mut cond = ParamStore::new();
        for (name, t) in loaded.iter() {
            let target = if name.starts_with("cond.") { &mut cond } else { &mut unet };
            target.insert(name, t.clone())?;
        }
        adopt_params(model.denoiser.params_mut(), unet, path)?;
        adopt_params(model.encoders.params_mut(), cond, path)?;
        Ok(model)
    }
}

/// A latent site is observed iff every voxel it covers is observed.
pub fn latent_site_mask(mask: &ObservationMask, extent: usize) -> Result<Vec<bool>> {
    let r = mask.resolution();
    if extent == 0 || r % extent != 0 {
        return Err(Error::invalid(format!("mask resolution {r} is not a multiple of {extent}")));
    }
    let f = r / extent;
    let mut out = Vec::with_capacity(extent.pow(3));
    for z in 0..extent {
        for y in 0..extent {
            for x in 0..extent {
                let all = (0..f).all(|k| {
                    (0..f).all(|j| (0..f).all(|i| mask.get(x * f + i, y * f + j, z * f + k)))
                });
                out.push(all);
            }
        }
    }
    Ok(out)
}

/// Train the denoiser and condition encoders jointly on latents
/// (`[c, d, d, d]`, VQ-VAE units) with their condition payloads.
/// Payloads of modalities not listed in `config.modalities` are ignored.
pub fn train_diffusion(
    latents: &[Tensor],
    conditions: &[Vec<ConditionPayload>],
    mut config: DiffusionConfig,
    train: &DiffusionTrainConfig,
) -> Result<(LatentDiffusion, DiffusionTrainReport)> {
    if latents.is_empty() || latents.len() != conditions.len() {
        return Err(Error::invalid("need one condition list per latent and at least one latent"));
    }
    if train.batch == 0 || train.iterations == 0 {
        return Err(Error::invalid("iterations and batch must be positive"));
    }
    let count: usize = latents.iter().map(Tensor::numel).sum();
    let mean = latents.iter().map(Tensor::sum).sum::<f64>() / count as f64;
    let var = latents
        .iter()
        .flat_map(|t| t.data().iter().map(|v| (v - mean) * (v - mean)))
        .sum::<f64>()
        / count as f64;
    config.latent_scale = var.sqrt().max(1e-6);
    let inv = 1.0 / config.latent_scale;
    let scaled: Vec<Tensor> = latents.iter().map(|t| t.map(|v| v * inv)).collect();
    let conditions: Vec<Vec<ConditionPayload>> = conditions
        .iter()
        .map(|ps| ps.iter().filter(|p| config.modalities.contains(&p.modality())).cloned().collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = LatentDiffusion::new(config, rng.random())?;
    let adam = AdamConfig::with_lr(train.lr);
    let mut order: Vec<usize> = Vec::new();
    let per_epoch = latents.len().div_ceil(train.batch);
    let mut report = DiffusionTrainReport {
        loss_curve: Vec::new(),
        latent_scale: model.config.latent_scale,
    };
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 0..train.iterations {
        if order.len() < train.batch {
            let mut fresh: Vec<usize> = (0..latents.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..train.batch.min(order.len())).collect();
        let z0 = Tensor::stack(&idx.iter().map(|&i| scaled[i].clone()).collect::<Vec<_>>())?;
        let conds: Vec<Vec<ConditionPayload>> = idx.iter().map(|&i| conditions[i].clone()).collect();
        let tape = Tape::new();
        let loss = training_loss(
            &tape,
            &model.denoiser,
            &model.encoders,
            &z0,
            &conds,
            &model.schedule,
            &train.dropout,
            &mut rng,
        )
        .map_err(|e| as_divergence(step, e))?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {value}"),
            });
        }
        let grads = tape.backward(loss)?.param_grads();
        model
            .denoiser
            .params_mut()
            .adam_step_subset(&grads, &adam)
            .map_err(|e| as_divergence(step, e))?;
        model
            .encoders
            .params_mut()
            .adam_step_subset(&grads, &adam)
            .map_err(|e| as_divergence(step, e))?;
        acc += value;
        acc_n += 1;
        if acc_n == per_epoch || step + 1 == train.iterations {
            report.loss_curve.push(acc / acc_n as f64);
            log::debug!("diffusion step {step}: loss {:.5}", acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok((model, report))
}

fn as_divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}
