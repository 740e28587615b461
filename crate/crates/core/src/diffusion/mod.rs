//! DDPM over VQ-VAE latents with multi-condition classifier-free guidance
//! and blended completion of partial shapes.

mod model;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use model::{
    latent_site_mask, train_diffusion, Completion, DiffusionConfig, DiffusionTrainConfig, DiffusionTrainReport,
    LatentDiffusion,
};
pub use sampler::{
    blended_sample, cfg_combine, guided_eps, sample, sample_with_progress, Blend, BlendStep, GuidedCondition, Progress,
};
pub use schedule::{make_schedule, q_sample, DiffusionSchedule};
pub use train::{training_loss, CondDropout};
pub use unet::{Denoiser, DenoiserConfig, DenoiserModel};
