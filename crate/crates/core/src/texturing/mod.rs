//! Texturing by score distillation: a fixed-density volume renderer over a
//! learnable colour grid, scored by a small keyword-conditioned 2D critic.

mod critic;
mod render;
mod sds;

pub use critic::{
    palette_color, train_toy_critic, Critic2D, CriticConfig, CriticShape, CriticTrainConfig, CriticTrainReport,
    RenderDataset, CRITIC_RESOLUTION, CRITIC_TOKENS, PALETTE,
};
pub use render::{
    composite_ray, ray_weights, render, render_opacity, trilinear, ColorField, Image, Pose, RenderConfig,
    RenderOperator,
};
pub use sds::{
    sds_grad, sds_weight, surface_mean_color, texture_shape, textured_obj, ScoreCritic, SdsStep, TextureConfig,
    TextureReport,
};
