//! Latent diffusion over truncated signed distance fields.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`tensor`]: `f64` tensors, a reverse-mode tape, Adam and checkpoints.
//! * [`geometry`]: analytic SDFs, TSDF grids, marching cubes, surface
//!   sampling and SDF-to-density conversion.
//! * [`dataset`]: procedural furniture-like shapes with keywords,
//!   silhouettes and partial observations.
//! * [`vqvae`]: 3D VQ-VAE compressing grids into a small latent.
//! * [`conditioners`]: per-modality token encoders with dropout.
//! * [`diffusion`]: DDPM over latents, multi-condition classifier-free
//!   guidance and blended completion.
//! * [`metrics`]: Chamfer, UHD, TMD, F-score and the completion harness.
//! * [`texturing`]: volume rendering and score distillation against a
//!   small 2D diffusion critic.
//! * [`pipeline`]: the trained model stack used by the CLI and service.

pub mod conditioners;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod texturing;
pub mod vqvae;

pub use error::{Error, Result};
pub use tensor::{AdamConfig, ConvAttrs, Gradients, Op, ParamStore, Tape, Tensor, Var};
