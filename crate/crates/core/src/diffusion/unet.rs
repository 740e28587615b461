use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{timestep_embedding, Conv3d, ConvTranspose3d, CrossAttention, GroupNorm, Linear, ResBlock3d};
use crate::tensor::{ConvAttrs, ParamStore, Tape, Tensor, Var};

/// Noise predictor `ε(z_t, t, context)`.
pub trait Denoiser {
    /// `z_t`: `[N, c, d, d, d]`; `t`: one step per batch entry;
    /// `context`: `[N, tokens, embed_dim]`. Returns the shape of `z_t`.
    fn predict<'t>(&self, tape: &'t Tape, z_t: Var<'t>, t: &[usize], context: Var<'t>) -> Result<Var<'t>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_extent: usize,
    pub base_channels: usize,
    pub context_dim: usize,
    pub attn_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            latent_extent: 4,
            base_channels: 32,
            context_dim: crate::conditioners::EMBED_DIM,
            attn_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    time1: Linear,
    time2: Linear,
    conv_in: Conv3d,
    res1: ResBlock3d,
    attn1: CrossAttention,
    down: Conv3d,
    res2: ResBlock3d,
    attn2: CrossAttention,
    mid: ResBlock3d,
    up: ConvTranspose3d,
    res3: ResBlock3d,
    attn3: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

/// Two-level 3D UNet with a sinusoidal time embedding, residual blocks and
/// cross-attention to the condition tokens at every level. Parameter names
/// start with `unet.`.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    layers: Layers,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.latent_extent < 2 || config.latent_extent % 2 != 0 {
            return Err(Error::invalid(format!(
                "latent extent must be even and >= 2, got {}",
                config.latent_extent
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let p = &mut store;
        let c = config.base_channels;
        let (e, a) = (config.context_dim, config.attn_dim);
        let td = 2 * c;
        let layers = Layers {
            time1: Linear::new(p, "unet.time1", c, td, r)?,
            time2: Linear::new(p, "unet.time2", td, td, r)?,
            conv_in: Conv3d::new(p, "unet.conv_in", config.latent_channels, c, 3, ConvAttrs::new(1, 1), r)?,
            res1: ResBlock3d::new(p, "unet.res1", c, c, Some(td), r)?,
            attn1: CrossAttention::new(p, "unet.attn1", c, e, a, r)?,
            down: Conv3d::new(p, "unet.down", c, 2 * c, 4, ConvAttrs::new(2, 1), r)?,
            res2: ResBlock3d::new(p, "unet.res2", 2 * c, 2 * c, Some(td), r)?,
            attn2: CrossAttention::new(p, "unet.attn2", 2 * c, e, a, r)?,
            mid: ResBlock3d::new(p, "unet.mid", 2 * c, 2 * c, Some(td), r)?,
            up: ConvTranspose3d::new(p, "unet.up", 2 * c, c, 4, ConvAttrs::new(2, 1), r)?,
            res3: ResBlock3d::new(p, "unet.res3", 2 * c, c, Some(td), r)?,
            attn3: CrossAttention::new(p, "unet.attn3", c, e, a, r)?,
            norm_out: GroupNorm::new(p, "unet.norm_out", c, 4)?,
            conv_out: Conv3d::new(p, "unet.conv_out", c, config.latent_channels, 3, ConvAttrs::new(1, 1), r)?,
        };
        // Start as the zero predictor.
        let w = p.get("unet.conv_out.w").expect("just inserted").shape().to_vec();
        p.set("unet.conv_out.w", Tensor::zeros(w))?;
        Ok(Self {
            config,
            params: store,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let d = self.config.latent_extent;
        [self.config.latent_channels, d, d, d]
    }
}

impl Denoiser for DenoiserModel {
    fn predict<'t>(&self, tape: &'t Tape, z_t: Var<'t>, t: &[usize], context: Var<'t>) -> Result<Var<'t>> {
        let (l, p) = (&self.layers, &self.params);
        let shape = z_t.shape();
        if shape.len() != 5 || shape[1..] != self.latent_shape() || t.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: self.latent_shape().to_vec(),
                rhs: shape,
            });
        }
        let temb = tape.constant(timestep_embedding(t, self.config.base_channels));
        let temb = l.time1.forward(tape, p, temb)?.silu()?;
        let temb = l.time2.forward(tape, p, temb)?;
        let h0 = l.conv_in.forward(tape, p, z_t)?;
        let h1 = l.res1.forward(tape, p, h0, Some(temb))?;
        let h1 = l.attn1.forward(tape, p, h1, context)?;
        let h2 = l.down.forward(tape, p, h1)?;
        let h2 = l.res2.forward(tape, p, h2, Some(temb))?;
        let h2 = l.attn2.forward(tape, p, h2, context)?;
        let h2 = l.mid.forward(tape, p, h2, Some(temb))?;
        let u = l.up.forward(tape, p, h2)?;
        let u = Var::concat(&[u, h1], 1)?;
        let u = l.res3.forward(tape, p, u, Some(temb))?;
        let u = l.attn3.forward(tape, p, u, context)?;
        let u = l.norm_out.forward(tape, p, u)?.silu()?;
        l.conv_out.forward(tape, p, u)
    }
}
