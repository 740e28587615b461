use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_opacity, RenderConfig};
use crate::dataset::{keyword_id, VOCABULARY};
use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::geometry::{tsdf_to_density, TsdfGrid};
use crate::tensor::nn::{timestep_embedding, Conv2d, CrossAttention, GroupNorm, Linear, ResBlock3d};
use crate::tensor::{load_params, save_params, AdamConfig, ConvAttrs, ParamStore, Tape, Tensor, Var};
use crate::vqvae::{adopt_params, sidecar_path};

/// Colour keywords and the RGB each stands for in the critic's training
/// renders.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.12, 0.10]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.80, 0.15]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
];

pub fn palette_color(word: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

/// Keyword tokens per image.
pub const CRITIC_TOKENS: usize = 4;

/// Image side; the architecture patchifies by 4 and downsamples once more.
pub const CRITIC_RESOLUTION: usize = 64;

const PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            embed_dim: 16,
            timesteps: 100,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    time1: Linear,
    time2: Linear,
    words: Linear,
    patch_in: Conv2d,
    res1: ResBlock3d,
    attn1: CrossAttention,
    down: Conv2d,
    res2: ResBlock3d,
    attn2: CrossAttention,
    mid: ResBlock3d,
    up: Conv2d,
    res3: ResBlock3d,
    attn3: CrossAttention,
    norm_out: GroupNorm,
    patch_out: Conv2d,
    skip: Linear,
}

/// Small 2D DDPM over 64×64 RGB images with keyword cross-attention. Feature
/// maps are held as `[N, C, 1, H, W]` so the 3D residual blocks apply
/// unchanged. Parameter names start with `critic.`.
#[derive(Clone, Debug)]
pub struct Critic2D {
    config: CriticConfig,
    schedule: DiffusionSchedule,
    params: ParamStore,
    layers: Layers,
}

/// Rearrange `[N, C·r·r, H, W]` into `[N, C, H·r, W·r]`.
fn pixel_shuffle<'t>(x: Var<'t>, r: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
    x.reshape(&[n, c, r, r, h, w])?
        .permute(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[n, c, h * r, w * r])
}

fn to5<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], 1, s[2], s[3]])
}

fn to4<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[3], s[4]])
}

impl Critic2D {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        if config.base_channels < 4 || config.base_channels % 4 != 0 || config.embed_dim == 0 {
            return Err(Error::invalid("critic channels must be a positive multiple of 4"));
        }
        let schedule = DiffusionSchedule::rescaled_linear(config.timesteps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let p = &mut store;
        let c = config.base_channels;
        let (e, td) = (config.embed_dim, 2 * c);
        let layers = Layers {
            time1: Linear::new(p, "critic.time1", c, td, r)?,
            time2: Linear::new(p, "critic.time2", td, td, r)?,
            words: Linear::new(p, "critic.words", VOCABULARY.len(), e, r)?,
            patch_in: Conv2d::new(p, "critic.patch_in", 3, c, PATCH, ConvAttrs::new(PATCH, 0), r)?,
            res1: ResBlock3d::new(p, "critic.res1", c, c, Some(td), r)?,
            attn1: CrossAttention::new(p, "critic.attn1", c, e, e, r)?,
            down: Conv2d::new(p, "critic.down", c, 2 * c, 2, ConvAttrs::new(2, 0), r)?,
            res2: ResBlock3d::new(p, "critic.res2", 2 * c, 2 * c, Some(td), r)?,
            attn2: CrossAttention::new(p, "critic.attn2", 2 * c, e, e, r)?,
            mid: ResBlock3d::new(p, "critic.mid", 2 * c, 2 * c, Some(td), r)?,
            up: Conv2d::new(p, "critic.up", 2 * c, 4 * c, 1, ConvAttrs::new(1, 0), r)?,
            res3: ResBlock3d::new(p, "critic.res3", 2 * c, c, Some(td), r)?,
            attn3: CrossAttention::new(p, "critic.attn3", c, e, e, r)?,
            norm_out: GroupNorm::new(p, "critic.norm_out", c, 4)?,
            patch_out: Conv2d::new(p, "critic.patch_out", c, 3 * PATCH * PATCH, 1, ConvAttrs::new(1, 0), r)?,
            skip: Linear::zeroed(p, "critic.skip", td, 3)?,
        };
        let w = p.get("critic.patch_out.w").expect("just inserted").shape().to_vec();
        p.set("critic.patch_out.w", Tensor::zeros(w))?;
        Ok(Self {
            config,
            schedule,
            params: store,
            layers,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// One-hot keyword rows `[N, CRITIC_TOKENS, vocab]`; unused rows are zero.
    pub fn keyword_tensor(batch: &[Vec<usize>]) -> Result<Tensor> {
        let v = VOCABULARY.len();
        let mut data = vec![0.0; batch.len() * CRITIC_TOKENS * v];
        for (n, ids) in batch.iter().enumerate() {
            if ids.len() > CRITIC_TOKENS {
                return Err(Error::invalid(format!("at most {CRITIC_TOKENS} keywords, got {}", ids.len())));
            }
            for (k, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::invalid(format!("keyword id {id} outside the vocabulary")));
                }
                data[(n * CRITIC_TOKENS + k) * v + id] = 1.0;
            }
        }
        Tensor::new([batch.len(), CRITIC_TOKENS, v], data)
    }

    /// Noise prediction for `x_t`: `[N, 3, 64, 64]`.
    pub fn predict_var<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: &[usize], keywords: &[Vec<usize>]) -> Result<Var<'t>> {
        let s = x_t.shape();
        if s.len() != 4 || s[1..] != [3, CRITIC_RESOLUTION, CRITIC_RESOLUTION] || t.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "critic",
                lhs: vec![3, CRITIC_RESOLUTION, CRITIC_RESOLUTION],
                rhs: s,
            });
        }
        let n = s[0];
        let (l, p) = (&self.layers, &self.params);
        let v = VOCABULARY.len();
        let words = tape
            .constant(Self::keyword_tensor(keywords)?)
            .reshape(&[n * CRITIC_TOKENS, v])?;
        let ctx = l
            .words
            .forward(tape, p, words)?
            .reshape(&[n, CRITIC_TOKENS, self.config.embed_dim])?;
        let temb = tape.constant(timestep_embedding(t, self.config.base_channels));
        let temb = l.time1.forward(tape, p, temb)?.silu()?;
        let temb = l.time2.forward(tape, p, temb)?;

        let h1 = to5(l.patch_in.forward(tape, p, x_t)?)?;
        let h1 = l.res1.forward(tape, p, h1, Some(temb))?;
        let h1 = l.attn1.forward(tape, p, h1, ctx)?;
        let h2 = to5(l.down.forward(tape, p, to4(h1)?)?)?;
        let h2 = l.res2.forward(tape, p, h2, Some(temb))?;
        let h2 = l.attn2.forward(tape, p, h2, ctx)?;
        let h2 = l.mid.forward(tape, p, h2, Some(temb))?;
        let u = to5(pixel_shuffle(l.up.forward(tape, p, to4(h2)?)?, 2)?)?;
        let u = Var::concat(&[u, h1], 1)?;
        let u = l.res3.forward(tape, p, u, Some(temb))?;
        let u = l.attn3.forward(tape, p, u, ctx)?;
        let u = l.norm_out.forward(tape, p, u)?.silu()?;
        let coarse = pixel_shuffle(l.patch_out.forward(tape, p, to4(u)?)?, PATCH)?;
        // Full-resolution path: the patch branch cannot carry per-pixel
        // noise, so x_t passes through with a learned per-channel scale.
        let gain = l.skip.forward(tape, p, temb.silu()?)?.reshape(&[n, 3, 1, 1])?;
        coarse.add(x_t.mul(gain)?)
    }

    /// `ε̃(x_t, t, S)` for a single image `[3, 64, 64]`, without gradients.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, keywords: &[usize]) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let x = tape.constant(x_t.clone().reshape([1, 3, CRITIC_RESOLUTION, CRITIC_RESOLUTION])?);
        let out = self.predict_var(&tape, x, &[t], &[keywords.to_vec()])?.value();
        out.as_ref().clone().reshape([3, CRITIC_RESOLUTION, CRITIC_RESOLUTION])
    }

    /// Ancestral sampling of one image for `keywords`, with the predicted
    /// clean image clipped to `[0, 1]` at every step.
    pub fn sample(&self, keywords: &[usize], seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [3, CRITIC_RESOLUTION, CRITIC_RESOLUTION];
        let mut x = Tensor::randn(shape, 1.0, &mut rng);
        let s = &self.schedule;
        for t in (1..=s.len()).rev() {
            let eps = self.predict_eps(&x, t, keywords)?;
            let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
            let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for (v, e) in x.data_mut().iter_mut().zip(eps.data()) {
                let x0 = ((*v - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(0.0, 1.0);
                *v = c0 * x0 + ct * *v;
            }
            if t > 1 {
                let sigma = s.posterior_variance(t).sqrt();
                let noise = Tensor::randn(shape, 1.0, &mut rng);
                for (v, z) in x.data_mut().iter_mut().zip(noise.data()) {
                    *v += sigma * z;
                }
            }
        }
        Ok(x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(&self.params, path)?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: CriticConfig = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        adopt_params(&mut model.params, load_params(path)?, path)?;
        Ok(model)
    }
}

/// A shape to render for critic training: its grid and descriptive keywords
/// (e.g. the category name).
#[derive(Clone, Debug)]
pub struct CriticShape {
    pub grid: TsdfGrid,
    pub keywords: Vec<String>,
}

/// Cached opacity maps, one per (shape, pose).
#[derive(Clone, Debug)]
pub struct RenderDataset {
    opacity: Vec<Vec<f64>>,
    keywords: Vec<Vec<usize>>,
    background: [f64; 3],
}

impl RenderDataset {
    pub fn build(shapes: &[CriticShape], cfg: &RenderConfig) -> Result<Self> {
        if cfg.resolution != CRITIC_RESOLUTION {
            return Err(Error::invalid(format!("critic renders must be {CRITIC_RESOLUTION} pixels wide")));
        }
        let mut opacity = Vec::new();
        let mut keywords = Vec::new();
        for s in shapes {
            let ids: Vec<usize> = s.keywords.iter().filter_map(|k| keyword_id(k)).take(CRITIC_TOKENS - 1).collect();
            let density = tsdf_to_density(&s.grid, cfg.alpha, cfg.beta)?;
            for pose in cfg.poses() {
                opacity.push(render_opacity(&density, pose, cfg)?);
                keywords.push(ids.clone());
            }
        }
        if opacity.is_empty() {
            return Err(Error::invalid("critic dataset needs at least one shape"));
        }
        Ok(Self {
            opacity,
            keywords,
            background: cfg.background,
        })
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Render entry `i` with a monochrome colour: `c · A + (1 - A) · bg`.
    pub fn image(&self, i: usize, rgb: [f64; 3]) -> Tensor {
        let a = &self.opacity[i];
        let px = a.len();
        let mut data = Vec::with_capacity(3 * px);
        for ch in 0..3 {
            data.extend(a.iter().map(|&o| rgb[ch] * o + (1.0 - o) * self.background[ch]));
        }
        Tensor::new([3, CRITIC_RESOLUTION, CRITIC_RESOLUTION], data).expect("image shape")
    }

    /// A random training pair: monochrome render (palette colour with small
    /// jitter) and its keyword ids, colour word first.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, keyword_dropout: f64) -> (Tensor, Vec<usize>) {
        let i = rng.random_range(0..self.len());
        let (word, base) = PALETTE[rng.random_range(0..PALETTE.len())];
        let rgb = base.map(|c: f64| (c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0));
        let mut ids = vec![keyword_id(word).expect("palette words are in the vocabulary")];
        ids.extend(self.keywords[i].iter().copied());
        let ids: Vec<usize> = ids.into_iter().filter(|_| !rng.random_bool(keyword_dropout)).collect();
        (self.image(i, rgb), ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Each keyword is dropped independently with this probability.
    pub keyword_dropout: f64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 8,
            lr: 2e-3,
            seed: 0,
            keyword_dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainReport {
    /// Mean loss over consecutive blocks of 50 iterations.
    pub loss_curve: Vec<f64>,
}

/// Standard DDPM training of the critic on monochrome renders.
pub fn train_toy_critic(
    data: &RenderDataset,
    config: CriticConfig,
    train: &CriticTrainConfig,
) -> Result<(Critic2D, CriticTrainReport)> {
    if train.iterations == 0 || train.batch == 0 || !(0.0..1.0).contains(&train.keyword_dropout) {
        return Err(Error::invalid("critic training needs iterations, batch > 0 and dropout in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut critic = Critic2D::new(config, rng.random())?;
    let adam = AdamConfig::with_lr(train.lr);
    let mut report = CriticTrainReport { loss_curve: Vec::new() };
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..train.iterations {
        if order.len() < train.batch {
            let mut fresh: Vec<usize> = (0..critic.schedule.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let mut xs = Vec::with_capacity(train.batch);
        let mut eps = Vec::with_capacity(train.batch);
        let mut ts = Vec::with_capacity(train.batch);
        let mut kws = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let (img, ids) = data.draw(&mut rng, train.keyword_dropout);
            // Stratified steps keep every t represented in each pass.
            let t = order.pop().expect("refilled above") + 1;
            let e = Tensor::randn(img.shape().to_vec(), 1.0, &mut rng);
            xs.push(q_sample(&img, t, &e, &critic.schedule)?);
            eps.push(e);
            ts.push(t);
            kws.push(ids);
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::stack(&xs)?);
        let target = tape.constant(Tensor::stack(&eps)?);
        let loss = critic.predict_var(&tape, x, &ts, &kws)?.mse(target)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("critic loss {value}"),
            });
        }
        let grads = tape.backward(loss)?.param_grads();
        critic.params.adam_step(&grads, &adam).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        acc += value;
        acc_n += 1;
        if acc_n == 50 || step + 1 == train.iterations {
            report.loss_curve.push(acc / acc_n as f64);
            log::debug!("critic step {step}: loss {:.5}", acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok((critic, report))
}
