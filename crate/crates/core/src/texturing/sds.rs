use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::critic::Critic2D;
use super::render::{ColorField, Image, RenderConfig, RenderOperator};
use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, tsdf_to_density, TsdfGrid};
use crate::tensor::{AdamConfig, ParamStore, Tensor};

/// A frozen image denoiser that provides scores.
pub trait ScoreCritic {
    fn schedule(&self) -> &DiffusionSchedule;
    fn predict_eps(&self, x_t: &Tensor, t: usize, keywords: &[usize]) -> Result<Tensor>;

    /// Score-distillation weight `w(t)`; defaults to [`sds_weight`].
    fn weight(&self, t: usize) -> f64 {
        sds_weight(self.schedule(), t)
    }
}

impl ScoreCritic for Critic2D {
    fn schedule(&self) -> &DiffusionSchedule {
        Critic2D::schedule(self)
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, keywords: &[usize]) -> Result<Tensor> {
        Critic2D::predict_eps(self, x_t, t, keywords)
    }
}

/// `w(t) = 1 - ᾱ_t`.
pub fn sds_weight(schedule: &DiffusionSchedule, t: usize) -> f64 {
    1.0 - schedule.alpha_bar(t)
}

/// Result of one score-distillation evaluation.
#[derive(Clone, Debug)]
pub struct SdsStep {
    pub image: Image,
    /// `w(t) (ε̃ - ε)` in image space.
    pub residual: Tensor,
    /// Gradient on the colour logits, `[3, d, d, d]`.
    pub grad_logits: Tensor,
}

/// Score-distillation gradient for the colour field. The residual
/// `w(t)(ε̃ - ε)` is treated as a constant and pulled back through the
/// renderer only; the critic receives no gradient.
pub fn sds_grad(
    critic: &dyn ScoreCritic,
    field: &ColorField,
    op: &RenderOperator,
    keywords: &[usize],
    t: usize,
    eps: &Tensor,
) -> Result<SdsStep> {
    let sched = critic.schedule();
    if t == 0 || t > sched.len() {
        return Err(Error::invalid(format!("t = {t} outside 1..={}", sched.len())));
    }
    let colors = field.colors();
    let image = op.apply(&colors)?;
    let x_t = q_sample(&image.tensor, t, eps, sched)?;
    let pred = critic.predict_eps(&x_t, t, keywords)?;
    if pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "sds_grad",
            lhs: eps.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    let w = critic.weight(t);
    let residual_data = pred.data().iter().zip(eps.data()).map(|(p, e)| w * (p - e)).collect();
    let residual = Tensor::new(eps.shape().to_vec(), residual_data)?;
    let grad_colors = op.transpose_apply(&residual)?;
    let grad_data = grad_colors
        .data()
        .iter()
        .zip(colors.data())
        .map(|(g, c)| g * c * (1.0 - c))
        .collect();
    Ok(SdsStep {
        image,
        residual,
        grad_logits: Tensor::new(colors.shape().to_vec(), grad_data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub render: RenderConfig,
    pub field_resolution: usize,
    pub init_color: [f64; 3],
    pub lr: f64,
    /// Diffusion steps are drawn uniformly from this fraction of `1..=T`.
    pub t_range: (f64, f64),
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            field_resolution: 16,
            init_color: [0.5; 3],
            lr: 0.1,
            t_range: (0.02, 0.98),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureReport {
    /// Mean absolute residual per step.
    pub residual_curve: Vec<f64>,
}

/// Optimise a colour field so renders of the fixed-density shape score well
/// under the critic for `keywords`. Deterministic per seed.
pub fn texture_shape(
    critic: &dyn ScoreCritic,
    grid: &TsdfGrid,
    keywords: &[usize],
    steps: usize,
    cfg: &TextureConfig,
    seed: u64,
) -> Result<(ColorField, TextureReport)> {
    cfg.render.validate()?;
    let (lo, hi) = cfg.t_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("bad t range ({lo}, {hi})")));
    }
    let mut field = ColorField::uniform(cfg.field_resolution, cfg.init_color)?;
    let mut report = TextureReport {
        residual_curve: Vec::with_capacity(steps),
    };
    if steps == 0 {
        return Ok((field, report));
    }
    let density = tsdf_to_density(grid, cfg.render.alpha, cfg.render.beta)?;
    let poses = cfg.render.poses();
    let mut operators: Vec<Option<RenderOperator>> = vec![None; poses.len()];
    let big_t = critic.schedule().len();
    let t_min = ((lo * big_t as f64).ceil() as usize).clamp(1, big_t);
    let t_max = ((hi * big_t as f64).floor() as usize).clamp(t_min, big_t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("color.logits", field.logits().clone())?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let px = cfg.render.resolution;
    for step in 0..steps {
        let k = rng.random_range(0..poses.len());
        if operators[k].is_none() {
            operators[k] = Some(RenderOperator::new(&density, cfg.field_resolution, poses[k], &cfg.render)?);
        }
        let op = operators[k].as_ref().expect("built above");
        let t = rng.random_range(t_min..=t_max);
        let eps = Tensor::randn([3, px, px], 1.0, &mut rng);
        let sds = sds_grad(critic, &field, op, keywords, t, &eps)?;
        report.residual_curve.push(sds.residual.data().iter().map(|v| v.abs()).sum::<f64>() / sds.residual.numel() as f64);
        let grads = BTreeMap::from([("color.logits".to_string(), sds.grad_logits)]);
        store.adam_step(&grads, &adam)?;
        let logits = store.get("color.logits").expect("inserted above").clone();
        field = ColorField::from_logits(logits).map_err(|_| Error::Diverged {
            step,
            detail: "colour field became non-finite".into(),
        })?;
    }
    Ok((field, report))
}

/// Mean colour of the field over the vertices of the shape's surface.
pub fn surface_mean_color(grid: &TsdfGrid, field: &ColorField) -> Result<[f64; 3]> {
    let mesh = marching_cubes(grid, 0.0);
    if mesh.is_empty() {
        return Err(Error::invalid("shape has no surface"));
    }
    let mut acc = [0.0; 3];
    for v in &mesh.vertices {
        let c = field.query(*v);
        for k in 0..3 {
            acc[k] += c[k];
        }
    }
    Ok(acc.map(|a| a / mesh.vertices.len() as f64))
}

/// OBJ of the shape's surface with `v x y z r g b` vertex colours.
pub fn textured_obj(grid: &TsdfGrid, field: &ColorField) -> Result<String> {
    let mesh = marching_cubes(grid, 0.0);
    let colors: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| field.query(*v)).collect();
    mesh.to_obj_with_colors(&colors)
}
