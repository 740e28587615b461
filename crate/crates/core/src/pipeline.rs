//! The trained model stack and the request vocabulary shared by the CLI and
//! the HTTP service: condition parsing against a shape catalog, generation
//! with optional blended completion, and checkpoint directory layout.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conditioners::{ConditionPayload, Modality};
use crate::dataset::{keyword_id, Category, DatasetSample, ObservationMask, Silhouette, VOCABULARY};
use crate::diffusion::LatentDiffusion;
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, TsdfGrid};
use crate::metrics::CompletionModel;
use crate::tensor::Tensor;
use crate::texturing::{Critic2D, CriticShape};
use crate::vqvae::VqVaeModel;

pub const VQVAE_FILE: &str = "vqvae.ckpt";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";

/// VQ-VAE, latent diffusion model and the optional texturing critic.
pub struct ModelStack {
    pub vq: VqVaeModel,
    pub ldm: LatentDiffusion,
    pub critic: Option<Critic2D>,
}

impl ModelStack {
    pub fn new(vq: VqVaeModel, ldm: LatentDiffusion, critic: Option<Critic2D>) -> Result<Self> {
        let vc = vq.config();
        let [c, d, _, _] = ldm.latent_shape();
        if c != vc.latent_channels || d != vc.latent_extent() {
            return Err(Error::invalid(format!(
                "diffusion latent [{c}, {d}³] does not match the VQ-VAE latent [{}, {}³]",
                vc.latent_channels,
                vc.latent_extent()
            )));
        }
        if ldm.config().grid_resolution != vc.resolution {
            return Err(Error::invalid("diffusion and VQ-VAE grid resolutions differ"));
        }
        Ok(Self { vq, ldm, critic })
    }

    /// Load `vqvae.ckpt` and `diffusion.ckpt` from `dir`; `critic.ckpt` is
    /// loaded when present.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let require = |name: &str| {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")))
            }
        };
        let vq = VqVaeModel::load(require(VQVAE_FILE)?)?;
        let ldm = LatentDiffusion::load(require(DIFFUSION_FILE)?)?;
        let critic_path = dir.join(CRITIC_FILE);
        let critic = if critic_path.is_file() {
            Some(Critic2D::load(&critic_path)?)
        } else {
            None
        };
        Self::new(vq, ldm, critic)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vq.save(dir.join(VQVAE_FILE))?;
        self.ldm.save(dir.join(DIFFUSION_FILE))?;
        if let Some(c) = &self.critic {
            c.save(dir.join(CRITIC_FILE))?;
        }
        Ok(())
    }

    /// Conditions that steer the denoiser: a partial shape only counts when
    /// the model was trained with partial conditions.
    fn guiding(&self, conditions: &[(ConditionPayload, f64)]) -> Vec<(ConditionPayload, f64)> {
        let with_partial = self.ldm.config().modalities.contains(&Modality::Partial);
        conditions
            .iter()
            .filter(|(p, _)| with_partial || p.modality() != Modality::Partial)
            .cloned()
            .collect()
    }

    /// Cheap validation of a request before committing compute to it.
    pub fn check_request(&self, conditions: &[(ConditionPayload, f64)], steps: Option<usize>) -> Result<()> {
        let t = self.ldm.schedule().len();
        if let Some(s) = steps {
            if s == 0 || s > t {
                return Err(Error::invalid(format!("steps must be in 1..={t}, got {s}")));
            }
        }
        let partials = conditions.iter().filter(|(p, _)| p.modality() == Modality::Partial).count();
        if partials > 1 {
            return Err(Error::invalid("at most one partial condition"));
        }
        for (p, _) in conditions {
            if let ConditionPayload::Partial { grid, .. } = p {
                if grid.resolution() != self.vq.config().resolution {
                    return Err(Error::invalid(format!(
                        "partial grid resolution {} differs from the model's {}",
                        grid.resolution(),
                        self.vq.config().resolution
                    )));
                }
            }
        }
        self.ldm.encode_conditions(&self.guiding(conditions)).map(|_| ())
    }

    /// Generate a grid. A partial condition switches to blended completion;
    /// it also guides the denoiser when the model was trained with it.
    /// `progress` receives the completed fraction after every step.
    pub fn generate(
        &self,
        conditions: &[(ConditionPayload, f64)],
        seed: u64,
        steps: Option<usize>,
        mut progress: Option<&mut dyn FnMut(f64)>,
    ) -> Result<TsdfGrid> {
        let partial = conditions.iter().find_map(|(p, _)| match p {
            ConditionPayload::Partial { grid, mask } => Some((grid, mask)),
            _ => None,
        });
        let guided = self.ldm.encode_conditions(&self.guiding(conditions))?;
        let total = steps.unwrap_or(self.ldm.schedule().len()) as f64;
        match partial {
            None => {
                let mut report = |done: usize, all: usize| {
                    if let Some(p) = progress.as_mut() {
                        p(done as f64 / all as f64);
                    }
                };
                let latent = self.ldm.sample_latent_with_progress(&guided, seed, steps, &mut report)?;
                self.vq.decode_quantized(&latent)
            }
            Some((grid, mask)) => {
                let mut observe = |step: &crate::diffusion::BlendStep| {
                    if let Some(p) = progress.as_mut() {
                        p((total - step.t as f64) / total);
                    }
                    Ok(())
                };
                let out = self.ldm.complete(&self.vq, grid, mask, &guided, seed, steps, Some(&mut observe))?;
                Ok(out.grid)
            }
        }
    }
}

/// Latents (VQ-VAE units) and condition payloads for diffusion training,
/// keeping only payloads of the listed modalities.
pub fn diffusion_training_data(
    vq: &VqVaeModel,
    samples: &[DatasetSample],
    modalities: &[Modality],
) -> Result<(Vec<Tensor>, Vec<Vec<ConditionPayload>>)> {
    let grids: Vec<TsdfGrid> = samples.iter().map(|s| s.grid.clone()).collect();
    let latents = vq.encode_batch(&grids)?.into_iter().map(|l| l.into_tensor()).collect();
    let conditions = samples
        .iter()
        .map(|s| {
            ConditionPayload::all_from_sample(s)
                .into_iter()
                .filter(|p| modalities.contains(&p.modality()))
                .collect()
        })
        .collect();
    Ok((latents, conditions))
}

/// The first `n` samples as critic training shapes, tagged with their class
/// name; the colour keyword is added per draw.
pub fn critic_shapes(samples: &[DatasetSample], n: usize) -> Vec<CriticShape> {
    samples
        .iter()
        .take(n)
        .map(|s| CriticShape {
            grid: s.grid.clone(),
            keywords: vec![s.category().name().to_string()],
        })
        .collect()
}

/// [`CompletionModel`] over a model stack for the evaluation harness.
pub struct StackCompleter<'a> {
    pub stack: &'a ModelStack,
    /// Guidance weight of the partial condition, used only when the model
    /// was trained with it.
    pub partial_weight: f64,
    pub steps: Option<usize>,
}

impl CompletionModel for StackCompleter<'_> {
    fn complete(&self, partial: &TsdfGrid, mask: &ObservationMask, seed: u64) -> Result<TsdfGrid> {
        let cond = ConditionPayload::Partial {
            grid: partial.clone(),
            mask: mask.clone(),
        };
        self.stack.generate(&[(cond, self.partial_weight)], seed, self.steps, None)
    }
}

fn default_weight() -> f64 {
    1.0
}

/// One condition in a generation request, in its wire form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRequest {
    pub modality: String,
    pub payload: Value,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl ConditionRequest {
    /// Parse `modality=payload[@weight]`, e.g. `class=chair@2` or
    /// `text=red,tall`.
    pub fn parse_cli(arg: &str) -> Result<Self> {
        let (modality, rest) = arg
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("condition `{arg}` is not modality=payload[@weight]")))?;
        let (payload, weight) = match rest.rsplit_once('@') {
            Some((p, w)) => (
                p,
                w.parse::<f64>().map_err(|_| Error::invalid(format!("bad weight `{w}` in `{arg}`")))?,
            ),
            None => (rest, 1.0),
        };
        let payload = match modality {
            "text" => Value::Array(
                payload
                    .split(',')
                    .map(str::trim)
                    .filter(|w| !w.is_empty())
                    .map(|w| Value::String(w.to_string()))
                    .collect(),
            ),
            "class" => match payload.parse::<u64>() {
                Ok(n) => Value::from(n),
                Err(_) => Value::String(payload.to_string()),
            },
            _ => Value::String(payload.to_string()),
        };
        Ok(Self {
            modality: modality.to_string(),
            payload,
            weight,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialShapeView {
    pub id: String,
    pub category: String,
    /// OBJ text of the observed part.
    pub preview: String,
}

/// Body of the catalog endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogView {
    pub classes: Vec<String>,
    pub keywords: Vec<String>,
    pub partial_shapes: Vec<PartialShapeView>,
}

/// Shapes whose partial observations and silhouettes requests may refer to.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    samples: Vec<DatasetSample>,
}

impl Catalog {
    pub fn new(samples: Vec<DatasetSample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[DatasetSample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Option<&DatasetSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn view(&self) -> CatalogView {
        CatalogView {
            classes: Category::ALL.iter().map(|c| c.name().to_string()).collect(),
            keywords: VOCABULARY.iter().map(|w| w.to_string()).collect(),
            partial_shapes: self
                .samples
                .iter()
                .map(|s| PartialShapeView {
                    id: s.id.clone(),
                    category: s.category().name().to_string(),
                    preview: marching_cubes(&s.partial, 0.0).to_obj(),
                })
                .collect(),
        }
    }

    fn sample_for(&self, modality: &str, id: &str) -> Result<&DatasetSample> {
        self.get(id)
            .ok_or_else(|| Error::invalid(format!("{modality} payload: unknown catalog shape `{id}`")))
    }

    /// Turn a wire condition into a payload and its weight.
    pub fn resolve(&self, req: &ConditionRequest) -> Result<(ConditionPayload, f64)> {
        if !req.weight.is_finite() {
            return Err(Error::invalid("guidance weights must be finite"));
        }
        let modality = Modality::from_name(&req.modality)
            .ok_or_else(|| Error::invalid(format!("unknown modality `{}`", req.modality)))?;
        let payload = match (modality, &req.payload) {
            (Modality::Partial, Value::String(id)) => {
                let s = self.sample_for("partial", id)?;
                ConditionPayload::Partial {
                    grid: s.partial.clone(),
                    mask: s.mask.clone(),
                }
            }
            (Modality::Class, Value::String(name)) => ConditionPayload::Class(
                Category::from_name(name)
                    .ok_or_else(|| Error::invalid(format!("unknown class `{name}`")))?
                    .id(),
            ),
            (Modality::Class, Value::Number(n)) => ConditionPayload::Class(
                n.as_u64()
                    .ok_or_else(|| Error::invalid(format!("class id {n} is not a non-negative integer")))?
                    as usize,
            ),
            (Modality::Text, Value::String(s)) => ConditionPayload::Text(keyword_ids(s.split([' ', ',']))?),
            (Modality::Text, Value::Array(words)) => {
                let words = words
                    .iter()
                    .map(|w| w.as_str().ok_or_else(|| Error::invalid("text keywords must be strings")))
                    .collect::<Result<Vec<_>>>()?;
                ConditionPayload::Text(keyword_ids(words.into_iter())?)
            }
            (Modality::Silhouette, Value::String(s)) => match self.get(s) {
                Some(sample) => ConditionPayload::Silhouette(sample.silhouette.clone()),
                None => ConditionPayload::Silhouette(Silhouette::from_base64(s)?),
            },
            (m, other) => {
                return Err(Error::invalid(format!("unsupported {} payload {other}", m.name())));
            }
        };
        payload.validate()?;
        Ok((payload, req.weight))
    }

    pub fn resolve_all(&self, reqs: &[ConditionRequest]) -> Result<Vec<(ConditionPayload, f64)>> {
        reqs.iter().map(|r| self.resolve(r)).collect()
    }
}

fn keyword_ids<'a>(words: impl Iterator<Item = &'a str>) -> Result<Vec<usize>> {
    words
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(|w| keyword_id(w).ok_or_else(|| Error::invalid(format!("unknown keyword `{w}`"))))
        .collect()
}
