//! `sdfgen` subcommands. [`run`] returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sdfgen_core::conditioners::Modality;
use sdfgen_core::dataset::{
    build_dataset, keyword_id, load_dataset, save_dataset, Dataset, DatasetConfig, DatasetSample, PartialMode,
};
use sdfgen_core::diffusion::{train_diffusion, CondDropout, DenoiserConfig, DiffusionConfig, DiffusionTrainConfig};
use sdfgen_core::geometry::{marching_cubes, TsdfGrid};
use sdfgen_core::metrics::{evaluate_completion, EvalConfig, DEFAULT_POINTS};
use sdfgen_core::pipeline::{
    critic_shapes, diffusion_training_data, Catalog, ConditionRequest, ModelStack, StackCompleter, CRITIC_FILE,
    VQVAE_FILE,
};
use sdfgen_core::texturing::{
    render, texture_shape, textured_obj, train_toy_critic, Critic2D, CriticConfig, CriticTrainConfig, RenderConfig,
    RenderDataset, TextureConfig,
};
use sdfgen_core::vqvae::{train_vqvae, VqTrainConfig, VqVaeConfig, VqVaeModel};

use crate::config::RunConfig;
use crate::service::{serve, Service, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "sdfgen", version, about = "Latent diffusion over signed distance fields")]
pub struct Cli {
    /// JSON run configuration (see docs/config.schema.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory. Dataset directory for gen-dataset, checkpoint
    /// directory for train-*, results directory otherwise (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic shape dataset.
    GenDataset(GenDatasetArgs),
    /// Train the VQ-VAE on the training split.
    TrainVqvae(TrainVqvaeArgs),
    /// Train the latent diffusion model on VQ-VAE latents.
    TrainDiffusion(TrainDiffusionArgs),
    /// Train the 2D critic used for texturing.
    TrainCritic(TrainCriticArgs),
    /// Sample a shape under weighted conditions and write an OBJ.
    Sample(SampleArgs),
    /// Complete a dataset shape from its partial observation.
    Complete(CompleteArgs),
    /// Colour a shape from keywords by score distillation.
    Texture(TextureArgs),
    /// Run the completion benchmark (UHD/TMD) on the test split.
    Evaluate(EvaluateArgs),
    /// Start the HTTP generation service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PartialKind {
    BottomHalf,
    TopHalf,
    Octant,
}

#[derive(Args, Debug)]
pub struct GenDatasetArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, value_enum, default_value = "bottom-half")]
    pub partial_mode: PartialKind,
}

#[derive(Args, Debug)]
pub struct TrainVqvaeArgs {
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub codebook: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_channels: usize,
}

#[derive(Args, Debug)]
pub struct TrainDiffusionArgs {
    #[arg(long, default_value_t = 3000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    /// Comma-separated subset of partial,class,text,silhouette.
    #[arg(long, value_delimiter = ',', default_value = "partial,class,text,silhouette", value_parser = parse_modality)]
    pub modalities: Vec<Modality>,
}

#[derive(Args, Debug)]
pub struct TrainCriticArgs {
    #[arg(long, default_value_t = 1500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// Training shapes rendered from 16 poses each.
    #[arg(long, default_value_t = 24)]
    pub shapes: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Condition as modality=payload[@weight], e.g. class=chair@2,
    /// text=tall,red, partial=<shape id>, silhouette=<shape id or base64>.
    #[arg(long = "cond", value_parser = parse_condition)]
    pub conditions: Vec<ConditionRequest>,
    /// Reverse steps (respaced); defaults to the full schedule.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    /// Dataset shape id; defaults to the first test shape.
    #[arg(long)]
    pub shape: Option<String>,
    /// Completions to draw (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Extra guidance conditions, as for `sample`.
    #[arg(long = "cond", value_parser = parse_condition)]
    pub conditions: Vec<ConditionRequest>,
    #[arg(long, default_value_t = 1.0)]
    pub partial_weight: f64,
}

#[derive(Args, Debug)]
pub struct TextureArgs {
    /// Dataset shape id to texture.
    #[arg(long, conflicts_with = "grid")]
    pub shape: Option<String>,
    /// A `.tsdf` grid file to texture.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Comma-separated keywords, e.g. red,chair.
    #[arg(long, value_delimiter = ',', required = true)]
    pub keywords: Vec<String>,
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub n_points: usize,
    /// Evaluate only the first N test shapes.
    #[arg(long)]
    pub shapes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub partial_weight: f64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::from_name(s.trim()).ok_or_else(|| format!("unknown modality `{s}`"))
}

fn parse_condition(s: &str) -> Result<ConditionRequest, String> {
    ConditionRequest::parse_cli(s).map_err(|e| e.to_string())
}

/// A failed command: bad input (exit 1) or a runtime failure (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<sdfgen_core::Error> for CliError {
    fn from(e: sdfgen_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        cfg,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::GenDataset(a) => gen_dataset(&ctx, a),
        Command::TrainVqvae(a) => train_vq(&ctx, a),
        Command::TrainDiffusion(a) => train_ldm(&ctx, a),
        Command::TrainCritic(a) => train_critic(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Complete(a) => complete(&ctx, a),
        Command::Texture(a) => texture(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
    }
}

struct Context {
    cfg: RunConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn checkpoint_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.cfg.checkpoints.clone())
    }

    fn results_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn dataset(&self) -> CliResult<Dataset> {
        let ds = load_dataset(&self.cfg.dataset)?;
        if ds.config.resolution != self.cfg.resolution {
            log::warn!(
                "dataset resolution {} differs from the configured {}",
                ds.config.resolution,
                self.cfg.resolution
            );
        }
        Ok(ds)
    }

    fn stack(&self) -> CliResult<ModelStack> {
        Ok(ModelStack::load(&self.cfg.checkpoints)?)
    }

    /// All dataset shapes, or none when no dataset has been generated.
    fn catalog(&self) -> CliResult<Catalog> {
        if !self.cfg.dataset.join(sdfgen_core::dataset::MANIFEST_FILE).is_file() {
            return Ok(Catalog::default());
        }
        let ds = self.dataset()?;
        Ok(Catalog::new(ds.all().cloned().collect()))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &text)
}

fn gen_dataset(ctx: &Context, a: GenDatasetArgs) -> CliResult {
    let config = DatasetConfig {
        n: a.n,
        seed: ctx.seed,
        split_ratio: a.split,
        resolution: ctx.cfg.resolution,
        truncation: ctx.cfg.truncation,
        partial_mode: match a.partial_mode {
            PartialKind::BottomHalf => PartialMode::BottomHalf,
            PartialKind::TopHalf => PartialMode::TopHalf,
            PartialKind::Octant => PartialMode::Octant(ctx.seed),
        },
    };
    let ds = build_dataset(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = ctx.out.clone().unwrap_or_else(|| ctx.cfg.dataset.clone());
    save_dataset(&ds, &dir)?;
    println!("wrote {} train + {} test shapes to {}", ds.train.len(), ds.test.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct VqReport {
    loss_curve: Vec<f64>,
    reconstruction_curve: Vec<f64>,
    codebook_usage: f64,
    test_iou: f64,
    seconds: f64,
}

fn train_vq(ctx: &Context, a: TrainVqvaeArgs) -> CliResult {
    let ds = ctx.dataset()?;
    let grids: Vec<TsdfGrid> = ds.train.iter().map(|s| s.grid.clone()).collect();
    let model_cfg = VqVaeConfig {
        resolution: ds.config.resolution,
        truncation: ds.config.truncation,
        latent_channels: a.latent_channels,
        codebook_size: a.codebook,
        hidden: a.hidden,
        ..VqVaeConfig::default()
    };
    let train = VqTrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed: ctx.seed,
    };
    let t0 = Instant::now();
    let (model, report) = train_vqvae(&grids, model_cfg, &train)?;
    let mut iou = 0.0;
    for s in &ds.test {
        iou += model.reconstruct(&s.grid)?.interior_iou(&s.grid)?;
    }
    let dir = ctx.checkpoint_dir();
    std::fs::create_dir_all(&dir)?;
    model.save(dir.join(VQVAE_FILE))?;
    let out = VqReport {
        test_iou: iou / ds.test.len().max(1) as f64,
        codebook_usage: report.codebook_usage,
        loss_curve: report.loss_curve,
        reconstruction_curve: report.reconstruction_curve,
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("vqvae-report.json"), &out)?;
    println!(
        "vqvae: held-out IoU {:.3}, codebook usage {:.1}%, {:.0}s -> {}",
        out.test_iou,
        100.0 * out.codebook_usage,
        out.seconds,
        dir.join(VQVAE_FILE).display()
    );
    Ok(())
}

fn train_ldm(ctx: &Context, a: TrainDiffusionArgs) -> CliResult {
    if a.modalities.is_empty() {
        return Err(CliError::Usage("at least one modality is required".into()));
    }
    let ds = ctx.dataset()?;
    let dir = ctx.checkpoint_dir();
    let vq = VqVaeModel::load(dir.join(VQVAE_FILE))?;
    let (latents, conditions) = diffusion_training_data(&vq, &ds.train, &a.modalities)?;
    let vc = vq.config();
    let config = DiffusionConfig {
        denoiser: DenoiserConfig {
            latent_channels: vc.latent_channels,
            latent_extent: vc.latent_extent(),
            base_channels: a.base_channels,
            ..DenoiserConfig::default()
        },
        modalities: a.modalities.clone(),
        grid_resolution: vc.resolution,
        ..ctx.cfg.diffusion()
    };
    let train = DiffusionTrainConfig {
        iterations: a.iterations,
        batch: a.batch,
        lr: a.lr,
        seed: ctx.seed,
        dropout: CondDropout::default(),
    };
    let t0 = Instant::now();
    let (model, report) = train_diffusion(&latents, &conditions, config, &train)?;
    let path = dir.join(sdfgen_core::pipeline::DIFFUSION_FILE);
    model.save(&path)?;
    write_json(&dir.join("diffusion-report.json"), &report)?;
    println!(
        "diffusion: final loss {:.4}, {:.0}s -> {}",
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn train_critic(ctx: &Context, a: TrainCriticArgs) -> CliResult {
    let ds = ctx.dataset()?;
    let shapes = critic_shapes(&ds.train, a.shapes);
    let t0 = Instant::now();
    let data = RenderDataset::build(&shapes, &RenderConfig::default())?;
    let train = CriticTrainConfig {
        iterations: a.iterations,
        batch: a.batch,
        lr: a.lr,
        seed: ctx.seed,
        ..CriticTrainConfig::default()
    };
    let (critic, report) = train_toy_critic(&data, CriticConfig::default(), &train)?;
    let dir = ctx.checkpoint_dir();
    std::fs::create_dir_all(&dir)?;
    critic.save(dir.join(CRITIC_FILE))?;
    write_json(&dir.join("critic-report.json"), &report)?;
    println!(
        "critic: {} renders, final loss {:.4}, {:.0}s -> {}",
        data.len(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64(),
        dir.join(CRITIC_FILE).display()
    );
    Ok(())
}

fn resolve(
    catalog: &Catalog,
    stack: &ModelStack,
    reqs: &[ConditionRequest],
    steps: Option<usize>,
) -> CliResult<Vec<(sdfgen_core::conditioners::ConditionPayload, f64)>> {
    let conds = catalog.resolve_all(reqs).map_err(|e| CliError::Usage(e.to_string()))?;
    stack.check_request(&conds, steps).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(conds)
}

fn sample(ctx: &Context, a: SampleArgs) -> CliResult {
    let stack = ctx.stack()?;
    let conds = resolve(&ctx.catalog()?, &stack, &a.conditions, a.steps)?;
    let grid = stack.generate(&conds, ctx.seed, a.steps, None)?;
    let path = ctx.results_dir()?.join(format!("sample-{}.obj", ctx.seed));
    write_text(&path, &marching_cubes(&grid, 0.0).to_obj())?;
    println!("{}", path.display());
    Ok(())
}

fn find_shape<'a>(ds: &'a Dataset, id: Option<&str>) -> CliResult<&'a DatasetSample> {
    match id {
        Some(id) => ds
            .all()
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Usage(format!("unknown shape id `{id}`"))),
        None => ds.test.first().ok_or_else(|| CliError::Runtime("dataset has no test shapes".into())),
    }
}

fn complete(ctx: &Context, a: CompleteArgs) -> CliResult {
    if a.k == 0 {
        return Err(CliError::Usage("k must be positive".into()));
    }
    let stack = ctx.stack()?;
    let ds = ctx.dataset()?;
    let catalog = Catalog::new(ds.all().cloned().collect());
    let shape = find_shape(&ds, a.shape.as_deref())?;
    let mut reqs = a.conditions.clone();
    reqs.push(ConditionRequest {
        modality: "partial".into(),
        payload: shape.id.clone().into(),
        weight: a.partial_weight,
    });
    let conds = resolve(&catalog, &stack, &reqs, a.steps)?;
    let dir = ctx.results_dir()?;
    write_text(&dir.join(format!("partial-{}.obj", shape.id)), &marching_cubes(&shape.partial, 0.0).to_obj())?;
    for j in 0..a.k as u64 {
        let grid = stack.generate(&conds, ctx.seed + j, a.steps, None)?;
        let path = dir.join(format!("complete-{}-{}.obj", shape.id, ctx.seed + j));
        write_text(&path, &marching_cubes(&grid, 0.0).to_obj())?;
        println!("{}", path.display());
    }
    Ok(())
}

fn texture(ctx: &Context, a: TextureArgs) -> CliResult {
    let critic_path = ctx.cfg.checkpoints.join(CRITIC_FILE);
    let critic = Critic2D::load(&critic_path)?;
    let (name, grid) = match (&a.grid, &a.shape) {
        (Some(p), _) => (
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into()),
            TsdfGrid::load(p)?,
        ),
        (None, id) => {
            let ds = ctx.dataset()?;
            let s = find_shape(&ds, id.as_deref())?;
            (s.id.clone(), s.grid.clone())
        }
    };
    let keywords = a
        .keywords
        .iter()
        .map(|w| keyword_id(w.trim()).ok_or_else(|| CliError::Usage(format!("unknown keyword `{w}`"))))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = TextureConfig {
        lr: a.lr,
        ..TextureConfig::default()
    };
    let (field, report) = texture_shape(&critic, &grid, &keywords, a.steps, &cfg, ctx.seed)?;
    let dir = ctx.results_dir()?;
    let obj = dir.join(format!("textured-{name}.obj"));
    write_text(&obj, &textured_obj(&grid, &field)?)?;
    let density = sdfgen_core::geometry::tsdf_to_density(&grid, cfg.render.alpha, cfg.render.beta)?;
    let view = render(&density, &field, cfg.render.poses()[0], &cfg.render)?;
    let ppm = dir.join(format!("textured-{name}.ppm"));
    view.write_ppm(&ppm)?;
    let tail = report.residual_curve.iter().rev().take(20).sum::<f64>() / report.residual_curve.len().clamp(1, 20) as f64;
    println!("{} (preview {}), final mean residual {tail:.4}", obj.display(), ppm.display());
    Ok(())
}

fn evaluate(ctx: &Context, a: EvaluateArgs) -> CliResult {
    let stack = ctx.stack()?;
    let ds = ctx.dataset()?;
    let n = a.shapes.unwrap_or(ds.test.len()).min(ds.test.len());
    if n == 0 {
        return Err(CliError::Runtime("no test shapes to evaluate".into()));
    }
    let model = StackCompleter {
        stack: &stack,
        partial_weight: a.partial_weight,
        steps: a.steps,
    };
    let cfg = EvalConfig {
        k: a.k,
        n_points: a.n_points,
        seed: ctx.seed,
    };
    let report = evaluate_completion(&model, &ds.test[..n], &cfg).map_err(|e| match e {
        sdfgen_core::Error::InvalidArgument(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    let path = ctx.results_dir()?.join("evaluation.json");
    write_text(&path, &report.to_json()?)?;
    println!("{}", report.to_table());
    println!("{}", path.display());
    Ok(())
}

fn serve_cmd(ctx: &Context, a: ServeArgs) -> CliResult {
    let cfg = &ctx.cfg;
    for p in [&cfg.dataset, &cfg.checkpoints] {
        if !p.exists() {
            return Err(CliError::Runtime(format!("{} does not exist", p.display())));
        }
    }
    let workers = a.workers.unwrap_or(cfg.workers);
    let queue_capacity = a.queue_capacity.unwrap_or(cfg.queue_capacity);
    if workers == 0 || queue_capacity == 0 {
        return Err(CliError::Usage("workers and queue capacity must be positive".into()));
    }
    let stack = ctx.stack()?;
    let ds = ctx.dataset()?;
    let catalog = Catalog::new(ds.test.iter().take(cfg.catalog_size).cloned().collect());
    let service = Service::start(
        stack,
        catalog,
        ServiceConfig {
            queue_capacity,
            workers,
            results: ctx.out.clone().or_else(|| cfg.results.clone()),
        },
    )?;
    let router = service.router();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(router.clone(), a.port.unwrap_or(cfg.port)))?;
    service.shutdown(router);
    Ok(())
}
