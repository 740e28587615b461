//! 3D VQ-VAE: strided conv encoder (x4 downsampling), nearest-codebook
//! quantizer with a straight-through gradient, transposed-conv decoder
//! ending in `tanh` scaled to the truncation band.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TsdfGrid;
use crate::tensor::nn::{Conv3d, ConvTranspose3d, GroupNorm};
use crate::tensor::{load_params, save_params, AdamConfig, ConvAttrs, ParamStore, Tape, Tensor, Var};

const CODEBOOK: &str = "codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    pub resolution: usize,
    pub truncation: f64,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub beta_commit: f64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            truncation: crate::geometry::DEFAULT_TRUNCATION,
            latent_channels: 8,
            codebook_size: 256,
            hidden: 8,
            beta_commit: 0.25,
        }
    }
}

impl VqVaeConfig {
    pub fn latent_extent(&self) -> usize {
        self.resolution / 4
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(Error::invalid(format!(
                "resolution must be a multiple of 4 and >= 8, got {}",
                self.resolution
            )));
        }
        if self.codebook_size < 2 || self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::invalid("codebook needs K >= 2 and nonzero channel counts"));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::invalid("truncation must be positive"));
        }
        Ok(())
    }
}

/// Continuous latent `[c, d, d, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    tensor: Tensor,
}

impl LatentGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[1] != s[2] || s[2] != s[3] {
            return Err(Error::invalid(format!("latent must be [c, d, d, d], got {s:?}")));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(channels: usize, extent: usize) -> Self {
        Self {
            tensor: Tensor::zeros([channels, extent, extent, extent]),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn extent(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn sites(&self) -> usize {
        self.extent().pow(3)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Channel vector at flat site index `s`.
    pub fn site(&self, s: usize) -> Vec<f64> {
        let n = self.sites();
        (0..self.channels()).map(|c| self.tensor.data()[c * n + s]).collect()
    }

    pub fn set_site(&mut self, s: usize, v: &[f64]) {
        let n = self.sites();
        for (c, x) in v.iter().enumerate() {
            self.tensor.data_mut()[c * n + s] = *x;
        }
    }
}

/// Index of the nearest row of `codebook` (`[K, c]`) to `v`; ties go to the
/// lowest index.
pub fn nearest_code(codebook: &Tensor, v: &[f64]) -> usize {
    let c = codebook.shape()[1];
    let mut best = (f64::INFINITY, 0);
    for (k, row) in codebook.data().chunks_exact(c).enumerate() {
        let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Replace every site by its nearest codebook entry.
pub fn quantize(z: &LatentGrid, codebook: &Tensor) -> Result<(LatentGrid, Vec<usize>)> {
    if codebook.rank() != 2 || codebook.shape()[1] != z.channels() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: z.tensor.shape().to_vec(),
            rhs: codebook.shape().to_vec(),
        });
    }
    let c = z.channels();
    let mut out = z.clone();
    let mut ids = Vec::with_capacity(z.sites());
    for s in 0..z.sites() {
        let k = nearest_code(codebook, &z.site(s));
        out.set_site(s, &codebook.data()[k * c..(k + 1) * c]);
        ids.push(k);
    }
    Ok((out, ids))
}

/// The three loss terms of a forward pass, each a scalar on the tape.
pub struct VqLoss<'t> {
    pub total: Var<'t>,
    pub reconstruction: Var<'t>,
    pub codebook: Var<'t>,
    pub commitment: Var<'t>,
}

/// `L1(x, x_rec) + |sg(z_e) - z_q|^2 + β |z_e - sg(z_q)|^2`, squared norms
/// taken per latent site and averaged over sites.
pub fn vqvae_loss<'t>(
    x: Var<'t>,
    x_rec: Var<'t>,
    z_e: Var<'t>,
    z_q: Var<'t>,
    beta_commit: f64,
) -> Result<VqLoss<'t>> {
    let channels = z_e.shape().get(1).copied().unwrap_or(1) as f64;
    let reconstruction = x_rec.l1(x)?;
    let codebook = z_q.mse(z_e.stop_gradient()?)?.scale(channels)?;
    let commitment = z_e.mse(z_q.stop_gradient()?)?.scale(channels * beta_commit)?;
    let total = reconstruction.add(codebook)?.add(commitment)?;
    Ok(VqLoss {
        total,
        reconstruction,
        codebook,
        commitment,
    })
}

/// Result of [`VqVaeModel::forward_batch`].
pub struct VqForward<'t> {
    pub z_e: Var<'t>,
    pub z_q: Var<'t>,
    pub x_rec: Var<'t>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Layers {
    enc_in: Conv3d,
    enc_norm1: GroupNorm,
    enc_down1: Conv3d,
    enc_norm2: GroupNorm,
    enc_down2: Conv3d,
    enc_norm3: GroupNorm,
    enc_out: Conv3d,
    dec_in: Conv3d,
    dec_norm1: GroupNorm,
    dec_up1: ConvTranspose3d,
    dec_norm2: GroupNorm,
    dec_up2: ConvTranspose3d,
    dec_norm3: GroupNorm,
    dec_out: Conv3d,
}

impl Layers {
    fn build(cfg: &VqVaeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = cfg.hidden;
        let (h2, h4) = (2 * h, 4 * h);
        let c = cfg.latent_channels;
        let same = ConvAttrs::new(1, 1);
        let point = ConvAttrs::new(1, 0);
        let down = ConvAttrs::new(2, 1);
        Ok(Self {
            enc_in: Conv3d::new(store, "enc.in", 1, h, 3, same, rng)?,
            enc_norm1: GroupNorm::new(store, "enc.norm1", h, 4)?,
            enc_down1: Conv3d::new(store, "enc.down1", h, h2, 4, down, rng)?,
            enc_norm2: GroupNorm::new(store, "enc.norm2", h2, 4)?,
            enc_down2: Conv3d::new(store, "enc.down2", h2, h4, 4, down, rng)?,
            enc_norm3: GroupNorm::new(store, "enc.norm3", h4, 4)?,
            enc_out: Conv3d::new(store, "enc.out", h4, c, 1, point, rng)?,
            dec_in: Conv3d::new(store, "dec.in", c, h4, 3, same, rng)?,
            dec_norm1: GroupNorm::new(store, "dec.norm1", h4, 4)?,
            dec_up1: ConvTranspose3d::new(store, "dec.up1", h4, h2, 4, down, rng)?,
            dec_norm2: GroupNorm::new(store, "dec.norm2", h2, 4)?,
            dec_up2: ConvTranspose3d::new(store, "dec.up2", h2, h, 4, down, rng)?,
            dec_norm3: GroupNorm::new(store, "dec.norm3", h, 4)?,
            dec_out: Conv3d::new(store, "dec.out", h, 1, 3, same, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VqVaeModel {
    config: VqVaeConfig,
    params: ParamStore,
    layers: Layers,
}

impl VqVaeModel {
    pub fn new(config: VqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = Layers::build(&config, &mut params, &mut rng)?;
        let k = config.codebook_size;
        params.insert(
            CODEBOOK,
            Tensor::uniform([k, config.latent_channels], 1.0 / k as f64, &mut rng),
        )?;
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(CODEBOOK).expect("codebook is always present")
    }

    /// `x`: `[N, 1, D, D, D]` -> `z_e`: `[N, c, d, d, d]`.
    pub fn encode_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let (l, p) = (&self.layers, &self.params);
        let h = l.enc_in.forward(tape, p, x)?;
        let h = l.enc_norm1.forward(tape, p, h)?.silu()?;
        let h = l.enc_down1.forward(tape, p, h)?;
        let h = l.enc_norm2.forward(tape, p, h)?.silu()?;
        let h = l.enc_down2.forward(tape, p, h)?;
        let h = l.enc_norm3.forward(tape, p, h)?.silu()?;
        l.enc_out.forward(tape, p, h)
    }

    /// `z`: `[N, c, d, d, d]` -> `[N, 1, D, D, D]` in `[-τ, τ]`.
    pub fn decode_var<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let (l, p) = (&self.layers, &self.params);
        let h = l.dec_in.forward(tape, p, z)?;
        let h = l.dec_norm1.forward(tape, p, h)?.silu()?;
        let h = l.dec_up1.forward(tape, p, h)?;
        let h = l.dec_norm2.forward(tape, p, h)?.silu()?;
        let h = l.dec_up2.forward(tape, p, h)?;
        let h = l.dec_norm3.forward(tape, p, h)?.silu()?;
        l.dec_out.forward(tape, p, h)?.tanh()?.scale(self.config.truncation)
    }

    /// Nearest-entry lookup on the tape. Forward value is the codebook
    /// entry; the returned `z_st` carries the straight-through gradient to
    /// `z_e`, while `z_q` carries the gradient to the codebook.
    pub fn quantize_var<'t>(&self, tape: &'t Tape, z_e: Var<'t>) -> Result<(Var<'t>, Var<'t>, Vec<usize>)> {
        let shape = z_e.shape();
        let (n, c, d) = (shape[0], shape[1], shape[2]);
        let sites = d * d * d;
        let value = z_e.value();
        let codebook = self.codebook();
        let mut ids = Vec::with_capacity(n * sites);
        let mut v = vec![0.0; c];
        for b in 0..n {
            let base = b * c * sites;
            for s in 0..sites {
                for (ch, x) in v.iter_mut().enumerate() {
                    *x = value.data()[base + ch * sites + s];
                }
                ids.push(nearest_code(codebook, &v));
            }
        }
        let table = tape.param(&self.params, CODEBOOK)?;
        let z_q = table
            .embedding(&ids)?
            .reshape(&[n, d, d, d, c])?
            .permute(&[0, 4, 1, 2, 3])?;
        let z_st = z_e.add(z_q.sub(z_e)?.stop_gradient()?)?;
        Ok((z_q, z_st, ids))
    }

    pub fn forward_batch<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<VqForward<'t>> {
        let z_e = self.encode_var(tape, x)?;
        let (z_q, z_st, indices) = self.quantize_var(tape, z_e)?;
        let x_rec = self.decode_var(tape, z_st)?;
        Ok(VqForward {
            z_e,
            z_q,
            x_rec,
            indices,
        })
    }

    fn check_grid(&self, grid: &TsdfGrid) -> Result<()> {
        if grid.resolution() != self.config.resolution {
            return Err(Error::ShapeMismatch {
                op: "vqvae.encode",
                lhs: vec![self.config.resolution],
                rhs: vec![grid.resolution()],
            });
        }
        Ok(())
    }

    pub fn encode(&self, grid: &TsdfGrid) -> Result<LatentGrid> {
        Ok(self.encode_batch(std::slice::from_ref(grid))?.remove(0))
    }

    pub fn encode_batch(&self, grids: &[TsdfGrid]) -> Result<Vec<LatentGrid>> {
        for g in grids {
            self.check_grid(g)?;
        }
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::stack(&grids.iter().map(TsdfGrid::to_tensor).collect::<Vec<_>>())?);
        let z = self.encode_var(&tape, x)?.value();
        (0..grids.len())
            .map(|i| LatentGrid::new(z.slice_first(i)?))
            .collect()
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<(LatentGrid, Vec<usize>)> {
        quantize(z, self.codebook())
    }

    /// Decode a latent as given (callers quantize first when needed).
    pub fn decode(&self, z: &LatentGrid) -> Result<TsdfGrid> {
        let d = self.config.latent_extent();
        if z.extent() != d || z.channels() != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "vqvae.decode",
                lhs: vec![self.config.latent_channels, d, d, d],
                rhs: z.tensor.shape().to_vec(),
            });
        }
        let tape = Tape::no_grad();
        let mut shape = vec![1];
        shape.extend_from_slice(z.tensor.shape());
        let x = tape.constant(z.tensor.clone().reshape(shape)?);
        let out = self.decode_var(&tape, x)?.value();
        TsdfGrid::from_tensor(&out, self.config.truncation)
    }

    /// `decode(quantize(z))`.
    pub fn decode_quantized(&self, z: &LatentGrid) -> Result<TsdfGrid> {
        self.decode(&self.quantize(z)?.0)
    }

    pub fn reconstruct(&self, grid: &TsdfGrid) -> Result<TsdfGrid> {
        self.decode_quantized(&self.encode(grid)?)
    }

    /// Fraction of codebook entries selected by at least one site of `grids`.
    pub fn codebook_usage(&self, grids: &[TsdfGrid]) -> Result<f64> {
        let mut used = vec![false; self.config.codebook_size];
        for chunk in grids.chunks(16) {
            for z in self.encode_batch(chunk)? {
                for k in self.quantize(&z)?.1 {
                    used[k] = true;
                }
            }
        }
        Ok(used.iter().filter(|u| **u).count() as f64 / used.len() as f64)
    }

    /// Writes the parameter container at `path` and the config sidecar
    /// next to it with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(&self.params, path)?;
        let sidecar = VqSidecar {
            latent_extent: self.config.latent_extent(),
            config: self.config.clone(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: VqSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let params = load_params(path)?;
        let mut model = Self::new(sidecar.config, 0)?;
        adopt_params(&mut model.params, params, path)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct VqSidecar {
    config: VqVaeConfig,
    latent_extent: usize,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Replace a freshly built store with loaded values of identical layout.
pub(crate) fn adopt_params(fresh: &mut ParamStore, loaded: ParamStore, origin: &Path) -> Result<()> {
    let same_names = fresh.names().eq(loaded.names());
    if !same_names {
        return Err(Error::format(origin, "parameter names do not match the architecture"));
    }
    for (name, t) in loaded.iter() {
        if fresh.get(name).map(Tensor::shape) != Some(t.shape()) {
            return Err(Error::format(origin, format!("parameter `{name}` has shape {:?}", t.shape())));
        }
    }
    *fresh = loaded;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    /// Epoch-mean total loss.
    pub loss_curve: Vec<f64>,
    /// Epoch-mean reconstruction (L1) loss.
    pub reconstruction_curve: Vec<f64>,
    pub codebook_usage: f64,
}

/// Seed the codebook with encoder outputs of the first batch so entries
/// start on the data manifold.
fn init_codebook_from_data(model: &mut VqVaeModel, grids: &[TsdfGrid], rng: &mut ChaCha8Rng) -> Result<()> {
    let c = model.config.latent_channels;
    let k = model.config.codebook_size;
    let mut pool = Vec::new();
    for chunk in grids.chunks(16) {
        for z in model.encode_batch(chunk)? {
            for s in 0..z.sites() {
                pool.push(z.site(s));
            }
        }
        if pool.len() >= 4 * k {
            break;
        }
    }
    let mut data = Vec::with_capacity(k * c);
    for _ in 0..k {
        let v = &pool[rng.random_range(0..pool.len())];
        data.extend(v.iter().map(|x| x + rng.random_range(-1e-2..1e-2)));
    }
    model.params.set(CODEBOOK, Tensor::new(vec![k, c], data)?)
}

pub fn train_vqvae(
    grids: &[TsdfGrid],
    model_config: VqVaeConfig,
    train: &VqTrainConfig,
) -> Result<(VqVaeModel, VqTrainReport)> {
    if grids.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if train.batch == 0 || train.epochs == 0 {
        return Err(Error::invalid("epochs and batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = VqVaeModel::new(model_config, rng.random())?;
    for g in grids {
        model.check_grid(g)?;
    }
    init_codebook_from_data(&mut model, grids, &mut rng)?;
    let adam = AdamConfig::with_lr(train.lr);
    let tensors: Vec<Tensor> = grids.iter().map(TsdfGrid::to_tensor).collect();
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut report = VqTrainReport {
        loss_curve: Vec::new(),
        reconstruction_curve: Vec::new(),
        codebook_usage: 0.0,
    };
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut recon, mut seen) = (0.0, 0.0, 0usize);
        let mut used = vec![false; model.config.codebook_size];
        let mut pool: Vec<Vec<f64>> = Vec::new();
        for idx in order.chunks(train.batch) {
            let batch = Tensor::stack(&idx.iter().map(|&i| tensors[i].clone()).collect::<Vec<_>>())?;
            let tape = Tape::new();
            let x = tape.constant(batch);
            let fwd = model.forward_batch(&tape, x).map_err(|e| diverged(step, e))?;
            let loss = vqvae_loss(x, fwd.x_rec, fwd.z_e, fwd.z_q, model.config.beta_commit)
                .map_err(|e| diverged(step, e))?;
            let value = loss.total.value().item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value} in epoch {epoch}"),
                });
            }
            total += value * idx.len() as f64;
            recon += loss.reconstruction.value().item()? * idx.len() as f64;
            seen += idx.len();
            for &k in &fwd.indices {
                used[k] = true;
            }
            collect_sites(&fwd.z_e.value(), &mut pool);
            let grads = tape.backward(loss.total)?.param_grads();
            model.params.adam_step_subset(&grads, &adam).map_err(|e| diverged(step, e))?;
            step += 1;
        }
        if epoch + 1 < train.epochs {
            restart_dead_codes(&mut model, &used, &pool, &mut rng)?;
        }
        report.loss_curve.push(total / seen as f64);
        report.reconstruction_curve.push(recon / seen as f64);
        log::debug!("vqvae epoch {epoch}: loss {:.5}", total / seen as f64);
    }
    report.codebook_usage = model.codebook_usage(grids)?;
    Ok((model, report))
}

/// Append the site vectors of a `[N, c, d, d, d]` batch, keeping at most
/// the most recent 2048.
fn collect_sites(z: &Tensor, pool: &mut Vec<Vec<f64>>) {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let sites = z.numel() / (n * c);
    for b in 0..n {
        for s in 0..sites {
            pool.push((0..c).map(|ch| z.data()[(b * c + ch) * sites + s]).collect());
        }
    }
    if pool.len() > 2048 {
        pool.drain(..pool.len() - 2048);
    }
}

/// Move entries no site selected during the epoch onto recent encoder
/// outputs, so they can compete again.
fn restart_dead_codes(model: &mut VqVaeModel, used: &[bool], pool: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<()> {
    if pool.is_empty() || used.iter().all(|u| *u) {
        return Ok(());
    }
    let c = model.config.latent_channels;
    let mut table = model.codebook().clone();
    for (k, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
        let v = &pool[rng.random_range(0..pool.len())];
        for (ch, x) in v.iter().enumerate() {
            table.data_mut()[k * c + ch] = x + rng.random_range(-1e-3..1e-3);
        }
    }
    model.params.set(CODEBOOK, table)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}
