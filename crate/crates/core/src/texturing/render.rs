use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DensityGrid, Vec3};
use crate::tensor::Tensor;

/// Orthographic camera direction on the viewing sphere, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    pub samples_per_ray: usize,
    /// Half the side of the orthographic view window, in shape units.
    pub half_width: f64,
    pub background: [f64; 3],
    pub azimuths: usize,
    pub elevations: Vec<f64>,
    /// Density scale and Laplace sharpness for the SDF-to-density map.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            samples_per_ray: 64,
            half_width: 1.3,
            background: [1.0; 3],
            azimuths: 8,
            elevations: vec![15.0, 40.0],
            alpha: 50.0,
            beta: 0.02,
        }
    }
}

/// Rays start this far from the centre; the path covers the `[-1, 1]³` cube.
const RAY_HALF_LENGTH: f64 = 1.7320508075688772;

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 16 {
            return Err(Error::invalid(format!(
                "need at least 16 samples per ray, got {}",
                self.samples_per_ray
            )));
        }
        if self.resolution == 0 || self.azimuths == 0 || self.elevations.is_empty() || !(self.half_width > 0.0) {
            return Err(Error::invalid("render resolution, pose set and view window must be nonempty"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The fixed pose set: every azimuth at every elevation.
    pub fn poses(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.azimuths * self.elevations.len());
        for &elevation in &self.elevations {
            for i in 0..self.azimuths {
                out.push(Pose {
                    azimuth: 360.0 * i as f64 / self.azimuths as f64,
                    elevation,
                });
            }
        }
        out
    }

    /// Step length between ray samples.
    pub fn step(&self) -> f64 {
        2.0 * RAY_HALF_LENGTH / self.samples_per_ray as f64
    }
}

/// Per-sample compositing weights `T_j a_j` and the final transmittance for
/// optical depths `σ_j δ`.
pub fn ray_weights(optical_depth: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(optical_depth.len());
    for &sd in optical_depth {
        let a = 1.0 - (-sd).exp();
        w.push(t * a);
        t *= 1.0 - a;
    }
    (w, t)
}

/// `Σ T_j a_j c_j + T_final · background` along one ray.
pub fn composite_ray(optical_depth: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Result<[f64; 3]> {
    if optical_depth.len() != colors.len() {
        return Err(Error::invalid("one color per ray sample required"));
    }
    let (w, t) = ray_weights(optical_depth);
    let mut out = [0.0; 3];
    for (wj, c) in w.iter().zip(colors) {
        for k in 0..3 {
            out[k] += wj * c[k];
        }
    }
    for k in 0..3 {
        out[k] += t * background[k];
    }
    Ok(out)
}

/// Trilinear interpolation weights at `p` over voxel centres of a `res³`
/// grid on `[-1, 1]³`, clamped at the border.
pub fn trilinear(res: usize, p: Vec3) -> [(usize, f64); 8] {
    let mut lo = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let u = ((p[a] + 1.0) * res as f64 / 2.0 - 0.5).clamp(0.0, (res - 1) as f64);
        let i = (u.floor() as usize).min(res.saturating_sub(2));
        lo[a] = i;
        f[a] = if res > 1 { u - i as f64 } else { 0.0 };
    }
    let hi = |a: usize| (lo[a] + 1).min(res - 1);
    let mut out = [(0, 0.0); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let (bx, by, bz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
        let x = if bx == 1 { hi(0) } else { lo[0] };
        let y = if by == 1 { hi(1) } else { lo[1] };
        let z = if bz == 1 { hi(2) } else { lo[2] };
        let w = (if bx == 1 { f[0] } else { 1.0 - f[0] })
            * (if by == 1 { f[1] } else { 1.0 - f[1] })
            * (if bz == 1 { f[2] } else { 1.0 - f[2] });
        *slot = (x + res * (y + res * z), w);
    }
    out
}

fn sample_density(density: &DensityGrid, p: Vec3) -> f64 {
    trilinear(density.resolution(), p)
        .iter()
        .map(|&(i, w)| w * density.values()[i])
        .sum()
}

/// Learnable RGB voxel grid. Colours are `sigmoid(logits)`, so queries stay
/// in `[0, 1]`; queries interpolate colours trilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorField {
    resolution: usize,
    /// `[3, d, d, d]`, channel-major.
    logits: Tensor,
}

impl ColorField {
    pub fn uniform(resolution: usize, rgb: [f64; 3]) -> Result<Self> {
        if resolution == 0 || rgb.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
            return Err(Error::invalid("uniform colour needs resolution > 0 and channels in (0, 1)"));
        }
        let v = resolution.pow(3);
        let mut data = Vec::with_capacity(3 * v);
        for c in rgb {
            data.extend(std::iter::repeat_n((c / (1.0 - c)).ln(), v));
        }
        Self::from_logits(Tensor::new([3, resolution, resolution, resolution], data)?)
    }

    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 4 || s[0] != 3 || s[1] != s[2] || s[2] != s[3] {
            return Err(Error::invalid(format!("colour logits must be [3, d, d, d], got {s:?}")));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite { op: "color field" });
        }
        Ok(Self {
            resolution: s[1],
            logits,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Per-voxel colours, `[3, d, d, d]`.
    pub fn colors(&self) -> Tensor {
        self.logits.map(|l| 1.0 / (1.0 + (-l).exp()))
    }

    pub fn query(&self, p: Vec3) -> [f64; 3] {
        let v = self.resolution.pow(3);
        let w = trilinear(self.resolution, p);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = w
                .iter()
                .map(|&(i, wi)| wi / (1.0 + (-self.logits.data()[c * v + i]).exp()))
                .sum();
        }
        out
    }
}

/// RGB image, `[3, H, W]` with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub tensor: Tensor,
}

impl Image {
    pub fn resolution(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let r = self.resolution();
        let d = self.tensor.data();
        [d[row * r + col], d[r * r + row * r + col], d[2 * r * r + row * r + col]]
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let r = self.resolution();
        let mut bytes = format!("P6\n{r} {r}\n255\n").into_bytes();
        for row in 0..r {
            for col in 0..r {
                for c in self.pixel(row, col) {
                    bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }
}

/// The renderer for one (density, pose) pair. With density fixed the image
/// is affine in the voxel colours: `I = W c + T_final · background`, so the
/// operator stores the sparse `W` once and serves both the forward render
/// and its transpose.
#[derive(Clone, Debug)]
pub struct RenderOperator {
    resolution: usize,
    voxels: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    transmittance: Vec<f64>,
    background: [f64; 3],
}

fn camera(pose: Pose) -> (Vec3, Vec3, Vec3) {
    let (a, e) = (pose.azimuth.to_radians(), pose.elevation.to_radians());
    let forward = [-e.cos() * a.cos(), -e.cos() * a.sin(), -e.sin()];
    let right = [-a.sin(), a.cos(), 0.0];
    let up = [-e.sin() * a.cos(), -e.sin() * a.sin(), e.cos()];
    (forward, right, up)
}

impl RenderOperator {
    /// `voxel_resolution` is the colour field's grid resolution.
    pub fn new(density: &DensityGrid, voxel_resolution: usize, pose: Pose, cfg: &RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution;
        let (forward, right, up) = camera(pose);
        let delta = cfg.step();
        let mut row_start = Vec::with_capacity(r * r + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut transmittance = Vec::with_capacity(r * r);
        let mut optical = vec![0.0; cfg.samples_per_ray];
        let mut points = vec![[0.0; 3]; cfg.samples_per_ray];
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(8 * cfg.samples_per_ray);
        for row in 0..r {
            for col in 0..r {
                let u = cfg.half_width * ((col as f64 + 0.5) / r as f64 * 2.0 - 1.0);
                let v = cfg.half_width * (1.0 - (row as f64 + 0.5) / r as f64 * 2.0);
                for j in 0..cfg.samples_per_ray {
                    let s = -RAY_HALF_LENGTH + (j as f64 + 0.5) * delta;
                    let p = [
                        u * right[0] + v * up[0] + s * forward[0],
                        u * right[1] + v * up[1] + s * forward[1],
                        u * right[2] + v * up[2] + s * forward[2],
                    ];
                    points[j] = p;
                    optical[j] = sample_density(density, p) * delta;
                }
                let (w, t) = ray_weights(&optical);
                acc.clear();
                for (p, wj) in points.iter().zip(&w) {
                    if *wj == 0.0 {
                        continue;
                    }
                    for (i, ti) in trilinear(voxel_resolution, *p) {
                        if ti != 0.0 {
                            acc.push((i, wj * ti));
                        }
                    }
                }
                acc.sort_unstable_by_key(|e| e.0);
                row_start.push(cols.len());
                for &(i, w) in &acc {
                    if cols.last().is_some_and(|&c| c as usize == i) && cols.len() > *row_start.last().unwrap() {
                        *weights.last_mut().unwrap() += w;
                    } else {
                        cols.push(i as u32);
                        weights.push(w);
                    }
                }
                transmittance.push(t);
            }
        }
        row_start.push(cols.len());
        Ok(Self {
            resolution: r,
            voxels: voxel_resolution.pow(3),
            row_start,
            cols,
            weights,
            transmittance,
            background: cfg.background,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Accumulated opacity `Σ T_j a_j` per pixel.
    pub fn opacity(&self) -> Vec<f64> {
        self.transmittance.iter().map(|t| 1.0 - t).collect()
    }

    /// Final transmittance per pixel.
    pub fn transmittance(&self) -> &[f64] {
        &self.transmittance
    }

    /// Render per-voxel colours `[3, d, d, d]`.
    pub fn apply(&self, colors: &Tensor) -> Result<Image> {
        if colors.numel() != 3 * self.voxels {
            return Err(Error::invalid(format!(
                "expected {} colour values, got {}",
                3 * self.voxels,
                colors.numel()
            )));
        }
        let px = self.resolution * self.resolution;
        let c = colors.data();
        let mut out = vec![0.0; 3 * px];
        for p in 0..px {
            let range = self.row_start[p]..self.row_start[p + 1];
            for ch in 0..3 {
                let base = ch * self.voxels;
                let mut s = self.transmittance[p] * self.background[ch];
                for k in range.clone() {
                    s += self.weights[k] * c[base + self.cols[k] as usize];
                }
                out[ch * px + p] = s;
            }
        }
        Ok(Image {
            tensor: Tensor::new([3, self.resolution, self.resolution], out)?,
        })
    }

    /// `Wᵀ g`: gradient on voxel colours from an image-space gradient.
    pub fn transpose_apply(&self, grad_image: &Tensor) -> Result<Tensor> {
        let px = self.resolution * self.resolution;
        if grad_image.numel() != 3 * px {
            return Err(Error::invalid("image gradient has the wrong size"));
        }
        let g = grad_image.data();
        let mut out = vec![0.0; 3 * self.voxels];
        for p in 0..px {
            for k in self.row_start[p]..self.row_start[p + 1] {
                let (v, w) = (self.cols[k] as usize, self.weights[k]);
                for ch in 0..3 {
                    out[ch * self.voxels + v] += w * g[ch * px + p];
                }
            }
        }
        let d = (self.voxels as f64).cbrt().round() as usize;
        Tensor::new([3, d, d, d], out)
    }
}

/// Render `color` over `density` from `pose`.
pub fn render(density: &DensityGrid, color: &ColorField, pose: Pose, cfg: &RenderConfig) -> Result<Image> {
    RenderOperator::new(density, color.resolution(), pose, cfg)?.apply(&color.colors())
}

/// Per-pixel accumulated opacity only (no colour field needed).
pub fn render_opacity(density: &DensityGrid, pose: Pose, cfg: &RenderConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let r = cfg.resolution;
    let (forward, right, up) = camera(pose);
    let delta = cfg.step();
    let mut out = Vec::with_capacity(r * r);
    let mut optical = vec![0.0; cfg.samples_per_ray];
    for row in 0..r {
        for col in 0..r {
            let u = cfg.half_width * ((col as f64 + 0.5) / r as f64 * 2.0 - 1.0);
            let v = cfg.half_width * (1.0 - (row as f64 + 0.5) / r as f64 * 2.0);
            for (j, o) in optical.iter_mut().enumerate() {
                let s = -RAY_HALF_LENGTH + (j as f64 + 0.5) * delta;
                let p = [
                    u * right[0] + v * up[0] + s * forward[0],
                    u * right[1] + v * up[1] + s * forward[1],
                    u * right[2] + v * up[2] + s * forward[2],
                ];
                *o = sample_density(density, p) * delta;
            }
            out.push(1.0 - ray_weights(&optical).1);
        }
    }
    Ok(out)
}
