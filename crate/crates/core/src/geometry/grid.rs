use std::io::{Read, Write};
use std::path::Path;

use super::sdf::{AnalyticSdf, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRID_MAGIC: &[u8; 8] = b"SDFGRID1";

/// Default truncation band in shape units.
pub const DEFAULT_TRUNCATION: f64 = 0.2;

/// `D^3` truncated signed distances over the cube `[-1, 1]^3`.
///
/// Voxel `(x, y, z)` is centred at `-1 + (i + 0.5) * 2 / D` per axis and is
/// stored at `x + D * (y + D * z)`; `z` is up. Values are negative inside.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfGrid {
    resolution: usize,
    truncation: f64,
    values: Vec<f32>,
}

impl TsdfGrid {
    /// A grid with every voxel at `+τ` (no surface).
    pub fn empty(resolution: usize, truncation: f64) -> Self {
        Self {
            resolution,
            truncation,
            values: vec![truncation as f32; resolution.pow(3)],
        }
    }

    pub fn from_values(resolution: usize, truncation: f64, values: Vec<f32>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::invalid(format!(
                "grid of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                values.len()
            )));
        }
        if !(truncation > 0.0) {
            return Err(Error::invalid(format!("truncation must be > 0, got {truncation}")));
        }
        let tau = truncation as f32;
        let values = values.into_iter().map(|v| v.clamp(-tau, tau)).collect();
        Ok(Self {
            resolution,
            truncation,
            values,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        let tau = self.truncation as f32;
        self.values[i] = value.clamp(-tau, tau);
    }

    /// World-space centre of voxel `(x, y, z)`.
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        voxel_center(self.resolution, [x, y, z])
    }

    /// Fraction of voxels with negative distance.
    pub fn occupancy(&self) -> f64 {
        self.values.iter().filter(|v| **v < 0.0).count() as f64 / self.values.len() as f64
    }

    /// Intersection-over-union of the interiors (`sdf < 0`) of two grids.
    pub fn interior_iou(&self, other: &TsdfGrid) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::ShapeMismatch {
                op: "interior_iou",
                lhs: vec![self.resolution],
                rhs: vec![other.resolution],
            });
        }
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            let (ia, ib) = (*a < 0.0, *b < 0.0);
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    /// `[1, D, D, D]` tensor (channel, z, y, x).
    pub fn to_tensor(&self) -> Tensor {
        let d = self.resolution;
        Tensor::new(vec![1, d, d, d], self.values.iter().map(|&v| v as f64).collect())
            .expect("grid tensor shape")
    }

    /// Inverse of [`TsdfGrid::to_tensor`]; values are clamped to `±τ`.
    pub fn from_tensor(t: &Tensor, truncation: f64) -> Result<Self> {
        let d = *t.shape().last().unwrap_or(&0);
        if t.numel() != d.pow(3) {
            return Err(Error::invalid(format!("tensor {:?} is not a cubic grid", t.shape())));
        }
        Self::from_values(d, truncation, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&self.truncation.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|e| bad(format!("header: {e}")))?;
        if &head[..8] != GRID_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let d = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let tau = f64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
        let mut raw = vec![0u8; d.pow(3) * 4];
        r.read_exact(&mut raw).map_err(|e| bad(format!("values: {e}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_values(d, tau, values).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(20 + self.values.len() * 4);
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(&bytes[..], path)
    }
}

pub(crate) fn voxel_center(resolution: usize, idx: [usize; 3]) -> Vec3 {
    let h = 2.0 / resolution as f64;
    [
        -1.0 + (idx[0] as f64 + 0.5) * h,
        -1.0 + (idx[1] as f64 + 0.5) * h,
        -1.0 + (idx[2] as f64 + 0.5) * h,
    ]
}

/// Sample `tree` at every voxel centre and clamp to `[-τ, τ]`.
pub fn rasterize_tsdf(tree: &AnalyticSdf, resolution: usize, truncation: f64) -> Result<TsdfGrid> {
    if !(truncation > 0.0) {
        return Err(Error::invalid(format!("truncation must be > 0, got {truncation}")));
    }
    if resolution < 8 {
        return Err(Error::invalid(format!("resolution must be >= 8, got {resolution}")));
    }
    let voxel = 2.0 / resolution as f64;
    if truncation <= voxel {
        return Err(Error::invalid(format!(
            "truncation {truncation} does not exceed the voxel size {voxel}"
        )));
    }
    let mut values = Vec::with_capacity(resolution.pow(3));
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let d = tree.evaluate(voxel_center(resolution, [x, y, z]));
                values.push(d.clamp(-truncation, truncation) as f32);
            }
        }
    }
    Ok(TsdfGrid {
        resolution,
        truncation,
        values,
    })
}
